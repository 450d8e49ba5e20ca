"""Model layers: embedding FC, dropout, LSTM cell, the four directional
sweeps over the 32x64 feature grid, and the pose regression heads.

All forward functions are pure and rank-polymorphic: a rank-1 feature
vector gives rank-1 outputs, a [B x F] batch gives [B x ...] outputs.
Recording happens only under an active GradTape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GRID_COLS, GRID_ROWS, ModelParams, Tensor
from .errors import ConfigError, DimensionError, UsageError

EMBED_DIM = GRID_ROWS * GRID_COLS

DIRECTIONS = ("left", "right", "up", "down")

_GATE_NAMES = ("W_i", "W_f", "W_o", "W_g", "U_i", "U_f", "U_o", "U_g",
               "b_i", "b_f", "b_o", "b_g")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


@dataclass(frozen=True)
class LstmParams:
    """One LSTM's parameters: per-gate input weights [H x D], recurrent
    weights [H x H], and biases [H], for gates i, f, o, g."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        H, D = self.W_i.shape if self.W_i.ndim == 2 else (None, None)
        _require(H is not None, f"LstmParams: W_i must be rank-2, got shape {self.W_i.shape}")
        for name in ("W_i", "W_f", "W_o", "W_g"):
            _require(getattr(self, name).shape == (H, D),
                     f"LstmParams: {name} shape {getattr(self, name).shape} != ({H}, {D})")
        for name in ("U_i", "U_f", "U_o", "U_g"):
            _require(getattr(self, name).shape == (H, H),
                     f"LstmParams: {name} shape {getattr(self, name).shape} != ({H}, {H})")
        for name in ("b_i", "b_f", "b_o", "b_g"):
            _require(getattr(self, name).shape == (H,),
                     f"LstmParams: {name} shape {getattr(self, name).shape} != ({H},)")

    @property
    def hidden_size(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_i.shape[1]


@dataclass(frozen=True)
class HeadParams:
    """Full regression model: embedding FC into the 2048-entry grid, four
    directional LSTMs, and position/quaternion FCs off the concatenated
    final hidden states.

    Left/right sweeps step over columns, so their input size is the row
    count (32); up/down sweeps step over rows, input size 64. All four
    share one hidden size H, giving a 4H concat feeding both heads.
    """

    W_embed: Tensor
    b_embed: Tensor
    left: LstmParams
    right: LstmParams
    up: LstmParams
    down: LstmParams
    W_pos: Tensor
    b_pos: Tensor
    W_quat: Tensor
    b_quat: Tensor

    def __post_init__(self):
        _require(self.W_embed.ndim == 2 and self.W_embed.shape[0] == EMBED_DIM,
                 f"HeadParams: W_embed must be [{EMBED_DIM} x F], got {self.W_embed.shape}")
        _require(self.b_embed.shape == (EMBED_DIM,),
                 f"HeadParams: b_embed shape {self.b_embed.shape}")
        H = self.left.hidden_size
        for name, want_d in (("left", GRID_ROWS), ("right", GRID_ROWS),
                             ("up", GRID_COLS), ("down", GRID_COLS)):
            lstm = getattr(self, name)
            if lstm.input_size != want_d:
                raise ConfigError(
                    f"HeadParams: {name} sweep needs input size {want_d}, got {lstm.input_size}")
            _require(lstm.hidden_size == H,
                     f"HeadParams: {name} hidden size {lstm.hidden_size} != {H}")
        _require(self.W_pos.shape == (3, 4 * H),
                 f"HeadParams: W_pos shape {self.W_pos.shape} != (3, {4 * H})")
        _require(self.W_quat.shape == (4, 4 * H),
                 f"HeadParams: W_quat shape {self.W_quat.shape} != (4, {4 * H})")
        _require(self.b_pos.shape == (3,), f"HeadParams: b_pos shape {self.b_pos.shape}")
        _require(self.b_quat.shape == (4,), f"HeadParams: b_quat shape {self.b_quat.shape}")

    @property
    def feature_size(self) -> int:
        return self.W_embed.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.left.hidden_size

    def as_model_params(self) -> ModelParams:
        values: dict[str, Tensor] = {"W_embed": self.W_embed, "b_embed": self.b_embed}
        for direction in DIRECTIONS:
            lstm = getattr(self, direction)
            for gate in _GATE_NAMES:
                values[f"{direction}.{gate}"] = getattr(lstm, gate)
        values.update(W_pos=self.W_pos, b_pos=self.b_pos,
                      W_quat=self.W_quat, b_quat=self.b_quat)
        biases = {name for name in values if name.split(".")[-1].startswith("b_")}
        return ModelParams(values, bias_names=biases)

    @classmethod
    def from_model_params(cls, params: ModelParams) -> "HeadParams":
        def lstm(direction):
            return LstmParams(**{g: params[f"{direction}.{g}"] for g in _GATE_NAMES})

        return cls(W_embed=params["W_embed"], b_embed=params["b_embed"],
                   left=lstm("left"), right=lstm("right"),
                   up=lstm("up"), down=lstm("down"),
                   W_pos=params["W_pos"], b_pos=params["b_pos"],
                   W_quat=params["W_quat"], b_quat=params["b_quat"])


@dataclass(frozen=True)
class FcHeadParams:
    """Baseline regressor: the same embedding FC, then position and
    quaternion FCs straight off the 2048-entry embedding.

    An optional linear bottleneck (W_proj, b_proj) inserts a rank-limited
    projection before the pose FCs; the ablation harness uses it to match
    this baseline's parameter count to the recurrent head's.
    """

    W_embed: Tensor
    b_embed: Tensor
    W_pos: Tensor
    b_pos: Tensor
    W_quat: Tensor
    b_quat: Tensor
    W_proj: Tensor | None = None
    b_proj: Tensor | None = None

    def __post_init__(self):
        _require(self.W_embed.ndim == 2 and self.W_embed.shape[0] == EMBED_DIM,
                 f"FcHeadParams: W_embed must be [{EMBED_DIM} x F], got {self.W_embed.shape}")
        _require(self.b_embed.shape == (EMBED_DIM,),
                 f"FcHeadParams: b_embed shape {self.b_embed.shape}")
        _require((self.W_proj is None) == (self.b_proj is None),
                 "FcHeadParams: W_proj and b_proj must be given together")
        if self.W_proj is None:
            head_in = EMBED_DIM
        else:
            _require(self.W_proj.ndim == 2 and self.W_proj.shape[1] == EMBED_DIM,
                     f"FcHeadParams: W_proj must be [M x {EMBED_DIM}], got {self.W_proj.shape}")
            head_in = self.W_proj.shape[0]
            _require(self.b_proj.shape == (head_in,),
                     f"FcHeadParams: b_proj shape {self.b_proj.shape}")
        _require(self.W_pos.shape == (3, head_in),
                 f"FcHeadParams: W_pos shape {self.W_pos.shape} != (3, {head_in})")
        _require(self.W_quat.shape == (4, head_in),
                 f"FcHeadParams: W_quat shape {self.W_quat.shape} != (4, {head_in})")
        _require(self.b_pos.shape == (3,), f"FcHeadParams: b_pos shape {self.b_pos.shape}")
        _require(self.b_quat.shape == (4,), f"FcHeadParams: b_quat shape {self.b_quat.shape}")

    @property
    def feature_size(self) -> int:
        return self.W_embed.shape[1]

    @property
    def bottleneck(self) -> int:
        return 0 if self.W_proj is None else self.W_proj.shape[0]

    def as_model_params(self) -> ModelParams:
        values = {"W_embed": self.W_embed, "b_embed": self.b_embed,
                  "W_pos": self.W_pos, "b_pos": self.b_pos,
                  "W_quat": self.W_quat, "b_quat": self.b_quat}
        biases = {"b_embed", "b_pos", "b_quat"}
        if self.W_proj is not None:
            values.update(W_proj=self.W_proj, b_proj=self.b_proj)
            biases.add("b_proj")
        return ModelParams(values, bias_names=biases)

    @classmethod
    def from_model_params(cls, params: ModelParams) -> "FcHeadParams":
        proj = {}
        if "W_proj" in params:
            proj = dict(W_proj=params["W_proj"], b_proj=params["b_proj"])
        return cls(W_embed=params["W_embed"], b_embed=params["b_embed"],
                   W_pos=params["W_pos"], b_pos=params["b_pos"],
                   W_quat=params["W_quat"], b_quat=params["b_quat"], **proj)


@dataclass(frozen=True)
class ForwardOutput:
    """Predicted position (meters) and unnormalized quaternion. Consumers
    normalize q_raw: the loss internally, evaluation before comparing.
    ``aux`` carries intermediate-head predictions when a backbone exposes
    them; empty otherwise."""

    p_hat: Tensor
    q_raw: Tensor
    aux: tuple = field(default=())


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, (fan_out, fan_in)))


def fan_in_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tensor:
    """Uniform init scaled by fan-in alone, keeping forward activation
    variance near the input's however wide the layer is. Used for the
    embedding FC: its 2048 outputs feed saturating recurrences, where
    activations an order of magnitude under the nonlinearity's scale
    stall learning."""
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, (fan_out, fan_in)))


def init_lstm_params(rng: np.random.Generator, hidden: int, inputs: int,
                     forget_bias: float = 1.0) -> LstmParams:
    """Xavier-uniform weights, zero biases except the forget gate, which
    starts positive so early steps keep their cell state."""
    def gate_w():
        return xavier_uniform(rng, hidden, inputs)

    def gate_u():
        return xavier_uniform(rng, hidden, hidden)

    zeros = lambda: Tensor(np.zeros(hidden))
    return LstmParams(W_i=gate_w(), W_f=gate_w(), W_o=gate_w(), W_g=gate_w(),
                      U_i=gate_u(), U_f=gate_u(), U_o=gate_u(), U_g=gate_u(),
                      b_i=zeros(), b_f=Tensor(np.full(hidden, forget_bias)),
                      b_o=zeros(), b_g=zeros())


def init_head_params(rng: np.random.Generator, feature_size: int,
                     hidden: int = 128, forget_bias: float = 1.0) -> HeadParams:
    """Fresh model parameters.

    The quaternion bias starts at the identity rotation (1,0,0,0) so the
    raw prediction has unit norm before any training, keeping the loss's
    normalization away from its zero-norm singularity from step one.
    """
    return HeadParams(
        W_embed=fan_in_uniform(rng, EMBED_DIM, feature_size),
        b_embed=Tensor(np.zeros(EMBED_DIM)),
        left=init_lstm_params(rng, hidden, GRID_ROWS, forget_bias),
        right=init_lstm_params(rng, hidden, GRID_ROWS, forget_bias),
        up=init_lstm_params(rng, hidden, GRID_COLS, forget_bias),
        down=init_lstm_params(rng, hidden, GRID_COLS, forget_bias),
        W_pos=xavier_uniform(rng, 3, 4 * hidden),
        b_pos=Tensor(np.zeros(3)),
        W_quat=xavier_uniform(rng, 4, 4 * hidden),
        b_quat=Tensor(np.array([1.0, 0.0, 0.0, 0.0])),
    )


def init_fc_head_params(rng: np.random.Generator, feature_size: int,
                        bottleneck: int = 0) -> FcHeadParams:
    """Baseline init. ``bottleneck`` > 0 inserts a linear projection of
    that width between the embedding and the pose FCs."""
    head_in = bottleneck if bottleneck > 0 else EMBED_DIM
    proj = {}
    if bottleneck > 0:
        proj = dict(W_proj=xavier_uniform(rng, bottleneck, EMBED_DIM),
                    b_proj=Tensor(np.zeros(bottleneck)))
    return FcHeadParams(
        W_embed=fan_in_uniform(rng, EMBED_DIM, feature_size),
        b_embed=Tensor(np.zeros(EMBED_DIM)),
        W_pos=xavier_uniform(rng, 3, head_in),
        b_pos=Tensor(np.zeros(3)),
        W_quat=xavier_uniform(rng, 4, head_in),
        b_quat=Tensor(np.array([1.0, 0.0, 0.0, 0.0])),
        **proj,
    )


def regression_param_count(params) -> int:
    """Size of the final pose-prediction stage (both FCs, weights and
    biases). The embedding and any reduction stage are excluded."""
    return sum(getattr(params, name).size
               for name in ("W_pos", "b_pos", "W_quat", "b_quat"))


# ---------------------------------------------------------------------------
# Forward functions
# ---------------------------------------------------------------------------

def fc_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W^T + b for x of shape [F] or [B x F], W [O x F], b [O]."""
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DimensionError(f"fc_forward: W {W.shape} and b {b.shape} inconsistent")
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"fc_forward: input {x.shape} does not match W {W.shape}")
    y = ad.add_bias(ad.matmul(x, ad.transpose(W)), b)
    return ad.reshape(y, (W.shape[0],)) if squeeze else y


def dropout(x: Tensor, rate: float, rng, mode: str) -> Tensor:
    """Inverted dropout: training zeroes each entry with probability
    ``rate`` and scales survivors by 1/(1-rate); eval is the identity."""
    if mode not in ("train", "eval"):
        raise UsageError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout: training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(mask))


def _fused_cache(theta: LstmParams):
    """Stack the four gates so each step costs two matmuls.

    Column blocks are ordered (i, f, o, g): the first 3H columns take the
    sigmoid, the last H the tanh. Stacking goes through traced concat, so
    gradients land back on the per-gate parameter tensors.
    """
    WT = ad.concat([ad.transpose(theta.W_i), ad.transpose(theta.W_f),
                    ad.transpose(theta.W_o), ad.transpose(theta.W_g)])
    UT = ad.concat([ad.transpose(theta.U_i), ad.transpose(theta.U_f),
                    ad.transpose(theta.U_o), ad.transpose(theta.U_g)])
    b = ad.concat([theta.b_i, theta.b_f, theta.b_o, theta.b_g])
    return WT, UT, b, theta.hidden_size


def _cell_core(x, h_prev, c_prev, cache):
    """Batched cell on [B x D]/[B x H] inputs with pre-stacked weights."""
    WT, UT, b, H = cache
    z = ad.add_bias(ad.add(ad.matmul(x, WT), ad.matmul(h_prev, UT)), b)
    gates = ad.sigmoid(ad.slice_cols(z, 0, 3 * H))
    i = ad.slice_cols(gates, 0, H)
    f = ad.slice_cols(gates, H, 2 * H)
    o = ad.slice_cols(gates, 2 * H, 3 * H)
    g = ad.tanh(ad.slice_cols(z, 3 * H, 4 * H))
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              theta: LstmParams) -> tuple[Tensor, Tensor]:
    """One step of a standard LSTM cell.

    i, f, o = sigmoid(W x + U h + b); g = tanh(W x + U h + b);
    c_t = f * c_prev + i * g; h_t = o * tanh(c_t).
    Accepts [D]/[H] vectors or [B x D]/[B x H] batches.
    """
    H, D = theta.hidden_size, theta.input_size
    squeeze = x_t.ndim == 1
    if squeeze:
        if x_t.shape != (D,) or h_prev.shape != (H,) or c_prev.shape != (H,):
            raise DimensionError(
                f"lstm_cell: got x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
                f"for D={D}, H={H}")
        x_t = ad.reshape(x_t, (1, D))
        h_prev = ad.reshape(h_prev, (1, H))
        c_prev = ad.reshape(c_prev, (1, H))
    B = x_t.shape[0]
    if x_t.shape != (B, D) or h_prev.shape != (B, H) or c_prev.shape != (B, H):
        raise DimensionError(
            f"lstm_cell: got x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"for D={D}, H={H}")
    h_t, c_t = _cell_core(x_t, h_prev, c_prev, _fused_cache(theta))
    if squeeze:
        return ad.reshape(h_t, (H,)), ad.reshape(c_t, (H,))
    return h_t, c_t


def directional_sweep(grid: Tensor, direction: str, theta: LstmParams) -> Tensor:
    """Run one LSTM over the grid in the given direction; return the final
    hidden state.

    left reads the 64 columns in order 0..63, right reads 63..0 (each step
    a 32-vector); up reads the 32 rows 31..0, down reads 0..31 (each step
    a 64-vector). States start at zero.
    """
    if direction not in DIRECTIONS:
        raise UsageError(f"directional_sweep: unknown direction {direction!r}")
    want_d = GRID_ROWS if direction in ("left", "right") else GRID_COLS
    if theta.input_size != want_d:
        raise ConfigError(
            f"directional_sweep: {direction} sweep needs input size {want_d}, "
            f"got {theta.input_size}")
    squeeze = grid.ndim == 2
    if squeeze:
        if grid.shape != (GRID_ROWS, GRID_COLS):
            raise DimensionError(f"directional_sweep: grid shape {grid.shape}")
        grid = ad.reshape(grid, (1, GRID_ROWS, GRID_COLS))
    elif grid.shape[1:] != (GRID_ROWS, GRID_COLS):
        raise DimensionError(f"directional_sweep: grid shape {grid.shape}")

    if direction == "left":
        steps = [ad.grid_col(grid, j) for j in range(GRID_COLS)]
    elif direction == "right":
        steps = [ad.grid_col(grid, j) for j in reversed(range(GRID_COLS))]
    elif direction == "up":
        steps = [ad.grid_row(grid, i) for i in reversed(range(GRID_ROWS))]
    else:
        steps = [ad.grid_row(grid, i) for i in range(GRID_ROWS)]

    B, H = grid.shape[0], theta.hidden_size
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    cache = _fused_cache(theta)
    for x_t in steps:
        h, c = _cell_core(x_t, h, c, cache)
    return ad.reshape(h, (H,)) if squeeze else h


def lstm_head(feat: Tensor, theta: HeadParams, mode: str = "eval",
              dropout_rng=None, dropout_rate: float = 0.5) -> ForwardOutput:
    """Full regression forward pass.

    Features are embedded to 2048, dropped out in training, folded into
    the 32x64 grid, swept by four directional LSTMs, and the concatenated
    final hidden states feed the two pose FCs.
    """
    if feat.ndim == 1 and feat.shape != (theta.feature_size,):
        raise DimensionError(
            f"lstm_head: feature length {feat.shape} != {theta.feature_size}")
    if feat.ndim == 2 and feat.shape[1] != theta.feature_size:
        raise DimensionError(
            f"lstm_head: feature batch {feat.shape} != [B x {theta.feature_size}]")
    squeeze = feat.ndim == 1
    if squeeze:
        feat = ad.reshape(feat, (1, feat.shape[0]))
    embedded = fc_forward(feat, theta.W_embed, theta.b_embed)
    embedded = dropout(embedded, dropout_rate, dropout_rng, mode)
    grid = ad.grid_fold(embedded)
    parts = [directional_sweep(grid, d, getattr(theta, d)) for d in DIRECTIONS]
    hidden = ad.concat(parts)
    p_hat = fc_forward(hidden, theta.W_pos, theta.b_pos)
    q_raw = fc_forward(hidden, theta.W_quat, theta.b_quat)
    if squeeze:
        p_hat = ad.reshape(p_hat, (3,))
        q_raw = ad.reshape(q_raw, (4,))
    return ForwardOutput(p_hat=p_hat, q_raw=q_raw)


def fc_baseline_head(feat: Tensor, theta: FcHeadParams, mode: str = "eval",
                     dropout_rng=None, dropout_rate: float = 0.5) -> ForwardOutput:
    """Baseline: embed, drop out, regress pose off the 2048-entry
    embedding, optionally through the linear bottleneck."""
    if feat.ndim == 1 and feat.shape != (theta.feature_size,):
        raise DimensionError(
            f"fc_baseline_head: feature length {feat.shape} != {theta.feature_size}")
    if feat.ndim == 2 and feat.shape[1] != theta.feature_size:
        raise DimensionError(
            f"fc_baseline_head: feature batch {feat.shape} != [B x {theta.feature_size}]")
    squeeze = feat.ndim == 1
    if squeeze:
        feat = ad.reshape(feat, (1, feat.shape[0]))
    embedded = fc_forward(feat, theta.W_embed, theta.b_embed)
    embedded = dropout(embedded, dropout_rate, dropout_rng, mode)
    if theta.W_proj is not None:
        embedded = fc_forward(embedded, theta.W_proj, theta.b_proj)
    p_hat = fc_forward(embedded, theta.W_pos, theta.b_pos)
    q_raw = fc_forward(embedded, theta.W_quat, theta.b_quat)
    if squeeze:
        p_hat = ad.reshape(p_hat, (3,))
        q_raw = ad.reshape(q_raw, (4,))
    return ForwardOutput(p_hat=p_hat, q_raw=q_raw)


def forward_head(model, feat: Tensor, mode: str = "eval", dropout_rng=None,
                 dropout_rate: float = 0.0) -> ForwardOutput:
    """Run whichever head the parameter object belongs to."""
    if isinstance(model, HeadParams):
        return lstm_head(feat, model, mode=mode, dropout_rng=dropout_rng,
                         dropout_rate=dropout_rate)
    if isinstance(model, FcHeadParams):
        return fc_baseline_head(feat, model, mode=mode, dropout_rng=dropout_rng,
                                dropout_rate=dropout_rate)
    raise UsageError(f"forward_head: unsupported model type {type(model).__name__}")
