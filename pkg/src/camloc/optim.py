"""Adam optimizer and the training-step contract.

Updates are functional: adam_step returns fresh parameter and state
objects and never mutates its inputs, so a training run is a fold over
(params, state) and is reproducible bit for bit from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .autodiff import GradTape, ModelParams, Tensor
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .layers import forward_head
from .pose import Pose, batch_pose_loss, total_objective


@dataclass(frozen=True)
class OptimConfig:
    """Training hyperparameters.

    Defaults other than the learning rate are the published setup: Adam
    with beta1 0.9, beta2 0.999, eps 1.0 added outside the square root,
    batches of 75, weight decay 2^-4, auxiliary weight 0.3, dropout 0.5.
    The learning rate has no published value; 1e-4 is this package's
    default and config files must set it explicitly.
    """

    beta_loss: float
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.0
    lam: float = 2.0 ** -4
    batch_size: int = 75
    gamma: float = 0.3
    dropout: float = 0.5

    def __post_init__(self):
        checks = [
            (self.beta_loss > 0, f"beta_loss must be > 0, got {self.beta_loss}"),
            (self.lr > 0, f"lr must be > 0, got {self.lr}"),
            (0 <= self.beta1 < 1, f"beta1 must be in [0, 1), got {self.beta1}"),
            (0 <= self.beta2 < 1, f"beta2 must be in [0, 1), got {self.beta2}"),
            (self.eps > 0, f"eps must be > 0, got {self.eps}"),
            (self.lam >= 0, f"lam must be >= 0, got {self.lam}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.gamma >= 0, f"gamma must be >= 0, got {self.gamma}"),
            (0 <= self.dropout < 1, f"dropout must be in [0, 1), got {self.dropout}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"OptimConfig: {msg}")


@dataclass(frozen=True)
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: Mapping[str, np.ndarray]
    v: Mapping[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        m = {name: np.zeros(t.shape) for name, t in params.items()}
        v = {name: np.zeros(t.shape) for name, t in params.items()}
        return cls(m=m, v=v, t=0)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: OptimConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update across all named parameters.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with eps outside
    the square root. Gradients must cover every parameter; the weight
    decay contribution is expected to already be inside them (the
    objective carries the L2 term).
    """
    names = list(params.names())
    missing = [n for n in names if n not in grads]
    if missing:
        raise UsageError(f"adam_step: missing gradients for {missing}")
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_values: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in names:
        theta = params[name].data
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DimensionError(
                f"adam_step: gradient for {name} has shape {g.shape}, want {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for {name}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_values[name] = Tensor(theta - update)
        new_m[name] = m
        new_v[name] = v
    return params.replace(new_values), AdamState(m=new_m, v=new_v, t=t)


def shuffle_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch's schedule: a uniform permutation of range(n) chunked
    into batches. The last batch may be short."""
    if n < 1:
        raise UsageError(f"shuffle_batches: need at least one sample, got {n}")
    if batch_size < 1:
        raise UsageError(f"shuffle_batches: batch_size must be >= 1, got {batch_size}")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _stack_batch(batch: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise UsageError("train_step: empty batch")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f, _ in batch])
    p_true = np.stack([pose.p for _, pose in batch])
    q_true = np.stack([pose.q for _, pose in batch])
    return feats, p_true, q_true


def train_step(batch: Sequence[tuple[np.ndarray, Pose]], model, state: AdamState,
               cfg: OptimConfig, *, rng: np.random.Generator | None = None):
    """Forward in train mode, differentiate the objective, apply Adam.

    ``batch`` is a sequence of (feature vector, Pose) pairs. Returns the
    pre-update objective value and the updated (model, state). ``rng``
    drives dropout and is required when cfg.dropout > 0.
    """
    feats, p_true, q_true = _stack_batch(batch)
    params = model.as_model_params()
    with GradTape() as tape:
        out = forward_head(model, Tensor(feats), "train", rng, cfg.dropout)
        losses = batch_pose_loss(p_true, q_true, out.p_hat, out.q_raw, beta=cfg.beta_loss)
        aux = [batch_pose_loss(p_true, q_true, ap, aq, beta=cfg.beta_loss)
               for ap, aq in out.aux]
        objective = total_objective(losses, params, lam=cfg.lam, gamma=cfg.gamma,
                                    aux_losses=aux)
    grads = tape.gradients(objective, params)
    new_params, new_state = adam_step(params, grads, state, cfg)
    new_model = type(model).from_model_params(new_params)
    return float(objective.item()), new_model, new_state
