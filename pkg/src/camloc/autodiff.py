"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable values stored row-major; every op returns a fresh
Tensor. Gradient recording is implicit: while a :class:`GradTape` is
active on the current thread, each primitive appends one entry to it.
Replaying the entries in reverse execution order yields exact analytic
gradients of a scalar output with respect to any tensor that fed it.

Ops executed with no active tape are plain numpy computations, so the
same model code serves both traced training passes and untraced
evaluation or finite-difference probes.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, UsageError

GRID_ROWS = 32
GRID_COLS = 64
_GRID_SIZE = GRID_ROWS * GRID_COLS

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of 64-bit floats.

    ``data`` is a read-only, C-contiguous ``np.ndarray``; the flat buffer
    is the row-major enumeration of the elements.
    """

    __slots__ = ("data",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _wrap(arr: np.ndarray) -> Tensor:
    """Adopt a freshly computed array without copying."""
    t = Tensor.__new__(Tensor)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    t.data = arr
    return t


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class ScatterGrad:
    """Sparse gradient contribution: ``values`` to be added at ``index``
    of the input's gradient. Slicing ops return these from backward so
    accumulation touches only the selected cells instead of allocating a
    zero-filled array per slice."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


class GradTape:
    """Ordered record of executed primitive ops.

    Confined to one training step on one thread. Entering the context
    turns on recording for ops run on this thread; :meth:`gradients`
    replays the record backwards, visiting each entry exactly once.
    """

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self, "GradTape exited out of order"
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...],
                backward: Callable[[np.ndarray], tuple]) -> None:
        self._entries.append((out, inputs, backward))

    def gradients(self, output: Tensor, wrt):
        """Gradients of a scalar ``output`` with respect to ``wrt``.

        ``wrt`` may be a single Tensor, a sequence of Tensors, a
        ``name -> Tensor`` mapping, or a :class:`ModelParams`; the return
        value mirrors that structure, with plain float64 arrays as leaves.
        Tensors that did not feed ``output`` get zero gradients.
        """
        if output.shape != ():
            raise UsageError(f"gradients need a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
        # Accumulators we allocated ourselves and may mutate in place.
        # Arrays adopted straight from a backward call may alias forward
        # data or other gradients, so those are copied before the first
        # in-place update.
        owned: set[int] = {id(output)}
        get = grads.get
        mark_owned = owned.add
        scatter = ScatterGrad
        for out, inputs, backward in reversed(self._entries):
            g = get(id(out))
            if g is None:
                continue
            for inp, ig in zip(inputs, backward(g)):
                if ig is None:
                    continue
                key = id(inp)
                acc = get(key)
                if type(ig) is scatter:
                    if acc is None:
                        acc = np.zeros(inp.shape, dtype=np.float64)
                        grads[key] = acc
                        mark_owned(key)
                    elif key not in owned:
                        acc = acc.copy()
                        grads[key] = acc
                        mark_owned(key)
                    acc[ig.index] += ig.values
                elif acc is None:
                    grads[key] = ig
                elif key in owned:
                    acc += ig
                else:
                    grads[key] = acc + ig
                    mark_owned(key)

        def grad_of(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            return np.zeros(t.shape, dtype=np.float64) if g is None else np.asarray(g)

        if isinstance(wrt, Tensor):
            return grad_of(wrt)
        if isinstance(wrt, ModelParams):
            return {name: grad_of(t) for name, t in wrt.items()}
        if isinstance(wrt, Mapping):
            return {name: grad_of(t) for name, t in wrt.items()}
        return [grad_of(t) for t in wrt]


class ModelParams:
    """Ordered ``name -> Tensor`` parameter store with per-entry bias flags.

    The L2 penalty and the weight-only regularization rule key off
    ``is_bias``; everything else treats entries uniformly.
    """

    def __init__(self, tensors: Mapping[str, Tensor], bias_names: Iterable[str] = ()):
        self._tensors = dict(tensors)
        self._bias = frozenset(bias_names)
        unknown = self._bias - self._tensors.keys()
        if unknown:
            raise UsageError(f"bias flags for unknown parameters: {sorted(unknown)}")

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_bias(self, name: str) -> bool:
        return name in self._bias

    def bias_names(self) -> frozenset[str]:
        return self._bias

    def weights(self):
        """(name, tensor) pairs for non-bias parameters only."""
        return ((n, t) for n, t in self._tensors.items() if n not in self._bias)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def replace(self, updates: Mapping[str, Tensor]) -> "ModelParams":
        unknown = updates.keys() - self._tensors.keys()
        if unknown:
            raise UsageError(f"unknown parameters: {sorted(unknown)}")
        merged = dict(self._tensors)
        for name, t in updates.items():
            if t.shape != self._tensors[name].shape:
                raise DimensionError(
                    f"parameter {name!r}: replacement shape {t.shape} != {self._tensors[name].shape}")
            merged[name] = t
        return ModelParams(merged, self._bias)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of a [m x k] and b [k x n].

    Backward: dA = dC @ B.T, dB = A.T @ dC.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _wrap(a.data @ b.data)
    tape = _active_tape()
    if tape is not None:
        A, B = a.data, b.data
        tape._record(out, (a, b), lambda g: (g @ B.T, A.T @ g))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("add", a, b)
    out = _wrap(a.data + b.data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a, b), lambda g: (g, g))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("sub", a, b)
    out = _wrap(a.data - b.data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape("mul", a, b)
    out = _wrap(a.data * b.data)
    tape = _active_tape()
    if tape is not None:
        A, B = a.data, b.data
        tape._record(out, (a, b), lambda g: (g * B, g * A))
    return out


def scale(a, s: float) -> Tensor:
    """Multiply every element by the python scalar ``s``."""
    a = as_tensor(a)
    s = float(s)
    out = _wrap(a.data * s)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * s,))
    return out


def add_bias(x, b) -> Tensor:
    """Add a rank-1 bias to a vector, or to every row of a matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1:
        raise DimensionError(f"add_bias: bias must be rank-1, got {b.shape}")
    if x.ndim == 1:
        _require_same_shape("add_bias", x, b)
        out = _wrap(x.data + b.data)
        row_reduce = False
    elif x.ndim == 2 and x.shape[1] == b.shape[0]:
        out = _wrap(x.data + b.data)
        row_reduce = True
    else:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} incompatible")
    tape = _active_tape()
    if tape is not None:
        if row_reduce:
            tape._record(out, (x, b), lambda g: (g, g.sum(axis=0)))
        else:
            tape._record(out, (x, b), lambda g: (g, g))
    return out


def sigmoid(a) -> Tensor:
    """Logistic function; derivative s * (1 - s). expit is overflow-free
    for any input magnitude."""
    a = as_tensor(a)
    out = _wrap(expit(a.data))
    tape = _active_tape()
    if tape is not None:
        sv = out.data
        tape._record(out, (a,), lambda g: (g * sv * (1.0 - sv),))
    return out


def tanh(a) -> Tensor:
    """Hyperbolic tangent; derivative 1 - t^2."""
    a = as_tensor(a)
    out = _wrap(np.tanh(a.data))
    tape = _active_tape()
    if tape is not None:
        tv = out.data
        tape._record(out, (a,), lambda g: (g * (1.0 - tv * tv),))
    return out


def sqrt(a) -> Tensor:
    """Elementwise square root on the nonnegative domain.

    The derivative 1/(2 sqrt x) diverges at exactly 0; callers that
    differentiate must stay away from that point.
    """
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt: negative input")
    out = _wrap(np.sqrt(a.data))
    tape = _active_tape()
    if tape is not None:
        rv = out.data
        tape._record(out, (a,), lambda g: (g / (2.0 * rv),))
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = _wrap(a.data.reshape(shape))
    tape = _active_tape()
    if tape is not None:
        orig = a.shape
        tape._record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected rank-2, got {a.shape}")
    out = _wrap(np.ascontiguousarray(a.data.T))
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (a,), lambda g: (g.T,))
    return out


def concat(parts: Sequence) -> Tensor:
    """Concatenate rank-1 parts end to end, or rank-2 parts column-wise.

    Parts appear in argument order; the backward pass slices the upstream
    gradient back onto each part.
    """
    if len(parts) == 0:
        raise UsageError("concat: empty part list")
    parts = [as_tensor(p) for p in parts]
    ndim = parts[0].ndim
    if ndim not in (1, 2) or any(p.ndim != ndim for p in parts):
        raise DimensionError(
            f"concat: parts must all be rank-1 or all rank-2, got {[p.shape for p in parts]}")
    axis = 0 if ndim == 1 else 1
    if ndim == 2 and any(p.shape[0] != parts[0].shape[0] for p in parts):
        raise DimensionError(
            f"concat: rank-2 parts must share row count, got {[p.shape for p in parts]}")
    out = _wrap(np.concatenate([p.data for p in parts], axis=axis))
    tape = _active_tape()
    if tape is not None:
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            if axis == 0:
                return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))
            return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

        tape._record(out, tuple(parts), backward)
    return out


def grid_fold(v) -> Tensor:
    """Reshape a length-2048 vector (or a batch of them) to 32 x 64.

    Row-major: element i lands in cell (i // 64, i % 64).
    """
    v = as_tensor(v)
    if v.ndim == 1:
        if v.shape[0] != _GRID_SIZE:
            raise DimensionError(f"grid_fold: need length {_GRID_SIZE}, got {v.shape}")
        return reshape(v, (GRID_ROWS, GRID_COLS))
    if v.ndim == 2 and v.shape[1] == _GRID_SIZE:
        return reshape(v, (v.shape[0], GRID_ROWS, GRID_COLS))
    raise DimensionError(f"grid_fold: need length {_GRID_SIZE}, got {v.shape}")


def grid_unfold(g) -> Tensor:
    """Inverse of :func:`grid_fold`; exact round-trip."""
    g = as_tensor(g)
    if g.ndim == 2 and g.shape == (GRID_ROWS, GRID_COLS):
        return reshape(g, (_GRID_SIZE,))
    if g.ndim == 3 and g.shape[1:] == (GRID_ROWS, GRID_COLS):
        return reshape(g, (g.shape[0], _GRID_SIZE))
    raise DimensionError(f"grid_unfold: need a {GRID_ROWS}x{GRID_COLS} grid, got {g.shape}")


def grid_row(g, i: int) -> Tensor:
    """Row ``i`` of a grid [R x C] -> [C], or of a batch [B x R x C] -> [B x C]."""
    g = as_tensor(g)
    if g.ndim == 2:
        out = _wrap(g.data[i].copy())
    elif g.ndim == 3:
        out = _wrap(np.ascontiguousarray(g.data[:, i, :]))
    else:
        raise DimensionError(f"grid_row: expected rank-2 or 3, got {g.shape}")
    tape = _active_tape()
    if tape is not None:
        index = i if g.ndim == 2 else (slice(None), i, slice(None))
        tape._record(out, (g,), lambda grad: (ScatterGrad(index, grad),))
    return out


def grid_col(g, j: int) -> Tensor:
    """Column ``j`` of a grid [R x C] -> [R], or of a batch [B x R x C] -> [B x R]."""
    g = as_tensor(g)
    if g.ndim == 2:
        out = _wrap(np.ascontiguousarray(g.data[:, j]))
    elif g.ndim == 3:
        out = _wrap(np.ascontiguousarray(g.data[:, :, j]))
    else:
        raise DimensionError(f"grid_col: expected rank-2 or 3, got {g.shape}")
    tape = _active_tape()
    if tape is not None:
        index = (slice(None), j) if g.ndim == 2 else (slice(None), slice(None), j)
        tape._record(out, (g,), lambda grad: (ScatterGrad(index, grad),))
    return out


def slice_cols(x, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a rank-2 tensor, as a contiguous copy."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"slice_cols: expected rank-2, got {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise UsageError(f"slice_cols: bad range [{start}, {stop}) for {x.shape[1]} columns")
    out = _wrap(np.ascontiguousarray(x.data[:, start:stop]))
    tape = _active_tape()
    if tape is not None:
        index = (slice(None), slice(start, stop))
        tape._record(out, (x,), lambda grad: (ScatterGrad(index, grad),))
    return out


def conv2d(x, k, b=None, stride: int = 1) -> Tensor:
    """Valid 2-D cross-correlation in NHWC layout.

    ``x`` is [B x H x W x Cin] (or [H x W x Cin] for a single image),
    ``k`` is [kh x kw x Cin x Cout], optional bias [Cout], integer
    stride. Output spatial size is floor((H - kh) / stride) + 1.
    """
    x, k = as_tensor(x), as_tensor(k)
    b = None if b is None else as_tensor(b)
    squeeze = x.ndim == 3
    xv = x.data[None] if squeeze else x.data
    if xv.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: need image {x.shape} rank 3/4 and kernel {k.shape} rank 4")
    kh, kw, cin, cout = k.shape
    B, H, W, c = xv.shape
    if c != cin:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if not (isinstance(stride, int) and stride >= 1):
        raise UsageError(f"conv2d: stride must be a positive int, got {stride!r}")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {k.shape[:2]} larger than image {(H, W)}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")

    windows = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [B, Ho, Wo, Cin, kh, kw]
    out_arr = np.tensordot(windows, k.data, axes=([3, 4, 5], [2, 0, 1]))
    if b is not None:
        out_arr = out_arr + b.data
    out = _wrap(out_arr[0] if squeeze else out_arr)
    tape = _active_tape()
    if tape is not None:
        ho, wo = out_arr.shape[1], out_arr.shape[2]
        K = k.data

        def backward(g):
            gv = g[None] if squeeze else g
            dk = np.tensordot(windows, gv, axes=([0, 1, 2], [0, 1, 2]))
            dk = np.ascontiguousarray(dk.transpose(1, 2, 0, 3))
            dx = np.zeros((B, H, W, cin))
            for i in range(kh):
                for j in range(kw):
                    patch = np.tensordot(gv, K[i, j], axes=([3], [1]))
                    dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += patch
            db = None if b is None else gv.sum(axis=(0, 1, 2))
            return (dx[0] if squeeze else dx, dk) + (() if b is None else (db,))

        inputs = (x, k) if b is None else (x, k, b)
        tape._record(out, inputs, backward)
    return out


def spatial_mean(a) -> Tensor:
    """Mean over the two spatial axes: [B x H x W x C] -> [B x C] (or a
    single [H x W x C] image -> [C])."""
    a = as_tensor(a)
    if a.ndim == 3:
        axes, denom = (0, 1), a.shape[0] * a.shape[1]
    elif a.ndim == 4:
        axes, denom = (1, 2), a.shape[1] * a.shape[2]
    else:
        raise DimensionError(f"spatial_mean: expected rank-3 or 4, got {a.shape}")
    out = _wrap(a.data.mean(axis=axes))
    tape = _active_tape()
    if tape is not None:
        shape, nd = a.shape, a.ndim

        def backward(g):
            if nd == 3:
                return (np.broadcast_to(g / denom, shape).copy(),)
            return (np.broadcast_to(g[:, None, None, :] / denom, shape).copy(),)

        tape._record(out, (a,), backward)
    return out


def sum_last(a) -> Tensor:
    """Sum over the last axis: [B x D] -> [B], [D] -> scalar."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("sum_last: scalar input")
    out = _wrap(a.data.sum(axis=-1))
    tape = _active_tape()
    if tape is not None:
        last = a.shape[-1]
        tape._record(out, (a,), lambda g: (np.repeat(np.expand_dims(g, -1), last, axis=-1),))
    return out


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = _wrap(np.asarray(a.data.sum()))
    tape = _active_tape()
    if tape is not None:
        shape = a.shape
        tape._record(out, (a,), lambda g: (np.full(shape, g, dtype=np.float64),))
    return out


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise UsageError("mean_all: empty input")
    out = _wrap(np.asarray(a.data.mean()))
    tape = _active_tape()
    if tape is not None:
        shape, n = a.shape, a.size
        tape._record(out, (a,), lambda g: (np.full(shape, g / n, dtype=np.float64),))
    return out


def div_rows(x, s) -> Tensor:
    """Divide each row of x [B x D] by s [B], or a vector [D] by a scalar."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim == 2 and s.shape == (x.shape[0],):
        denom = s.data[:, None]
    elif x.ndim == 1 and s.shape == ():
        denom = s.data
    else:
        raise DimensionError(f"div_rows: shapes {x.shape} and {s.shape} incompatible")
    if np.any(np.abs(s.data) < 1e-300):
        raise NumericError("div_rows: divisor underflows")
    out = _wrap(x.data / denom)
    tape = _active_tape()
    if tape is not None:
        X, S = x.data, s.data

        def backward(g):
            if X.ndim == 2:
                dx = g / S[:, None]
                ds = -(g * X).sum(axis=1) / (S * S)
            else:
                dx = g / S
                ds = np.asarray(-(g * X).sum() / (S * S))
            return dx, ds

        tape._record(out, (x, s), backward)
    return out


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name: sigmoid, tanh, add, mul, scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"elementwise: unknown op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Gradient validation
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[ModelParams], Tensor], params: ModelParams,
                      eps: float = 1e-5, num_coords: int = 200,
                      rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic map from parameters to a scalar Tensor,
    built from the primitives in this module. A random subsample of at
    least ``num_coords`` parameter coordinates is probed (all of them if
    the model is smaller); returns the max relative error, defined as
    |a - n| / max(1, |a|, |n|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise UsageError(f"finite_diff_check: eps {eps} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)

    with GradTape() as tape:
        base = f(params)
    if base.shape != ():
        raise UsageError("finite_diff_check: f must return a scalar")
    if not np.isfinite(base.item()):
        raise NumericError("finite_diff_check: f is not finite at the base point")
    analytic = tape.gradients(base, params)

    coords: list[tuple[str, int]] = []
    for name, t in params.items():
        coords.extend((name, k) for k in range(t.size))
    if len(coords) > num_coords:
        picked = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[k] for k in picked]

    max_rel = 0.0
    for name, k in coords:
        flat = params[name].data.ravel()

        def perturbed(delta: float) -> ModelParams:
            bumped = flat.copy()
            bumped[k] += delta
            return params.replace({name: _wrap(bumped.reshape(params[name].shape))})

        f_plus = f(perturbed(+eps)).item()
        f_minus = f(perturbed(-eps)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("finite_diff_check: f is not finite at a probe point")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].ravel()[k])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        max_rel = max(max_rel, rel)
    return max_rel
