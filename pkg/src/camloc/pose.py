"""Pose representation, the weighted position/orientation loss, and the
median-error evaluation metrics.

The training loss for one sample is

    L = ||p - p_hat||_2 + beta * ||q - q_hat / ||q_hat|| ||_2

with the predicted quaternion normalized inside the loss, so the raw
network output never needs unit norm. Ground-truth quaternions are kept
unit-norm and sign-canonicalized (w >= 0) because q and -q encode the
same rotation; the evaluation metric uses |<q1, q2>| and is indifferent
to the sign either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .errors import DataError, NumericError, UsageError

_QUAT_NORM_FLOOR = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Scale a 4-vector to unit length; degenerate norms are an error."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise UsageError(f"quat_normalize: expected 4-vector, got shape {q.shape}")
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n <= _QUAT_NORM_FLOOR:
        raise NumericError(f"quat_normalize: degenerate norm {n}")
    if abs(n - 1.0) <= 1e-12:
        # Already unit to rounding; dividing would dirty the last bits
        # and break save/load fixpoints.
        return q.copy()
    return q / n


def quat_canonicalize(q: np.ndarray) -> np.ndarray:
    """Pick the representative of {q, -q} with w >= 0.

    Ties (w == 0) resolve on the first nonzero component. Idempotent.
    """
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c > 0.0:
            return q.copy()
        if c < 0.0:
            return -q
    return q.copy()


def angular_error_deg(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic rotation distance in degrees: 2 acos(min(1, |<q1,q2>|)).

    Symmetric, sign-insensitive, and in [0, 180]. Inputs must be unit
    quaternions to 1e-6. Evaluated through atan2 of the chord lengths,
    which is the same function but exact at 0 (acos of a dot product
    rounds q vs q to a few microdegrees) and well conditioned near 180.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    for q in (q1, q2):
        if q.shape != (4,):
            raise UsageError(f"angular_error_deg: expected 4-vector, got shape {q.shape}")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise UsageError(f"angular_error_deg: quaternion norm {np.linalg.norm(q)} not unit")
    if float(np.dot(q1, q2)) < 0.0:
        q2 = -q2
    half = math.atan2(float(np.linalg.norm(q1 - q2)), float(np.linalg.norm(q1 + q2)))
    return math.degrees(4.0 * half) if half <= math.pi / 4 else 180.0


@dataclass(frozen=True)
class Pose:
    """Camera position in meters plus a unit quaternion (w, x, y, z).

    Ground-truth poses must already be unit-norm and sign-canonical;
    use :meth:`create` to construct one from raw values.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if p.shape != (3,) or q.shape != (4,):
            raise DataError(f"Pose: bad shapes p{p.shape} q{q.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise DataError("Pose: non-finite component")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise DataError(f"Pose: quaternion norm {np.linalg.norm(q)} not unit")
        if not np.array_equal(quat_canonicalize(q), q):
            raise DataError("Pose: quaternion not sign-canonical (need w >= 0)")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def create(cls, p, q) -> "Pose":
        """Build a Pose from raw values, normalizing and canonicalizing q."""
        return cls(np.asarray(p, dtype=np.float64),
                   quat_canonicalize(quat_normalize(np.asarray(q, dtype=np.float64))))


@dataclass(frozen=True)
class ErrorPair:
    """Per-image localization error: position in meters, orientation in degrees."""

    pos_err: float
    ori_err: float

    def __post_init__(self):
        if not (math.isfinite(self.pos_err) and self.pos_err >= 0.0):
            raise DataError(f"ErrorPair: bad position error {self.pos_err}")
        if not (math.isfinite(self.ori_err) and 0.0 <= self.ori_err <= 180.0):
            raise DataError(f"ErrorPair: orientation error {self.ori_err} outside [0, 180]")


def median_errors(pairs: Sequence[ErrorPair]) -> tuple[float, float]:
    """Component-wise medians; an even count averages the two middle values."""
    if len(pairs) == 0:
        raise UsageError("median_errors: empty error list")
    pos = np.array([e.pos_err for e in pairs], dtype=np.float64)
    ori = np.array([e.ori_err for e in pairs], dtype=np.float64)
    return float(np.median(pos)), float(np.median(ori))


# ---------------------------------------------------------------------------
# Loss (differentiable through the tape)
# ---------------------------------------------------------------------------

def batch_pose_loss(p_true, q_true, p_hat: Tensor, q_raw: Tensor,
                    beta: float) -> Tensor:
    """Per-sample losses for a batch as a [B] tensor.

    ``p_true``/``q_true`` are constant [B x 3]/[B x 4] targets (arrays or
    Tensors); ``p_hat`` and ``q_raw`` may be traced. The predicted
    quaternion is normalized inside the loss, and the whole expression is
    differentiable through that normalization (away from zero-norm
    predictions, which raise).
    """
    if beta <= 0.0:
        raise UsageError(f"batch_pose_loss: beta must be positive, got {beta}")
    p_true = p_true.data if isinstance(p_true, Tensor) else np.asarray(p_true, dtype=np.float64)
    q_true = q_true.data if isinstance(q_true, Tensor) else np.asarray(q_true, dtype=np.float64)
    if p_hat.shape != p_true.shape or p_hat.shape[-1] != 3:
        raise UsageError(f"batch_pose_loss: position shapes {p_hat.shape} vs {p_true.shape}")
    if q_raw.shape != q_true.shape or q_raw.shape[-1] != 4:
        raise UsageError(f"batch_pose_loss: quaternion shapes {q_raw.shape} vs {q_true.shape}")

    raw_norms = np.linalg.norm(q_raw.data, axis=-1)
    if np.any(raw_norms <= _QUAT_NORM_FLOOR):
        raise NumericError("batch_pose_loss: predicted quaternion norm is degenerate")

    diff_p = ad.sub(p_hat, Tensor(p_true))
    pos_err = ad.sqrt(ad.sum_last(ad.mul(diff_p, diff_p)))

    q_norm = ad.sqrt(ad.sum_last(ad.mul(q_raw, q_raw)))
    q_hat = ad.div_rows(q_raw, q_norm)
    diff_q = ad.sub(q_hat, Tensor(q_true))
    ori_err = ad.sqrt(ad.sum_last(ad.mul(diff_q, diff_q)))

    return ad.add(pos_err, ad.scale(ori_err, beta))


def pose_loss(truth: Pose, pred, beta: float) -> Tensor:
    """Weighted loss for one sample; ``pred`` exposes p_hat and q_raw."""
    p_hat = ad.as_tensor(pred.p_hat if hasattr(pred, "p_hat") else pred[0])
    q_raw = ad.as_tensor(pred.q_raw if hasattr(pred, "q_raw") else pred[1])
    if p_hat.ndim == 1:
        losses = batch_pose_loss(truth.p[None, :], truth.q[None, :],
                                 ad.reshape(p_hat, (1, 3)), ad.reshape(q_raw, (1, 4)), beta)
    else:
        losses = batch_pose_loss(truth.p[None, :], truth.q[None, :], p_hat, q_raw, beta)
    return ad.reshape(losses, ())


def _as_loss_vector(losses) -> Tensor:
    if isinstance(losses, Tensor):
        return losses if losses.ndim == 1 else ad.reshape(losses, (losses.size,))
    parts = []
    for loss in losses:
        t = ad.as_tensor(loss)
        parts.append(ad.reshape(t, (t.size,)))
    return ad.concat(parts)


def total_objective(batch_losses, params: ModelParams, lam: float, gamma: float,
                    aux_losses=()) -> Tensor:
    """Training objective for one batch.

    mean(batch losses) + gamma * mean(auxiliary losses, when present)
    + lam * sum of squared weight entries. Biases are exempt from the
    L2 term, so the objective is independent of bias magnitudes there.
    """
    if lam < 0.0 or gamma < 0.0:
        raise UsageError(f"total_objective: lam {lam} and gamma {gamma} must be >= 0")
    obj = ad.mean_all(_as_loss_vector(batch_losses))
    aux_losses = tuple(aux_losses)
    if aux_losses:
        obj = ad.add(obj, ad.scale(ad.mean_all(_as_loss_vector(aux_losses)), gamma))
    if lam > 0.0:
        penalty = None
        for _, w in params.weights():
            term = ad.sum_all(ad.mul(w, w))
            penalty = term if penalty is None else ad.add(penalty, term)
        if penalty is not None:
            obj = ad.add(obj, ad.scale(penalty, lam))
    return obj
