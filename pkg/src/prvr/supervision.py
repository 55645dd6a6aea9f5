"""Decay schedules, dynamic soft targets and the ranking losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import BatchError, ParameterError
from .tensor import Tensor

SCHEDULE_KINDS = ("exponential", "linear", "sigmoid", "fixed")
TIME_UNITS = ("epoch", "step")
_FLOOR = 1e-300  # keeps g(t) strictly positive


@dataclass(frozen=True)
class DecaySchedule:
    """g(t) for one decaying weight.

    exponential: k**t (0 < k < 1); linear: k*t + b (k < 0, 0 < b <= 1,
    clamped just above 0); sigmoid: k / (k + exp(t / k)) (k > 0); fixed: 1.
    """

    kind: str = "exponential"
    factor: float = 0.95
    intercept: float = 1.0
    time_unit: str = "epoch"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.time_unit not in TIME_UNITS:
            raise ParameterError(f"time_unit must be one of {TIME_UNITS}, got {self.time_unit!r}")
        k = self.factor
        if self.kind == "exponential" and not 0.0 < k < 1.0:
            raise ParameterError(f"exponential decay needs 0 < k < 1, got {k}")
        if self.kind == "linear":
            if not k < 0.0:
                raise ParameterError(f"linear decay needs k < 0, got {k}")
            if not 0.0 < self.intercept <= 1.0:
                raise ParameterError(f"linear decay needs 0 < b <= 1, got {self.intercept}")
        if self.kind == "sigmoid" and not k > 0.0:
            raise ParameterError(f"sigmoid decay needs k > 0, got {k}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecaySchedule":
        unknown = set(d) - {"kind", "factor", "intercept", "time_unit"}
        if unknown:
            raise ParameterError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


def decay_value(schedule: DecaySchedule, t: int | float) -> float:
    if t < 0:
        raise ParameterError(f"t must be >= 0, got {t}")
    k = schedule.factor
    if schedule.kind == "fixed":
        return 1.0
    if schedule.kind == "exponential":
        g = k ** t
    elif schedule.kind == "linear":
        g = k * t + schedule.intercept
    else:
        g = 0.0 if t / k > 700 else k / (k + math.exp(t / k))
    return float(min(1.0, max(g, _FLOOR)))


@dataclass
class ScheduleState:
    """Current w, alpha, beta from their initial values and schedules."""

    w0: float = 0.1
    alpha0: float = 0.8
    beta0: float = 0.8
    w_schedule: DecaySchedule = DecaySchedule("exponential", 0.95)
    alpha_schedule: DecaySchedule = DecaySchedule("sigmoid", 800.0)
    beta_schedule: DecaySchedule = DecaySchedule("sigmoid", 800.0)

    @staticmethod
    def _time(schedule: DecaySchedule, epoch: int, step: int) -> int:
        return step if schedule.time_unit == "step" else epoch

    def w(self, epoch: int, step: int = 0) -> float:
        return self.w0 * decay_value(self.w_schedule, self._time(self.w_schedule, epoch, step))

    def alpha(self, epoch: int, step: int = 0) -> float:
        a = self.alpha0 * decay_value(self.alpha_schedule, self._time(self.alpha_schedule, epoch, step))
        return min(1.0, max(0.0, a))

    def beta(self, epoch: int, step: int = 0) -> float:
        b = self.beta0 * decay_value(self.beta_schedule, self._time(self.beta_schedule, epoch, step))
        return min(1.0, max(0.0, b))


@dataclass
class SoftTargets:
    t2v: np.ndarray  # rows indexed by query
    v2t: np.ndarray  # rows indexed by video
    hard_row_count: int


def _mix(identity: np.ndarray, guide: np.ndarray, n_hard: int, beta: float,
         row_normalize: bool) -> np.ndarray:
    out = identity.astype(np.float64).copy()
    if n_hard >= out.shape[0]:
        return out
    soft = beta * identity[n_hard:] + (1.0 - beta) * np.clip(guide[n_hard:], 0.0, 1.0)
    if row_normalize:
        sums = soft.sum(axis=1, keepdims=True)
        soft = np.divide(soft, sums, out=np.zeros_like(soft), where=sums > 0)
    out[n_hard:] = soft
    return out


def build_soft_targets(identity: np.ndarray | None, guide, alpha: float, beta: float,
                       row_normalize: bool = True) -> SoftTargets:
    """Mix hard identity rows with clamped guide similarities.

    ``guide`` is oriented text-to-video (row = query, column = video); the
    video-to-text targets use its transpose.  The first floor(alpha * N) rows
    stay hard; the rest are ``beta * I + (1 - beta) * clip(guide, 0, 1)``,
    optionally renormalised to sum to one.  Targets never carry gradients.
    """
    guide = np.array(T.as_tensor(guide).data, dtype=np.float64)
    if guide.ndim != 2 or guide.shape[0] != guide.shape[1]:
        raise BatchError(f"guide matrix must be N x N, got {guide.shape}")
    n = guide.shape[0]
    if identity is None:
        identity = np.eye(n)
    identity = np.asarray(identity, dtype=np.float64)
    if identity.shape != guide.shape:
        raise BatchError(f"identity {identity.shape} and guide {guide.shape} differ in shape")
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ParameterError(f"alpha and beta must lie in [0, 1], got {alpha}, {beta}")
    n_hard = min(n, int(math.floor(alpha * n)))
    return SoftTargets(
        t2v=_mix(identity, guide, n_hard, beta, row_normalize),
        v2t=_mix(identity, guide.T, n_hard, beta, row_normalize),
        hard_row_count=n_hard,
    )


def hard_targets(n: int) -> SoftTargets:
    eye = np.eye(n)
    return SoftTargets(eye, eye.copy(), n)


def soft_infonce(S: Tensor, targets: SoftTargets, temperature: float = 0.07) -> Tensor:
    """Cross-entropy of row-softmax(S / tau) (videos -> queries) against
    ``targets.v2t`` plus the transposed direction against ``targets.t2v``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    S = T.as_tensor(S)
    n = S.shape[0]
    if S.shape != (n, n) or targets.v2t.shape != (n, n) or targets.t2v.shape != (n, n):
        raise BatchError(f"similarity {S.shape} and targets must all be N x N")
    log_p = T.log_softmax(S, axis=1, temperature=temperature)
    log_p_t = T.log_softmax(S.T, axis=1, temperature=temperature)
    v2t = (log_p * targets.v2t).sum()
    t2v = (log_p_t * targets.t2v).sum()
    return (v2t + t2v) * (-1.0 / n)


def _off_diagonal(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(n), n - 1).reshape(n, n - 1)
    cols = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64)
    return rows, cols


def triplet_loss(S: Tensor, margin: float = 0.2) -> Tensor:
    """Hardest-negative triplet ranking loss over an N x N batch (rows videos,
    columns queries, positives on the diagonal)."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    S = T.as_tensor(S)
    n = S.shape[0]
    if S.ndim != 2 or S.shape[1] != n:
        raise BatchError(f"triplet_loss needs an N x N matrix, got {S.shape}")
    if n < 2:
        raise BatchError("triplet_loss needs N >= 2 (no in-batch negatives)")
    ar = np.arange(n)
    pos = S[ar, ar]
    rows, cols = _off_diagonal(n)
    neg_query, _ = T.max_reduce(S[rows, cols], axis=1)  # other queries for video i
    neg_video, _ = T.max_reduce(S.T[rows, cols], axis=1)  # other videos for query i
    loss = T.relu(neg_query - pos + margin) + T.relu(neg_video - pos + margin)
    return loss.sum() * (1.0 / n)


def exploration_loss(S: Tensor, targets: SoftTargets, margin: float = 0.2,
                     temperature: float = 0.07) -> Tensor:
    return soft_infonce(S, targets, temperature) + triplet_loss(S, margin)
