"""Teacher-side distillation: frame-similarity distributions from frozen
teacher features, KL consistency, and the inheritance-branch loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import BatchError, DegenerateInputError, ParameterError
from .supervision import DecaySchedule, SoftTargets, decay_value, soft_infonce, triplet_loss
from .tensor import Tensor


@dataclass(frozen=True)
class TeacherRecord:
    video_feats: np.ndarray  # (k, d), one row per frame
    query_feat: np.ndarray  # (d,)
    teacher_id: str = "teacher"


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        idx = np.argwhere(norms[..., 0] == 0)[0]
        raise DegenerateInputError(f"zero-norm teacher {what} at index {tuple(int(i) for i in idx)}")
    return x / norms


def teacher_distribution(rec: TeacherRecord) -> np.ndarray:
    """Per-frame cosine between teacher frame features and the teacher query."""
    frames = _unit_rows(np.asarray(rec.video_feats, dtype=np.float64), "frame")
    query = _unit_rows(np.asarray(rec.query_feat, dtype=np.float64)[None, :], "query")[0]
    return frames @ query


def teacher_frame_similarities(video_feats: np.ndarray, query_feats: np.ndarray) -> np.ndarray:
    """``(B, k, d)`` frames against ``(M, d)`` queries -> cosines ``(B, k, M)``."""
    return _unit_rows(video_feats, "frame") @ _unit_rows(query_feats, "query").T


def fuse_teachers(dists: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise sum of several teachers' distributions."""
    if not dists:
        raise BatchError("fuse_teachers needs at least one distribution")
    arrays = [np.asarray(d, dtype=np.float64) for d in dists]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise BatchError(f"teacher distributions differ in shape: {shape} vs {a.shape}")
    out = arrays[0].copy()
    for a in arrays[1:]:
        out = out + a
    return out


def kl_consistency(c_student, c_teacher, tau_kl: float = 1.0) -> Tensor:
    """KL(softmax(Cs / tau) || softmax(Ct / tau)) along the last axis.

    Works on a single ``(k,)`` pair (scalar result) or a ``(B, k)`` batch
    (``(B,)`` result).  The teacher side is a constant.
    """
    if not tau_kl > 0:
        raise ParameterError(f"tau_kl must be > 0, got {tau_kl}")
    c_student = T.as_tensor(c_student)
    c_teacher = np.asarray(T.as_tensor(c_teacher).data, dtype=np.float64)
    if c_student.shape != c_teacher.shape or c_student.shape[-1] < 1:
        raise BatchError(f"KL inputs differ in shape: {c_student.shape} vs {c_teacher.shape}")
    log_ps = T.log_softmax(c_student, axis=-1, temperature=tau_kl)
    log_pt = T.log_softmax(Tensor(c_teacher), axis=-1, temperature=tau_kl).data
    ps = T.exp(log_ps)
    return (ps * (log_ps - log_pt)).sum(axis=-1)


def dynamic_weight(schedule: DecaySchedule, w0: float, t: int) -> float:
    if w0 < 0:
        raise ParameterError(f"w0 must be >= 0, got {w0}")
    return w0 * decay_value(schedule, t)


def inheritance_loss(S: Tensor, targets: SoftTargets, c_student, c_teacher, w: float,
                     margin: float = 0.2, temperature: float = 0.07,
                     tau_kl: float = 1.0) -> tuple[Tensor, dict[str, float]]:
    """w * mean KL over positive pairs + soft InfoNCE + triplet.

    Returns the loss tensor and its components as floats.
    """
    kl = kl_consistency(c_student, c_teacher, tau_kl)
    l_c = kl.mean() if kl.ndim else kl
    l_nce = soft_infonce(S, targets, temperature)
    l_trip = triplet_loss(S, margin)
    total = l_c * w + l_nce + l_trip
    parts = {"L_c": float(l_c), "L_nce": float(l_nce), "L_trip": float(l_trip)}
    return total, parts
