"""Video-query similarity: per-frame cosine distributions, max-pooled partial
similarity, batch matrices, branch fusion and branch correlation."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import EncodedQuery, EncodedVideo
from .errors import BatchError, DegenerateInputError, ParameterError
from .tensor import Tensor


def _norms_or_raise(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1))
    bad = np.argwhere(np.atleast_1d(norms == 0))
    if bad.size:
        raise DegenerateInputError(f"zero-norm {what} at index {tuple(int(i) for i in bad[0])}")
    return norms


def cosine(a, b) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor (differentiable)."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    _norms_or_raise(a.data, "vector a")
    _norms_or_raise(b.data, "vector b")
    return (T.l2_normalize(a) * T.l2_normalize(b)).sum()


def frame_distribution(F, q) -> Tensor:
    """``F`` is ``(k, z)`` (one row per frame), ``q`` is ``(z,)``; returns the
    ``(k,)`` vector of per-frame cosines."""
    F, q = T.as_tensor(F), T.as_tensor(q)
    if F.ndim != 2 or F.shape[0] < 1:
        raise BatchError(f"frame matrix must be (k>=1, z), got {F.shape}")
    _norms_or_raise(F.data, "frame")
    _norms_or_raise(q.data, "query")
    z = q.shape[0]
    return (T.l2_normalize(F, axis=-1) @ T.l2_normalize(q).reshape(z, 1)).reshape(F.shape[0])


def partial_similarity(F, q) -> Tensor:
    value, _ = T.max_reduce(frame_distribution(F, q))
    return value


def batch_frame_similarities(frames: Tensor, queries: Tensor) -> Tensor:
    """``frames`` ``(B, k, z)``, ``queries`` ``(M, z)`` -> cosines ``(B, k, M)``."""
    _norms_or_raise(frames.data, "frame")
    _norms_or_raise(queries.data, "query")
    fn = T.l2_normalize(frames, axis=-1)
    qn = T.l2_normalize(queries, axis=-1)
    return fn @ qn.T


def batch_partial_similarity(frames: Tensor, queries: Tensor) -> tuple[Tensor, Tensor]:
    """Max-pooled similarity matrix ``(B, M)`` (rows videos, columns queries)
    together with the underlying ``(B, k, M)`` frame cosines."""
    sims = batch_frame_similarities(frames, queries)
    pooled, _ = T.max_reduce(sims, axis=1)
    return pooled, sims


def pairwise_matrix(videos: Sequence[EncodedVideo | Tensor],
                    queries: Sequence[EncodedQuery | Tensor]) -> Tensor:
    """``S[i, j] = partial_similarity(video i, query j)``; videos may differ in
    frame count."""
    if len(videos) != len(queries):
        raise BatchError(f"pairwise_matrix needs equal lengths, got {len(videos)} videos "
                         f"and {len(queries)} queries")
    if not videos:
        raise BatchError("pairwise_matrix of an empty batch")
    feats = [v.features if isinstance(v, EncodedVideo) else T.as_tensor(v) for v in videos]
    qvecs = [q.sentence_vec if isinstance(q, EncodedQuery) else T.as_tensor(q) for q in queries]
    qmat = T.stack(qvecs, axis=0)
    rows = []
    for f in feats:
        pooled, _ = batch_partial_similarity(f.reshape(1, *f.shape), qmat)
        rows.append(pooled)
    return T.concat(rows, axis=0)


def fuse(s_inh, s_exp, sigma: float):
    """(1 - sigma) * inheritance + sigma * exploration; accepts floats or arrays."""
    if not 0.0 <= sigma <= 1.0:
        raise ParameterError(f"sigma must lie in [0, 1], got {sigma}")
    if sigma == 0.0:
        return s_inh if np.isscalar(s_inh) else np.array(s_inh, dtype=np.float64)
    if sigma == 1.0:
        return s_exp if np.isscalar(s_exp) else np.array(s_exp, dtype=np.float64)
    return (1.0 - sigma) * np.asarray(s_inh, dtype=np.float64) + sigma * np.asarray(s_exp, dtype=np.float64)


def branch_correlation(a, b) -> float:
    """Sample Pearson correlation of two equal-length distributions."""
    a = np.asarray(T.as_tensor(a).data, dtype=np.float64)
    b = np.asarray(T.as_tensor(b).data, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise BatchError(f"branch_correlation needs equal-length vectors of size >= 2, "
                         f"got {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        raise DegenerateInputError("branch_correlation of a zero-variance distribution")
    r = float((da * db).sum() / (sa * sb))
    return min(1.0, max(-1.0, r))


def write_matrix_csv(path: str | Path, matrix, row_ids: Sequence[str], col_ids: Sequence[str],
                     corner: str = "video_id") -> None:
    """CSV with one header row of column ids; values at 9 significant digits."""
    m = np.asarray(T.as_tensor(matrix).data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([corner, *col_ids])
        for rid, row in zip(row_ids, m):
            writer.writerow([rid, *(f"{v:.9g}" for v in row)])
