"""Retrieval metrics and analyses: R@K / SumR, M/V-grouped recall,
positive/negative similarity margins and branch complementarity."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .encoders import encode_texts, encode_videos
from .errors import ContractError, DataError, DegenerateInputError, DimensionError
from .similarity import branch_correlation, fuse
from .tensor import Tensor

KS = (1, 5, 10, 100)


@dataclass
class RankedResult:
    query_id: str
    ranking: list[str]
    rank_of_ground_truth: int  # 1-based


@dataclass
class RecallReport:
    r1: float
    r5: float
    r10: float
    r100: float
    n_queries: int = 0

    @property
    def sumr(self) -> float:
        return self.r1 + self.r5 + self.r10 + self.r100

    def to_dict(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "R@100": self.r100,
                "SumR": self.sumr, "n_queries": self.n_queries}


@dataclass
class MvGroupReport:
    edges: list[float]  # bin i covers (edges[i], edges[i+1]]
    reports: list[RecallReport | None]
    counts: list[int]

    def to_dict(self) -> dict:
        return {"bins": [
            {"lo": lo, "hi": hi, "count": c, "recall": r.to_dict() if r else None}
            for lo, hi, c, r in zip(self.edges[:-1], self.edges[1:], self.counts, self.reports)]}


@dataclass
class MarginReport:
    positives: np.ndarray
    negatives: np.ndarray
    hist_edges: np.ndarray = field(default_factory=lambda: np.linspace(-1.0, 1.0, 51))

    @property
    def center_distance(self) -> float:
        return float(self.positives.mean() - self.negatives.mean())

    def histogram(self) -> list[tuple[float, float, int, int]]:
        pos, _ = np.histogram(np.clip(self.positives, -1, 1), bins=self.hist_edges)
        neg, _ = np.histogram(np.clip(self.negatives, -1, 1), bins=self.hist_edges)
        return [(float(a), float(b), int(p), int(n))
                for a, b, p, n in zip(self.hist_edges[:-1], self.hist_edges[1:], pos, neg)]

    def to_dict(self) -> dict:
        return {"n_positive": int(self.positives.size), "n_negative": int(self.negatives.size),
                "mean_positive": float(self.positives.mean()),
                "mean_negative": float(self.negatives.mean()),
                "center_distance": self.center_distance}


# -- scoring ------------------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm encoded feature during evaluation")
    return x / norms


def encode_branch(branch, ds: Dataset, query_ids: Sequence[str], video_ids: Sequence[str]):
    """Unit-normalised per-video frame features and ``(Q, z)`` query vectors."""
    dims = ds.manifest.dims
    if branch.video.input_dim != dims["video_dim"] or branch.text.input_dim != dims["text_dim"]:
        raise DimensionError(
            f"model expects video/text dims {branch.video.input_dim}/{branch.text.input_dim}, "
            f"dataset has {dims['video_dim']}/{dims['text_dim']}")
    frames = {}
    by_len: dict[int, list[str]] = {}
    for v in video_ids:
        by_len.setdefault(ds.videos[v].n_frames, []).append(v)
    for ids in by_len.values():
        out = encode_videos(Tensor(np.stack([ds.video_features(v) for v in ids])), branch.video).data
        for v, f in zip(ids, out):
            frames[v] = _unit(f)
    qvecs = np.zeros((len(query_ids), branch.text.hidden))
    by_tok: dict[int, list[int]] = {}
    for i, q in enumerate(query_ids):
        by_tok.setdefault(ds.query_features(q).shape[0], []).append(i)
    for idx in by_tok.values():
        q, _, _ = encode_texts(Tensor(np.stack([ds.query_features(query_ids[i]) for i in idx])),
                               branch.text)
        qvecs[idx] = q.data
    return [frames[v] for v in video_ids], _unit(qvecs)


def branch_scores(branch, ds: Dataset, query_ids: Sequence[str], video_ids: Sequence[str]) -> np.ndarray:
    """Partial similarity of every query to every video, ``(Q, V)``."""
    frames, qvecs = encode_branch(branch, ds, query_ids, video_ids)
    scores = np.empty((len(query_ids), len(video_ids)))
    for j, f in enumerate(frames):
        scores[:, j] = (f @ qvecs.T).max(axis=0)
    return scores


def fused_scores(model, ds: Dataset, sigma: float, query_ids, video_ids) -> np.ndarray:
    if sigma == 0.0:
        return branch_scores(model.inheritance, ds, query_ids, video_ids)
    if sigma == 1.0:
        return branch_scores(model.exploration, ds, query_ids, video_ids)
    s_i = branch_scores(model.inheritance, ds, query_ids, video_ids)
    s_e = branch_scores(model.exploration, ds, query_ids, video_ids)
    return fuse(s_i, s_e, sigma)


def eval_ids(ds: Dataset, split: str | None = "test",
             video_ids: Sequence[str] | None = None) -> tuple[list[str], list[str]]:
    """Candidate videos and their queries, both sorted by id.  Falls back to
    every video when the requested split is absent."""
    if video_ids is None:
        video_ids = ds.video_ids(split) if split and ds.has_split(split) else ds.video_ids()
    vids = sorted(video_ids)
    return ds.query_ids_for(vids), vids


# -- ranking & recall -----------------------------------------------------------


def rank_from_scores(scores: np.ndarray, query_ids: Sequence[str], video_ids: Sequence[str],
                     ground_truth: Sequence[str]) -> list[RankedResult]:
    """Sort candidates by descending score, ties by ascending video id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(query_ids), len(video_ids)):
        raise ContractError(f"score matrix {scores.shape} does not match "
                            f"{len(query_ids)} queries x {len(video_ids)} videos")
    id_rank = np.argsort(np.argsort(np.array(video_ids, dtype=object)))
    results = []
    for qi, qid in enumerate(query_ids):
        order = np.lexsort((id_rank, -scores[qi]))
        ranking = [video_ids[j] for j in order]
        results.append(RankedResult(qid, ranking, ranking.index(ground_truth[qi]) + 1))
    return results


def rank_all(model, ds: Dataset, sigma: float, split: str | None = "test",
             video_ids: Sequence[str] | None = None) -> list[RankedResult]:
    query_ids, vids = eval_ids(ds, split, video_ids)
    scores = fused_scores(model, ds, sigma, query_ids, vids)
    return rank_from_scores(scores, query_ids, vids, [ds.queries[q].video_id for q in query_ids])


def recall_from_ranks(ranks: Sequence[int]) -> RecallReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ContractError("recall of an empty result list")
    r = [float(np.count_nonzero(ranks <= k)) / ranks.size for k in KS]
    return RecallReport(*r, n_queries=int(ranks.size))


def recall_report(results: Sequence[RankedResult]) -> RecallReport:
    return recall_from_ranks([r.rank_of_ground_truth for r in results])


def evaluate_split(model, ds: Dataset, sigma: float, video_ids: Sequence[str]) -> RecallReport:
    return recall_report(rank_all(model, ds, sigma, video_ids=video_ids))


# -- M/V grouping ----------------------------------------------------------------


def quantile_edges(values: Sequence[float], n_bins: int) -> list[float]:
    """Equal-count bin edges over (0, 1]."""
    if n_bins < 1:
        raise ContractError("need at least one M/V bin")
    values = np.sort(np.asarray(values, dtype=np.float64))
    inner = []
    for i in range(1, n_bins):
        inner.append(float(values[int(np.ceil(i * values.size / n_bins)) - 1]) if values.size else i / n_bins)
    edges = [0.0] + inner + [1.0]
    return [float(e) for e in np.maximum.accumulate(edges)]


def grouped_by_mv(results: Sequence[RankedResult], ds: Dataset,
                  bins: int | Sequence[float] = 4) -> MvGroupReport:
    mvs = []
    for r in results:
        q = ds.queries.get(r.query_id)
        if q is None or q.moment is None:
            raise DataError(f"query {r.query_id!r} lacks a moment annotation")
        mvs.append(ds.mv(r.query_id))
    edges = quantile_edges(mvs, bins) if isinstance(bins, int) else [float(b) for b in bins]
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise ContractError("M/V bin edges must start at 0 and end at 1")
    reports, counts = [], []
    mvs = np.asarray(mvs)
    ranks = np.array([r.rank_of_ground_truth for r in results])
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        mask = (mvs > lo) & (mvs <= hi)
        counts.append(int(mask.sum()))
        reports.append(recall_from_ranks(ranks[mask]) if mask.any() else None)
    return MvGroupReport(edges, reports, counts)


# -- margins & complementarity ---------------------------------------------------


def margin_from_scores(scores: np.ndarray, query_ids: Sequence[str], video_ids: Sequence[str],
                       ground_truth: Sequence[str]) -> MarginReport:
    scores = np.asarray(scores, dtype=np.float64)
    col = {v: j for j, v in enumerate(video_ids)}
    mask = np.zeros(scores.shape, dtype=bool)
    for i, gt in enumerate(ground_truth):
        mask[i, col[gt]] = True
    if not mask.any() or mask.all():
        raise ContractError("margin report needs both positive and negative pairs")
    return MarginReport(scores[mask], scores[~mask])


def margin_report(model, ds: Dataset, sigma: float, split: str | None = "test") -> MarginReport:
    query_ids, vids = eval_ids(ds, split)
    scores = fused_scores(model, ds, sigma, query_ids, vids)
    return margin_from_scores(scores, query_ids, vids, [ds.queries[q].video_id for q in query_ids])


@dataclass
class ComplementarityReport:
    mean_r: float
    n_pairs: int
    n_skipped: int
    aggregate: str


def complementarity(model, ds: Dataset, split: str | None = "test",
                    aggregate: str = "positive") -> ComplementarityReport:
    """Mean Pearson correlation between the two branches' per-frame cosine
    distributions, over positive pairs (default) or all query-video pairs."""
    if aggregate not in ("positive", "all"):
        raise ContractError(f"aggregate must be 'positive' or 'all', got {aggregate!r}")
    query_ids, vids = eval_ids(ds, split)
    f_i, q_i = encode_branch(model.inheritance, ds, query_ids, vids)
    f_e, q_e = encode_branch(model.exploration, ds, query_ids, vids)
    col = {v: j for j, v in enumerate(vids)}
    if aggregate == "positive":
        pairs = [(i, col[ds.queries[q].video_id]) for i, q in enumerate(query_ids)]
    else:
        pairs = [(i, j) for i in range(len(query_ids)) for j in range(len(vids))]
    values, skipped = [], 0
    for i, j in pairs:
        a, b = f_i[j] @ q_i[i], f_e[j] @ q_e[i]
        try:
            values.append(branch_correlation(a, b))
        except DegenerateInputError:
            skipped += 1
    mean_r = float(np.mean(values)) if values else float("nan")
    return ComplementarityReport(mean_r, len(values), skipped, aggregate)


# -- export --------------------------------------------------------------------------


def write_reports(out_dir: str | Path, recall: RecallReport, groups: MvGroupReport,
                  margins: MarginReport, comp: ComplementarityReport | None,
                  extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"recall": recall.to_dict(), "mv_groups": groups.to_dict(), "margin": margins.to_dict(),
           "complementarity": asdict(comp) if comp else None, **(extra or {})}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "recall.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in recall.to_dict().items():
            w.writerow([k, v])
    with open(out_dir / "mv_groups.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "R@1", "R@5", "R@10", "R@100", "SumR"])
        for lo, hi, c, r in zip(groups.edges[:-1], groups.edges[1:], groups.counts, groups.reports):
            vals = [r.r1, r.r5, r.r10, r.r100, r.sumr] if r else [""] * 5
            w.writerow([lo, hi, c, *vals])
    with open(out_dir / "margin_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "pos_count", "neg_count"])
        w.writerows(margins.histogram())
    return doc
