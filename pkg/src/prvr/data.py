"""Datasets of precomputed features with moment annotations.

On-disk layout::

    manifest.json
    video/<video_id>.prvf                     (n_frames x video_dim)
    text/<query_id>.prvf                      (n_tokens x text_dim)
    teacher/<teacher_id>/video/<video_id>.prvf (n_frames x teacher_dim)
    teacher/<teacher_id>/text/<query_id>.prvf  (1 x teacher_dim)

A ``.prvf`` file is ``b"PRVF"`` | u32 version | u32 rows | u32 cols |
rows*cols float32, all little-endian, row-major.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BatchError, FormatError, ManifestError, ParameterError

MAGIC = b"PRVF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "val", "test")


# -- binary feature files ------------------------------------------------------


def write_features(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {m.shape}", str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(body)


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"feature file not found: {path}") from None
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic bytes, expected b'PRVF'", str(path), 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", str(path), len(raw))
    _, version, rows, cols = _HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", str(path), 4)
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"payload has {len(raw) - _HEADER.size} bytes, header implies "
                          f"{4 * rows * cols}", str(path), _HEADER.size)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


# -- manifest --------------------------------------------------------------------


@dataclass(frozen=True)
class MomentAnnotation:
    start_frame: int
    end_frame: int  # inclusive

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame < self.start_frame:
            raise ParameterError(f"invalid moment [{self.start_frame}, {self.end_frame}]")

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1


def mv_ratio(moment: MomentAnnotation, n_frames: int) -> float:
    """Moment length over video length."""
    return moment.length / n_frames


@dataclass
class VideoEntry:
    id: str
    n_frames: int
    feature_file: str
    split: str = "train"


@dataclass
class QueryEntry:
    id: str
    feature_file: str
    n_tokens: int
    video_id: str
    moment: MomentAnnotation


@dataclass
class DatasetManifest:
    name: str
    dims: dict[str, int]
    videos: list[VideoEntry] = field(default_factory=list)
    queries: list[QueryEntry] = field(default_factory=list)
    teachers: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "format_version": FORMAT_VERSION,
            "dims": dict(self.dims),
            "videos": [asdict(v) for v in self.videos],
            "queries": [{**asdict(q), "moment": asdict(q.moment)} for q in self.queries],
            "teachers": list(self.teachers),
        }


def _require(obj: dict, key: str, kind, path: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError("missing field", path, f"{where}{key}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ManifestError(f"expected integer, got {value!r}", path, f"{where}{key}")
    if kind is not int and not isinstance(value, kind):
        raise ManifestError(f"expected {kind.__name__}, got {type(value).__name__}", path, f"{where}{key}")
    return value


def parse_manifest(doc: dict, path: str = "manifest.json") -> DatasetManifest:
    name = _require(doc, "name", str, path, "")
    dims_doc = _require(doc, "dims", dict, path, "")
    dims = {k: _require(dims_doc, k, int, path, "dims.") for k in ("video_dim", "text_dim", "teacher_dim")}
    videos = []
    for i, v in enumerate(_require(doc, "videos", list, path, "")):
        w = f"videos[{i}]."
        split = v.get("split", "train") if isinstance(v, dict) else "train"
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", path, w + "split")
        videos.append(VideoEntry(_require(v, "id", str, path, w), _require(v, "n_frames", int, path, w),
                                 _require(v, "feature_file", str, path, w), split))
    queries = []
    for i, q in enumerate(_require(doc, "queries", list, path, "")):
        w = f"queries[{i}]."
        m = _require(q, "moment", dict, path, w)
        start = _require(m, "start_frame", int, path, w + "moment.")
        end = _require(m, "end_frame", int, path, w + "moment.")
        if start < 0 or end < start:
            raise ManifestError(f"invalid moment [{start}, {end}]", path, w + "moment")
        queries.append(QueryEntry(_require(q, "id", str, path, w), _require(q, "feature_file", str, path, w),
                                  _require(q, "n_tokens", int, path, w), _require(q, "video_id", str, path, w),
                                  MomentAnnotation(start, end)))
    teachers = _require(doc, "teachers", list, path, "")
    manifest = DatasetManifest(name, dims, videos, queries, [str(t) for t in teachers])
    validate_manifest(manifest, path)
    return manifest


def validate_manifest(m: DatasetManifest, path: str = "manifest") -> None:
    ids = [v.id for v in m.videos]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate video id", path, "videos")
    qids = [q.id for q in m.queries]
    if len(set(qids)) != len(qids):
        raise ManifestError("duplicate query id", path, "queries")
    if len(set(m.teachers)) != len(m.teachers):
        raise ManifestError("duplicate teacher id", path, "teachers")
    frames = {v.id: v.n_frames for v in m.videos}
    for i, v in enumerate(m.videos):
        if v.n_frames < 1:
            raise ManifestError("n_frames must be >= 1", path, f"videos[{i}].n_frames")
    for i, q in enumerate(m.queries):
        if q.video_id not in frames:
            raise ManifestError(f"unknown video id {q.video_id!r}", path, f"queries[{i}].video_id")
        if q.moment.end_frame >= frames[q.video_id]:
            raise ManifestError(f"moment end {q.moment.end_frame} outside video of "
                                f"{frames[q.video_id]} frames", path, f"queries[{i}].moment")
        if q.n_tokens < 1:
            raise ManifestError("n_tokens must be >= 1", path, f"queries[{i}].n_tokens")


# -- in-memory dataset ------------------------------------------------------------


def _subsample_index(n: int, cap: int | None) -> np.ndarray | None:
    if cap is None or n <= cap:
        return None
    return np.round(np.linspace(0, n - 1, cap)).astype(np.int64)


def _remap_moment(moment: MomentAnnotation, idx: np.ndarray) -> MomentAnnotation:
    inside = np.nonzero((idx >= moment.start_frame) & (idx <= moment.end_frame))[0]
    if inside.size:
        return MomentAnnotation(int(inside[0]), int(inside[-1]))
    centre = 0.5 * (moment.start_frame + moment.end_frame)
    j = int(np.argmin(np.abs(idx - centre)))
    return MomentAnnotation(j, j)


class Dataset:
    """Manifest plus feature access.  Files are read lazily and cached;
    videos longer than ``max_frames`` are uniformly subsampled (features and
    moment annotations alike)."""

    def __init__(self, manifest: DatasetManifest, root: str | Path | None = None,
                 arrays: dict[str, np.ndarray] | None = None, max_frames: int | None = None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = dict(arrays or {})
        self._subsample: dict[str, np.ndarray] = {}
        if max_frames is not None:
            videos, moments = [], {}
            for v in manifest.videos:
                idx = _subsample_index(v.n_frames, max_frames)
                if idx is not None:
                    self._subsample[v.id] = idx
                    v = VideoEntry(v.id, len(idx), v.feature_file, v.split)
                videos.append(v)
            queries = []
            for q in manifest.queries:
                if q.video_id in self._subsample:
                    q = QueryEntry(q.id, q.feature_file, q.n_tokens, q.video_id,
                                   _remap_moment(q.moment, self._subsample[q.video_id]))
                queries.append(q)
            manifest = DatasetManifest(manifest.name, dict(manifest.dims), videos, queries,
                                       list(manifest.teachers))
        self.manifest = manifest
        self.videos = {v.id: v for v in manifest.videos}
        self.queries = {q.id: q for q in manifest.queries}
        self.queries_by_video: dict[str, list[str]] = {v.id: [] for v in manifest.videos}
        for q in manifest.queries:
            self.queries_by_video[q.video_id].append(q.id)

    # file access
    def _load(self, rel: str) -> np.ndarray:
        arr = self._cache.get(rel)
        if arr is None:
            if self.root is None:
                raise FileNotFoundError(f"no in-memory array and no root for {rel}")
            arr = read_features(self.root / rel)
            self._cache[rel] = arr
        return arr

    def _frames(self, rel: str, video_id: str, dim_key: str) -> np.ndarray:
        arr = self._load(rel)
        entry_dim = self.manifest.dims[dim_key]
        if arr.shape[1] != entry_dim:
            raise FormatError(f"file has {arr.shape[1]} columns, manifest {dim_key} is {entry_dim}",
                              rel, 12)
        idx = self._subsample.get(video_id)
        return arr if idx is None else arr[idx]

    def video_features(self, video_id: str) -> np.ndarray:
        return self._frames(self.videos[video_id].feature_file, video_id, "video_dim")

    def query_features(self, query_id: str) -> np.ndarray:
        arr = self._load(self.queries[query_id].feature_file)
        if arr.shape[1] != self.manifest.dims["text_dim"]:
            raise FormatError(f"file has {arr.shape[1]} columns, manifest text_dim is "
                              f"{self.manifest.dims['text_dim']}", self.queries[query_id].feature_file, 12)
        return arr

    def teacher_video_features(self, teacher_id: str, video_id: str) -> np.ndarray:
        return self._frames(teacher_video_path(teacher_id, video_id), video_id, "teacher_dim")

    def teacher_query_features(self, teacher_id: str, query_id: str) -> np.ndarray:
        return self._load(teacher_text_path(teacher_id, query_id))[0]

    # splits
    def video_ids(self, split: str | None = None) -> list[str]:
        return [v.id for v in self.manifest.videos if split is None or v.split == split]

    def query_ids_for(self, video_ids: Iterable[str]) -> list[str]:
        wanted = set(video_ids)
        return [q.id for q in self.manifest.queries if q.video_id in wanted]

    def has_split(self, split: str) -> bool:
        return any(v.split == split for v in self.manifest.videos)

    def mv(self, query_id: str) -> float:
        q = self.queries[query_id]
        return mv_ratio(q.moment, self.videos[q.video_id].n_frames)

    def validate_files(self) -> None:
        """Touch every referenced file so missing/corrupt ones fail early."""
        for v in self.manifest.videos:
            self.video_features(v.id)
            for t in self.manifest.teachers:
                self.teacher_video_features(t, v.id)
        for q in self.manifest.queries:
            self.query_features(q.id)
            for t in self.manifest.teachers:
                self.teacher_query_features(t, q.id)


def teacher_video_path(teacher_id: str, video_id: str) -> str:
    return f"teacher/{teacher_id}/video/{video_id}.prvf"


def teacher_text_path(teacher_id: str, query_id: str) -> str:
    return f"teacher/{teacher_id}/text/{query_id}.prvf"


def load_dataset(directory: str | Path, max_frames: int | None = 128,
                 validate_files: bool = True) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError("manifest.json not found", str(mpath)) from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc}", str(mpath)) from None
    ds = Dataset(parse_manifest(doc, str(mpath)), root=directory, max_frames=max_frames)
    if validate_files:
        ds.validate_files()
    return ds


def write_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    m = ds.manifest
    for v in m.videos:
        write_features(directory / v.feature_file, ds.video_features(v.id))
        for t in m.teachers:
            write_features(directory / teacher_video_path(t, v.id), ds.teacher_video_features(t, v.id))
    for q in m.queries:
        write_features(directory / q.feature_file, ds.query_features(q.id))
        for t in m.teachers:
            write_features(directory / teacher_text_path(t, q.id), ds.teacher_query_features(t, q.id)[None, :])
    (directory / "manifest.json").write_text(json.dumps(m.to_json(), indent=2) + "\n", encoding="utf-8")


def tree_checksums(directory: str | Path, pattern: str = "**/*.prvf") -> dict[str, str]:
    directory = Path(directory)
    return {str(p.relative_to(directory)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.glob(pattern))}


# -- synthetic generator ------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Planted-moment synthetic dataset.

    Queries mix ``concepts_per_query`` of ``n_concepts`` orthogonal latent
    concepts; each query's concept code is planted over a span of its video
    whose length ratio is drawn from ``mv_range``.  ``n_videos`` counts the
    training videos; validation and test videos are generated on top.
    """

    n_videos: int = 64
    frames_per_video: int = 32
    queries_per_video: int = 1
    video_dim: int = 64
    text_dim: int = 64
    teacher_dim: int = 64
    n_concepts: int = 32
    mv_range: tuple[float, float] = (0.1, 0.5)
    noise_std: float = 0.1
    teacher_quality: float = 1.0
    seed: int = 0
    tokens_per_query: int = 8
    concepts_per_query: int = 3
    n_val_videos: int = 0
    n_test_videos: int = 0
    n_teachers: int = 1
    name: str = "synthetic"

    def __post_init__(self):
        self.mv_range = tuple(float(x) for x in self.mv_range)

    def validate(self) -> None:
        lo, hi = self.mv_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ParameterError(f"mv_range must satisfy 0 < lo <= hi <= 1, got {self.mv_range}")
        for name in ("n_videos", "frames_per_video", "queries_per_video", "video_dim", "text_dim",
                     "teacher_dim", "n_concepts", "tokens_per_query", "concepts_per_query", "n_teachers"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_val_videos < 0 or self.n_test_videos < 0:
            raise ParameterError("n_val_videos and n_test_videos must be >= 0")
        if self.concepts_per_query > self.n_concepts:
            raise ParameterError("concepts_per_query exceeds n_concepts")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.teacher_quality <= 1.0:
            raise ParameterError(f"teacher_quality must lie in [0, 1], got {self.teacher_quality}")
        n = self.frames_per_video
        if not _span_lengths(n, self.mv_range):
            raise ParameterError(f"no integer span length of {n} frames gives M/V in {self.mv_range}")
        if self.queries_per_video * min(_span_lengths(n, self.mv_range)) > n:
            raise ParameterError(f"{self.queries_per_video} non-overlapping moments do not fit "
                                 f"in {n} frames")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown SyntheticSpec fields: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mv_range"] = list(self.mv_range)
        return d


def _span_lengths(n: int, mv_range: Sequence[float]) -> list[int]:
    lo, hi = mv_range
    return [L for L in range(1, n + 1) if lo - 1e-12 <= L / n <= hi + 1e-12]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    L, n = spec.n_concepts, spec.frames_per_video
    proj_video = rng.standard_normal((L, spec.video_dim))
    proj_text = rng.standard_normal((L, spec.text_dim))
    teacher_ids = [f"teacher{i}" for i in range(spec.n_teachers)]
    proj_teacher = [rng.standard_normal((L, spec.teacher_dim)) for _ in teacher_ids]
    fillers = _unit(rng.standard_normal((4, L)))
    lengths = _span_lengths(n, spec.mv_range)
    q = spec.teacher_quality
    noise = spec.noise_std

    splits = (["train"] * spec.n_videos + ["val"] * spec.n_val_videos + ["test"] * spec.n_test_videos)
    videos, queries, arrays = [], [], {}
    qcounter = 0
    for vi, split in enumerate(splits):
        vid = f"v{vi:05d}"
        codes = np.repeat(_unit(rng.standard_normal(L))[None, :], n, axis=0)
        span_len = rng.choice(lengths, size=spec.queries_per_video)
        while span_len.sum() > n:
            span_len = rng.choice(lengths, size=spec.queries_per_video)
        # random composition of the free frames into gaps around the spans
        free = n - int(span_len.sum())
        cuts = np.sort(rng.integers(0, free + 1, size=spec.queries_per_video))
        gaps = np.diff(np.concatenate([[0], cuts]))
        order = rng.permutation(spec.queries_per_video)
        moments, qcodes = [], []
        start = 0
        for i in range(spec.queries_per_video):
            start += int(gaps[i])
            length = int(span_len[order[i]])
            moments.append(MomentAnnotation(start, start + length - 1))
            start += length
        for mom in moments:
            chosen = rng.choice(L, size=spec.concepts_per_query, replace=False)
            code = np.zeros(L)
            code[chosen] = rng.uniform(0.5, 1.5, size=spec.concepts_per_query)
            code = _unit(code)
            codes[mom.start_frame:mom.end_frame + 1] = code
            qcodes.append(code)
        frames = codes @ proj_video + noise * rng.standard_normal((n, spec.video_dim))
        rel = f"video/{vid}.prvf"
        arrays[rel] = _f32(frames)
        videos.append(VideoEntry(vid, n, rel, split))
        teacher_frames = []
        for proj in proj_teacher:
            clean = codes @ proj
            corrupt = rng.standard_normal(clean.shape)
            tf = q * clean + (1.0 - q) * corrupt + noise * rng.standard_normal(clean.shape)
            teacher_frames.append(tf)
        for tid, tf in zip(teacher_ids, teacher_frames):
            arrays[teacher_video_path(tid, vid)] = _f32(tf)
        for mom, code in zip(moments, qcodes):
            qid = f"q{qcounter:06d}"
            qcounter += 1
            n_tok = spec.tokens_per_query
            n_content = max(1, math.ceil(n_tok / 2))
            token_codes = fillers[rng.integers(0, len(fillers), size=n_tok)]
            content_pos = rng.choice(n_tok, size=n_content, replace=False)
            token_codes[content_pos] = code
            words = token_codes @ proj_text + noise * rng.standard_normal((n_tok, spec.text_dim))
            qrel = f"text/{qid}.prvf"
            arrays[qrel] = _f32(words)
            for tid, proj in zip(teacher_ids, proj_teacher):
                tq = code @ proj + noise * rng.standard_normal(spec.teacher_dim)
                arrays[teacher_text_path(tid, qid)] = _f32(tq[None, :])
            queries.append(QueryEntry(qid, qrel, n_tok, vid, mom))
    dims = {"video_dim": spec.video_dim, "text_dim": spec.text_dim, "teacher_dim": spec.teacher_dim}
    manifest = DatasetManifest(spec.name, dims, videos, queries, teacher_ids)
    validate_manifest(manifest)
    return Dataset(manifest, arrays=arrays)


# -- batching ----------------------------------------------------------------------


@dataclass
class Batch:
    video_ids: list[str]
    query_ids: list[str]
    videos: list[np.ndarray]  # (k_i, video_dim)
    queries: list[np.ndarray]  # (n_i, text_dim)
    teacher_videos: dict[str, list[np.ndarray]]  # teacher id -> (k_i, teacher_dim)
    teacher_queries: dict[str, np.ndarray]  # teacher id -> (N, teacher_dim)

    def __len__(self) -> int:
        return len(self.video_ids)


def assemble_batch(ds: Dataset, video_ids: Sequence[str], query_ids: Sequence[str]) -> Batch:
    if len(set(video_ids)) != len(video_ids):
        raise BatchError("batch contains a repeated video")
    teachers = ds.manifest.teachers
    return Batch(
        list(video_ids), list(query_ids),
        [ds.video_features(v) for v in video_ids],
        [ds.query_features(q) for q in query_ids],
        {t: [ds.teacher_video_features(t, v) for v in video_ids] for t in teachers},
        {t: np.stack([ds.teacher_query_features(t, q) for q in query_ids]) if query_ids else
         np.zeros((0, ds.manifest.dims["teacher_dim"])) for t in teachers},
    )


def make_batches(ds: Dataset, batch_size: int, seed: int, epoch: int,
                 video_ids: Sequence[str] | None = None) -> list[Batch]:
    """Epoch-deterministic shuffle into batches of distinct videos, one
    randomly chosen query per video; the trailing remainder is dropped."""
    if batch_size < 2:
        raise BatchError(f"batch size must be >= 2, got {batch_size}")
    pool = [v for v in (video_ids if video_ids is not None else ds.video_ids())
            if ds.queries_by_video.get(v)]
    if len(pool) < batch_size:
        raise BatchError(f"only {len(pool)} videos with queries for batch size {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    order = [pool[i] for i in rng.permutation(len(pool))]
    batches = []
    for b in range(len(order) // batch_size):
        vids = order[b * batch_size:(b + 1) * batch_size]
        qids = []
        for v in vids:
            options = ds.queries_by_video[v]
            qids.append(options[int(rng.integers(len(options)))])
        batches.append(assemble_batch(ds, vids, qids))
    return batches


def split_videos(ds: Dataset, seed: int, val_fraction: float = 0.1) -> tuple[list[str], list[str]]:
    """Training and validation video ids; a seeded video-level split of the
    training videos when the manifest has no validation split."""
    train = ds.video_ids("train")
    if ds.has_split("val"):
        return train, ds.video_ids("val")
    rng = np.random.default_rng([seed, 0x5E1])
    perm = rng.permutation(len(train))
    n_val = max(1, int(round(val_fraction * len(train)))) if len(train) > 1 else 0
    val_idx = set(perm[:n_val].tolist())
    return ([v for i, v in enumerate(train) if i not in val_idx],
            [v for i, v in enumerate(train) if i in val_idx])
