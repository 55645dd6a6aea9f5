"""Dual-branch training: loss assembly, Adam updates, schedules, early stopping."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Batch, Dataset, make_batches, split_videos
from .distillation import inheritance_loss, kl_consistency, teacher_frame_similarities
from .encoders import EncoderParams, encode_texts, encode_videos, init_params
from .errors import ConfigError, ContractError, NumericalError
from .similarity import batch_partial_similarity
from .supervision import (DecaySchedule, ScheduleState, build_soft_targets, exploration_loss,
                          hard_targets, soft_infonce, triplet_loss)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("dual", "inheritance_only", "exploration_only", "double_exploration", "double_inheritance")
_ROLES = {
    "dual": ("inheritance", "exploration"),
    "inheritance_only": ("inheritance", None),
    "exploration_only": (None, "exploration"),
    "double_exploration": ("exploration", "exploration"),
    "double_inheritance": ("inheritance", "inheritance"),
}
SLOTS = ("inheritance", "exploration")


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    learning_rate: float = 2.5e-4
    margin: float = 0.2
    temperature: float = 0.07
    tau_kl: float = 1.0
    w0: float = 0.1
    alpha0: float = 0.8
    beta0: float = 0.8
    w_schedule: DecaySchedule = field(default_factory=lambda: DecaySchedule("exponential", 0.95))
    alpha_schedule: DecaySchedule = field(default_factory=lambda: DecaySchedule("sigmoid", 800.0))
    beta_schedule: DecaySchedule = field(default_factory=lambda: DecaySchedule("sigmoid", 800.0))
    sigma: float = 0.7
    seed: int = 0
    row_normalize_targets: bool = True
    soft_targets: bool = True
    mode: str = "dual"
    hidden_size: int = 384
    heads: int = 4
    depth: int = 1
    ff_mult: int = 4
    max_frames: int = 128
    val_fraction: float = 0.1

    def __post_init__(self):
        for name in ("w_schedule", "alpha_schedule", "beta_schedule"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, DecaySchedule.from_dict(value))
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.learning_rate < 0 or self.margin < 0 or self.w0 < 0:
            raise ConfigError("learning_rate, margin and w0 must be >= 0")
        if self.temperature <= 0 or self.tau_kl <= 0:
            raise ConfigError("temperature and tau_kl must be > 0")
        if self.hidden_size % self.heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def schedules(self) -> ScheduleState:
        return ScheduleState(self.w0, self.alpha0, self.beta0,
                             self.w_schedule, self.alpha_schedule, self.beta_schedule)

    def roles(self) -> tuple[str | None, str | None]:
        return _ROLES[self.mode]

    def effective_sigma(self) -> float:
        if self.mode == "inheritance_only":
            return 0.0
        if self.mode == "exploration_only":
            return 1.0
        return self.sigma

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class BranchParams:
    video: EncoderParams
    text: EncoderParams

    def parameters(self) -> list[Tensor]:
        return self.video.parameters() + self.text.parameters()


@dataclass
class ModelState:
    inheritance: BranchParams
    exploration: BranchParams

    def branch(self, slot: str) -> BranchParams:
        return getattr(self, slot)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for slot in SLOTS:
            b = self.branch(slot)
            for enc_name, enc in (("video", b.video), ("text", b.text)):
                out.extend((f"{slot}.{enc_name}.{n}", enc.tensors[n]) for n in enc.names())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def copy(self) -> "ModelState":
        return ModelState(BranchParams(self.inheritance.video.copy(), self.inheritance.text.copy()),
                          BranchParams(self.exploration.video.copy(), self.exploration.text.copy()))


def init_model(config: TrainConfig, video_dim: int, text_dim: int) -> ModelState:
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    z, h = config.hidden_size, config.heads
    kw = dict(depth=config.depth, ff_mult=config.ff_mult)

    def branch(sv, st):
        return BranchParams(init_params(int(sv), video_dim, z, h, config.max_frames, "video", **kw),
                            init_params(int(st), text_dim, z, h, config.max_frames, "text", **kw))

    return ModelState(branch(seeds[0], seeds[1]), branch(seeds[2], seeds[3]))


# -- optimiser --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def optimizer_step(opt: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
                   lr: float) -> tuple[AdamState, list[np.ndarray]]:
    """One bias-corrected adaptive-moment step; returns new state and params."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ContractError("optimizer_step: params, grads and moments differ in length")
    t = opt.t + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"optimizer_step shape mismatch: {p.shape} vs {g.shape}")
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    return AdamState(new_m, new_v, t, opt.beta1, opt.beta2, opt.eps), new_p


# -- forward pieces ------------------------------------------------------------------


def _uniform(arrays: list[np.ndarray]) -> bool:
    return len({a.shape for a in arrays}) == 1


def encode_query_batch(params: EncoderParams, queries: list[np.ndarray]) -> Tensor:
    """Sentence vectors ``(N, z)``; queries of different lengths are encoded
    per length group and put back in order."""
    if _uniform(queries):
        q, _, _ = encode_texts(Tensor(np.stack(queries)), params)
        return q
    groups: dict[int, list[int]] = {}
    for i, a in enumerate(queries):
        groups.setdefault(a.shape[0], []).append(i)
    parts, order = [], []
    for n in sorted(groups):
        idx = groups[n]
        q, _, _ = encode_texts(Tensor(np.stack([queries[i] for i in idx])), params)
        parts.append(q)
        order.extend(idx)
    stacked = T.concat(parts, axis=0)
    return stacked[np.argsort(order)]


def branch_similarities(branch: BranchParams, batch: Batch) -> tuple[Tensor, list[Tensor]]:
    """Batch similarity matrix (rows videos, columns queries) and the per-frame
    cosine vector of every positive pair."""
    q = encode_query_batch(branch.text, batch.queries)
    n = len(batch)
    if _uniform(batch.videos):
        F = encode_videos(Tensor(np.stack(batch.videos)), branch.video)
        S, sims = batch_partial_similarity(F, q)
        ar = np.arange(n)
        return S, [sims[ar, :, ar]]
    rows, dists = [], []
    for i, frames in enumerate(batch.videos):
        F = encode_videos(Tensor(frames[None]), branch.video)
        row, sims = batch_partial_similarity(F, q)
        rows.append(row)
        dists.append(sims[0, :, i])
    return T.concat(rows, axis=0), dists


def teacher_guidance(batch: Batch) -> tuple[np.ndarray, list[np.ndarray]]:
    """Teacher pairwise matrix (rows videos) and summed teacher distributions
    for the positive pairs.  Several teachers: distributions are summed; the
    pairwise matrix max-pools their mean so it stays in [-1, 1]."""
    teachers = sorted(batch.teacher_videos)
    if not teachers:
        raise ConfigError("inheritance branch needs teacher features but the dataset has none")
    n = len(batch)
    pair = np.zeros((n, n))
    dists: list[np.ndarray] = [np.zeros(v.shape[0]) for v in batch.videos]
    for t in teachers:
        tq = batch.teacher_queries[t]
        for i, tv in enumerate(batch.teacher_videos[t]):
            sims = teacher_frame_similarities(tv[None], tq)[0]  # (k, N)
            pair[i] += sims.max(axis=0)
            dists[i] = dists[i] + sims[:, i]
    return pair / len(teachers), dists


def _targets(guide_video_rows: np.ndarray, alpha: float, beta: float, config: TrainConfig):
    n = guide_video_rows.shape[0]
    if not config.soft_targets:
        return hard_targets(n)
    return build_soft_targets(None, guide_video_rows.T, alpha, beta, config.row_normalize_targets)


def compute_losses(state: ModelState, batch: Batch, config: TrainConfig,
                   w: float, alpha: float, beta: float) -> tuple[Tensor, dict[str, float]]:
    """Total loss L = L_I + L_E for one batch (recorded on the active tape)."""
    total = None
    stats = {"L_E": 0.0, "L_I": 0.0, "L_c": 0.0}
    teacher = None
    for slot, role in zip(SLOTS, config.roles()):
        if role is None:
            continue
        S, dists = branch_similarities(state.branch(slot), batch)
        if role == "exploration":
            targets = _targets(S.data, alpha, beta, config)
            loss = exploration_loss(S, targets, config.margin, config.temperature)
            stats["L_E"] += float(loss)
        else:
            if teacher is None:
                teacher = teacher_guidance(batch)
            pair, t_dists = teacher
            targets = _targets(pair, alpha, beta, config)
            if len(dists) == 1:
                loss, parts = inheritance_loss(S, targets, dists[0], np.stack(t_dists), w,
                                               config.margin, config.temperature, config.tau_kl)
                l_c = parts["L_c"]
            else:
                kl = T.concat([kl_consistency(d, t, config.tau_kl).reshape(1)
                               for d, t in zip(dists, t_dists)], axis=0).mean()
                loss = (kl * w + soft_infonce(S, targets, config.temperature)
                        + triplet_loss(S, config.margin))
                l_c = float(kl)
            stats["L_I"] += float(loss)
            stats["L_c"] += l_c
        total = loss if total is None else total + loss
    if total is None:
        raise ConfigError(f"mode {config.mode!r} trains no branch")
    return total, stats


def _active_parameters(state: ModelState, config: TrainConfig) -> list[Tensor]:
    out = []
    for slot, role in zip(SLOTS, config.roles()):
        if role is not None:
            out.extend(state.branch(slot).parameters())
    return out


def train_step(state: ModelState, opt: AdamState, batch: Batch, config: TrainConfig,
               epoch: int, step: int) -> tuple[ModelState, AdamState, dict[str, float]]:
    """Forward both branches, backprop L = L_I + L_E, apply one Adam update
    to every trained student parameter (in place).  Teacher data is read only."""
    sched = config.schedules()
    w, alpha, beta = sched.w(epoch, step), sched.alpha(epoch, step), sched.beta(epoch, step)
    params = _active_parameters(state, config)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss, stats = compute_losses(state, batch, config, w, alpha, beta)
    value = float(loss)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at epoch {epoch}, step {step}",
                             batch.video_ids, {"query_ids": batch.query_ids, **stats})
    tape.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    opt, new_values = optimizer_step(opt, [p.data for p in params], grads, config.learning_rate)
    for p, v in zip(params, new_values):
        p.data = v
        p.grad = None
    stats.update(loss=value, w=w, alpha=alpha, beta=beta)
    return state, opt, stats


# -- fit ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    L: float
    L_E: float
    L_I: float
    L_c: float
    w: float
    alpha: float
    beta: float
    R1: float
    R5: float
    R10: float
    R100: float
    SumR: float

    def to_json(self) -> str:
        return json.dumps({k: (round(v, 12) if isinstance(v, float) else v)
                           for k, v in asdict(self).items()}, sort_keys=False)


@dataclass
class FitResult:
    state: ModelState
    logs: list[EpochLog]
    best_epoch: int | None
    train_videos: list[str]
    val_videos: list[str]


def fit(config: TrainConfig, dataset: Dataset,
        on_snapshot: Callable[[int, ModelState], None] | None = None,
        snapshot_epochs: set[int] | frozenset[int] = frozenset(),
        on_epoch: Callable[[EpochLog], None] | None = None) -> FitResult:
    """Train up to ``max_epochs``; keep the state with the best validation
    SumR and stop after ``patience`` epochs without improvement.

    Snapshot epoch ``e`` is the state after ``e`` completed epochs (0 = init).
    """
    from .evaluation import evaluate_split

    train_ids, val_ids = split_videos(dataset, config.seed, config.val_fraction)
    if not train_ids or not val_ids:
        raise ConfigError(f"empty split: {len(train_ids)} train / {len(val_ids)} validation videos")
    dims = dataset.manifest.dims
    state = init_model(config, dims["video_dim"], dims["text_dim"])
    opt = AdamState.zeros_like([p.data for p in _active_parameters(state, config)])
    sched = config.schedules()
    if 0 in snapshot_epochs and on_snapshot is not None:
        on_snapshot(0, state)
    best_state, best_sumr, best_epoch, stale = state.copy(), -np.inf, None, 0
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(config.max_epochs):
        batches = make_batches(dataset, config.batch_size, config.seed, epoch, train_ids)
        epoch_step = step
        totals = {"loss": 0.0, "L_E": 0.0, "L_I": 0.0, "L_c": 0.0}
        for batch in batches:
            state, opt, stats = train_step(state, opt, batch, config, epoch, step)
            step += 1
            for k in totals:
                totals[k] += stats[k]
        nb = max(1, len(batches))
        report = evaluate_split(state, dataset, config.effective_sigma(), val_ids)
        entry = EpochLog(epoch, totals["loss"] / nb, totals["L_E"] / nb, totals["L_I"] / nb,
                         totals["L_c"] / nb, sched.w(epoch, epoch_step),
                         sched.alpha(epoch, epoch_step), sched.beta(epoch, epoch_step), report.r1, report.r5, report.r10, report.r100,
                         report.sumr)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.info("epoch %d loss %.4f SumR %.4f", epoch, entry.L, entry.SumR)
        if epoch + 1 in snapshot_epochs and on_snapshot is not None:
            on_snapshot(epoch + 1, state)
        if report.sumr > best_sumr:
            best_sumr, best_epoch, stale = report.sumr, epoch, 0
            best_state = state.copy()
        else:
            stale += 1
        if stale >= config.patience:
            break
    return FitResult(best_state, logs, best_epoch, train_ids, val_ids)
