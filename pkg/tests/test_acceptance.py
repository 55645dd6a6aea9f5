"""Acceptance suite.  One test per criterion; each records a pass/fail line
that is printed in the terminal summary."""

from __future__ import annotations

import functools
import hashlib
import json
import math
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record
from prvr import tensor as T
from prvr.data import (Dataset, DatasetManifest, MomentAnnotation, QueryEntry, SyntheticSpec,
                       VideoEntry, generate_synthetic, load_dataset, tree_checksums, write_dataset)
from prvr.distillation import kl_consistency
from prvr.encoders import init_params, transformer_layer
from prvr.evaluation import (RankedResult, branch_scores, eval_ids, fused_scores, grouped_by_mv,
                             margin_report, rank_all, rank_from_scores, recall_report)
from prvr.similarity import branch_correlation, cosine, fuse, pairwise_matrix
from prvr.supervision import (DecaySchedule, build_soft_targets, decay_value, hard_targets,
                              soft_infonce, triplet_loss)
from prvr.tensor import Tensor, check_gradients
from prvr.training import TrainConfig, fit, init_model

SEEDS = (0, 1, 2)


# -- 1: gradient suite -------------------------------------------------------------


def _grad_cases():
    """Scalar test functions per operation; each call builds one seeded instance."""

    def softmax_case(rng):
        w = rng.standard_normal((3, 5))
        tau = rng.uniform(0.2, 2.0)
        # logits of order one after scaling keep every partial above the finite-difference noise floor
        return lambda x: (T.softmax(x, axis=-1, temperature=tau) * w).sum(), tau * rng.standard_normal((3, 5))

    def layer_norm_case(rng):
        g, b, w = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal((4, 6))
        return lambda x: (T.layer_norm(x, g, b) * w).sum(), rng.standard_normal((4, 6))

    def attention_case(rng):
        p = init_params(int(rng.integers(1 << 30)), 8, 8, 2, 6)
        w = rng.standard_normal((5, 8))
        return lambda x: (transformer_layer(x, p) * w).sum(), rng.standard_normal((5, 8))

    def attention_param_case(rng):
        p = init_params(int(rng.integers(1 << 30)), 8, 8, 2, 6)
        x0 = Tensor(rng.standard_normal((5, 8)))
        w = rng.standard_normal((5, 8))

        def f(wq):
            p.tensors["l0.wq"] = wq
            return (transformer_layer(x0, p) * w).sum()

        return f, p["l0.wq"].data.copy()

    def max_reduce_case(rng):
        w = rng.standard_normal(4)
        return lambda x: (T.max_reduce(x, axis=0)[0] * w).sum(), rng.standard_normal((6, 4))

    def cosine_case(rng):
        b = rng.standard_normal(7)
        return lambda x: cosine(x, b), rng.standard_normal(7)

    def infonce_case(rng):
        n = int(rng.integers(2, 6))
        targets = build_soft_targets(None, rng.uniform(-1, 1, (n, n)), rng.uniform(), rng.uniform())
        return lambda s: soft_infonce(s, targets, 0.07), rng.uniform(-0.2, 0.2, (n, n))

    def triplet_case(rng):
        n = int(rng.integers(2, 6))
        return lambda s: triplet_loss(s, 0.2), rng.uniform(-1, 1, (n, n))

    def kl_case(rng):
        ct = rng.uniform(-1, 1, (3, 6))
        tau = rng.uniform(0.2, 2.0)
        return lambda c: kl_consistency(c, ct, tau).sum(), rng.uniform(-1, 1, (3, 6))

    return {"softmax": softmax_case, "layer_norm": layer_norm_case, "attention": attention_case,
            "attention_params": attention_param_case, "max_reduce": max_reduce_case,
            "cosine": cosine_case, "soft_infonce": infonce_case, "triplet": triplet_case,
            "kl": kl_case}


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for name, make in _grad_cases().items():
        errors = []
        for i in range(20):
            f, x0 = make(np.random.default_rng([1, i, len(name)]))
            errors.append(check_gradients(f, x0, eps=1e-6))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    top = max(worst, key=worst.get)
    record(1, ok, f"worst rel err {worst[top]:.2e} ({top}), 20 instances x {len(worst)} ops, {elapsed:.1f}s")
    assert ok, (worst, elapsed)


# -- 2: oracle equivalence -----------------------------------------------------------


def _oracle_ranks(scores, vids, gts):
    ranks = []
    for i, gt in enumerate(gts):
        order = sorted(range(len(vids)), key=lambda j: (-scores[i][j], vids[j]))
        ranks.append([vids[j] for j in order].index(gt) + 1)
    return ranks


def _oracle_recall(ranks):
    return [sum(r <= k for r in ranks) / len(ranks) for k in (1, 5, 10, 100)]


def _oracle_targets(guide, alpha, beta):
    n = len(guide)
    h = math.floor(alpha * n)
    out = []
    for i in range(n):
        if i < h:
            out.append([1.0 if j == i else 0.0 for j in range(n)])
            continue
        row = [beta * (j == i) + (1 - beta) * min(1.0, max(0.0, guide[i][j])) for j in range(n)]
        s = sum(row)
        out.append([r / s for r in row] if s > 0 else row)
    return out


def _oracle_partial(frames, q):
    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
    return max(cos(f, q) for f in frames)


def _mv_dataset(rng, n):
    videos, queries = [], []
    for i in range(n):
        frames = int(rng.integers(4, 30))
        start = int(rng.integers(0, frames))
        end = int(rng.integers(start, frames))
        videos.append(VideoEntry(f"v{i:03d}", frames, f"video/v{i:03d}.prvf", "test"))
        queries.append(QueryEntry(f"q{i:03d}", f"text/q{i:03d}.prvf", 2, f"v{i:03d}",
                                  MomentAnnotation(start, end)))
    return Dataset(DatasetManifest("oracle", {"video_dim": 1, "text_dim": 1, "teacher_dim": 1},
                                   videos, queries, []))


def test_criterion_2_oracle_equivalence():
    mismatches = {"recall": 0, "mv": 0, "pairwise": 0, "targets": 0, "pearson": 0}
    n_inst = 200
    for inst in range(n_inst):
        rng = np.random.default_rng([2, inst])
        nq, nv = int(rng.integers(1, 9)), int(rng.integers(1, 12))
        vids = [f"v{j:02d}" for j in rng.permutation(nv)]
        # coarse scores make ties common
        scores = np.round(rng.uniform(-1, 1, (nq, nv)), 1)
        gts = [vids[int(rng.integers(nv))] for _ in range(nq)]
        results = rank_from_scores(scores, [f"q{i}" for i in range(nq)], vids, gts)
        rep = recall_report(results)
        ranks = _oracle_ranks(scores.tolist(), vids, gts)
        if [r.rank_of_ground_truth for r in results] != ranks or \
                [rep.r1, rep.r5, rep.r10, rep.r100] != _oracle_recall(ranks):
            mismatches["recall"] += 1

        ds = _mv_dataset(rng, int(rng.integers(2, 15)))
        fake = [RankedResult(q, [], int(rng.integers(1, 120))) for q in ds.queries]
        edges = sorted(set([0.0, 1.0] + [float(x) for x in np.round(rng.uniform(0, 1, 3), 2)]))
        g = grouped_by_mv(fake, ds, edges)
        for b, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            members = [r.rank_of_ground_truth for r in fake
                       if lo < (ds.queries[r.query_id].moment.end_frame - ds.queries[r.query_id].moment.start_frame + 1)
                       / ds.videos[ds.queries[r.query_id].video_id].n_frames <= hi]
            got = g.reports[b]
            if g.counts[b] != len(members) or \
                    (members and [got.r1, got.r5, got.r10, got.r100] != _oracle_recall(members)) or \
                    (not members and got is not None):
                mismatches["mv"] += 1

        n = int(rng.integers(1, 6))
        vlist = [rng.standard_normal((int(rng.integers(1, 6)), 4)) for _ in range(n)]
        qlist = [rng.standard_normal(4) for _ in range(n)]
        S = pairwise_matrix([Tensor(v) for v in vlist], [Tensor(q) for q in qlist]).data
        want = [[_oracle_partial(v.tolist(), q.tolist()) for q in qlist] for v in vlist]
        if np.max(np.abs(S - np.array(want))) > 1e-9:
            mismatches["pairwise"] += 1

        guide = rng.uniform(-1, 1, (n, n))
        a, b = float(rng.uniform()), float(rng.uniform())
        t = build_soft_targets(None, guide, a, b)
        if np.max(np.abs(t.t2v - np.array(_oracle_targets(guide.tolist(), a, b)))) > 1e-9 or \
                np.max(np.abs(t.v2t - np.array(_oracle_targets(guide.T.tolist(), a, b)))) > 1e-9:
            mismatches["targets"] += 1

        x = rng.standard_normal(int(rng.integers(3, 30)))
        y = 0.5 * x + rng.standard_normal(x.size)
        if abs(branch_correlation(x, y) - statistics.correlation(x.tolist(), y.tolist())) > 1e-9:
            mismatches["pearson"] += 1
    ok = not any(mismatches.values())
    record(2, ok, f"{n_inst} instances x 5 functions, mismatches {mismatches}")
    assert ok, mismatches


# -- 3: degeneracy identities -----------------------------------------------------------


def _standard_infonce(S, tau):
    def ce(M):
        z = M / tau
        m = z.max(axis=1)
        return np.mean(np.log(np.exp(z - m[:, None]).sum(axis=1)) + m - np.diag(z))
    return ce(S) + ce(S.T)


def test_criterion_3_degeneracies():
    rng = np.random.default_rng(3)
    worst_nce, worst_kl, exact_targets, exact_fuse = 0.0, 0.0, True, True
    for _ in range(50):
        n = int(rng.integers(2, 9))
        S = rng.uniform(-1, 1, (n, n))
        worst_nce = max(worst_nce, abs(float(soft_infonce(Tensor(S), hard_targets(n), 0.07))
                                       - _standard_infonce(S, 0.07)))
        g = rng.uniform(-1, 1, (n, n))
        for a, b in ((1.0, float(rng.uniform())), (float(rng.uniform()), 1.0)):
            t = build_soft_targets(None, g, a, b)
            exact_targets &= np.array_equal(t.t2v, np.eye(n)) and np.array_equal(t.v2t, np.eye(n))
        s_i, s_e = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        exact_fuse &= np.array_equal(fuse(s_i, s_e, 0.0), s_i) and np.array_equal(fuse(s_i, s_e, 1.0), s_e)
        c = rng.uniform(-1, 1, (3, 8))
        worst_kl = max(worst_kl, float(np.max(np.abs(kl_consistency(c, c, float(rng.uniform(0.1, 3))).data))))

    # fused model scores at the endpoints equal single-branch scores bit for bit
    ds = generate_synthetic(SyntheticSpec(n_videos=4, n_test_videos=6, frames_per_video=6, video_dim=8,
                                          text_dim=8, teacher_dim=4, tokens_per_query=3, seed=3))
    model = init_model(TrainConfig(hidden_size=8, heads=2, max_frames=6), 8, 8)
    qids, vids = eval_ids(ds)
    exact_fuse &= np.array_equal(fused_scores(model, ds, 0.0, qids, vids),
                                 branch_scores(model.inheritance, ds, qids, vids))
    exact_fuse &= np.array_equal(fused_scores(model, ds, 1.0, qids, vids),
                                 branch_scores(model.exploration, ds, qids, vids))
    ok = worst_nce < 1e-9 and worst_kl < 1e-12 and exact_targets and exact_fuse
    record(3, ok, f"InfoNCE diff {worst_nce:.1e}, KL(C,C) {worst_kl:.1e}, "
                  f"identity targets exact={exact_targets}, fuse endpoints exact={exact_fuse}")
    assert ok


# -- 4: schedules -----------------------------------------------------------------------


def test_criterion_4_schedules():
    exp = DecaySchedule("exponential", 0.95)
    ts = np.linspace(0, 100, 1001)
    kinds = [exp, DecaySchedule("linear", -0.009, 1.0), DecaySchedule("sigmoid", 800.0),
             DecaySchedule("sigmoid", 5.0)]
    monotone = all(all(decay_value(s, b) <= decay_value(s, a) for a, b in zip(ts[:-1], ts[1:]))
                   for s in kinds)
    fixed = DecaySchedule("fixed", 1.0)
    constant = len({decay_value(fixed, t) for t in ts}) == 1
    ok = decay_value(exp, 0) == 1.0 and abs(decay_value(exp, 1) - 0.95) < 1e-15 and monotone and constant
    record(4, ok, f"g(0)={decay_value(exp, 0)}, g(1)={decay_value(exp, 1)}, "
                  f"non-increasing={monotone}, fixed constant={constant}")
    assert ok


# -- 5-8: training on the synthetic spec ------------------------------------------------


def synthetic_spec(seed: int, teacher_quality: float = 1.0) -> SyntheticSpec:
    return SyntheticSpec(n_videos=256, n_val_videos=32, n_test_videos=64, frames_per_video=32,
                         video_dim=64, text_dim=64, teacher_dim=64, teacher_quality=teacher_quality,
                         noise_std=0.1, seed=seed)


BASE_CONFIG = dict(batch_size=32, hidden_size=128, heads=4, max_epochs=30, patience=10,
                   learning_rate=1e-3, max_frames=32)

VARIANTS = {
    "dual": {},
    "inheritance_only": {"mode": "inheritance_only"},
    "exploration_only": {"mode": "exploration_only"},
    "hard_targets": {"soft_targets": False},
    "fixed_w": {"w_schedule": {"kind": "fixed", "factor": 1.0}},
}


@functools.lru_cache(maxsize=None)
def trained(variant: str, seed: int, teacher_quality: float = 1.0):
    ds = generate_synthetic(synthetic_spec(seed, teacher_quality))
    cfg = TrainConfig(**BASE_CONFIG, seed=seed, **VARIANTS[variant])
    start = time.perf_counter()
    res = fit(cfg, ds)
    elapsed = time.perf_counter() - start
    sigma = cfg.effective_sigma()
    recall = recall_report(rank_all(res.state, ds, sigma))
    margin = margin_report(res.state, ds, sigma).center_distance
    return {"recall": recall, "center_distance": margin, "seconds": elapsed, "epochs": len(res.logs)}


def _mean(variant, key, teacher_quality=1.0):
    vals = []
    for s in SEEDS:
        r = trained(variant, s, teacher_quality)
        vals.append(r["recall"].sumr if key == "sumr" else r[key])
    return float(np.mean(vals)), vals


def test_criterion_5_separability():
    r = trained("dual", 0)
    ok = r["recall"].r1 >= 0.9 and r["seconds"] < 300
    record(5, ok, f"test R@1 {r['recall'].r1:.3f}, SumR {r['recall'].sumr:.3f}, "
                  f"{r['epochs']} epochs in {r['seconds']:.0f}s")
    assert ok


def test_criterion_6_dual_vs_single():
    dual, dv = _mean("dual", "sumr")
    inh, iv = _mean("inheritance_only", "sumr")
    exp, ev = _mean("exploration_only", "sumr")
    ok = dual >= inh and dual >= exp
    record(6, ok, f"mean SumR dual {dual:.4f} {np.round(dv, 4).tolist()}, inheritance-only {inh:.4f} "
                  f"{np.round(iv, 4).tolist()}, exploration-only {exp:.4f} {np.round(ev, 4).tolist()}")
    assert ok


def test_criterion_7_dynamic_vs_fixed():
    dyn, dv = _mean("dual", "sumr", 0.3)
    fixed, fv = _mean("fixed_w", "sumr", 0.3)
    ok = dyn >= fixed
    record(7, ok, f"teacher_quality 0.3, mean SumR dynamic {dyn:.4f} {np.round(dv, 4).tolist()}, "
                  f"fixed {fixed:.4f} {np.round(fv, 4).tolist()}")
    assert ok


def test_criterion_8_soft_vs_hard_center_distance():
    soft, sv = _mean("dual", "center_distance")
    hard, hv = _mean("hard_targets", "center_distance")
    ok = soft > hard
    record(8, ok, f"mean center distance soft {soft:.4f} {np.round(sv, 4).tolist()}, "
                  f"hard {hard:.4f} {np.round(hv, 4).tolist()}")
    assert ok


# -- 9: CLI determinism -------------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path):
    spec = {"n_videos": 24, "n_val_videos": 8, "n_test_videos": 8, "frames_per_video": 10,
            "video_dim": 16, "text_dim": 16, "teacher_dim": 16, "seed": 11}
    cfg = {"batch_size": 8, "hidden_size": 16, "heads": 2, "max_epochs": 3, "max_frames": 10,
           "learning_rate": 1e-3, "seed": 5}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    prvr = [sys.executable, "-m", "prvr.cli"]
    subprocess.run(prvr + ["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "d")],
                   check=True, capture_output=True)
    for run in ("a", "b"):
        subprocess.run(prvr + ["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d"),
                               "--out", str(tmp_path / run)], check=True, capture_output=True)
    same_log = (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()
    same_ckpt = (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    ok = same_log and same_ckpt
    record(9, ok, f"two prvr train runs: log identical={same_log}, checkpoint identical={same_ckpt}")
    assert ok


# -- 10: format round trip ------------------------------------------------------------------


def test_criterion_10_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(n_videos=12, n_val_videos=3, n_test_videos=5, n_teachers=2,
                                          frames_per_video=9, video_dim=7, text_dim=5, teacher_dim=3,
                                          seed=10))
    write_dataset(ds, tmp_path / "a")
    back = load_dataset(tmp_path / "a", max_frames=None)

    def digest(d: Dataset) -> str:
        h = hashlib.sha256()
        for v in d.video_ids():
            h.update(np.ascontiguousarray(d.video_features(v), dtype="<f8").tobytes())
            for t in d.manifest.teachers:
                h.update(np.ascontiguousarray(d.teacher_video_features(t, v), dtype="<f8").tobytes())
        for q in sorted(d.queries):
            h.update(np.ascontiguousarray(d.query_features(q), dtype="<f8").tobytes())
            for t in d.manifest.teachers:
                h.update(np.ascontiguousarray(d.teacher_query_features(t, q), dtype="<f8").tobytes())
        return h.hexdigest()

    write_dataset(back, tmp_path / "b")
    same_features = digest(ds) == digest(back)
    same_files = tree_checksums(tmp_path / "a") == tree_checksums(tmp_path / "b")
    same_manifest = back.manifest.to_json() == ds.manifest.to_json()
    ok = same_features and same_files and same_manifest
    record(10, ok, f"feature checksum equal={same_features}, file checksums equal={same_files} "
                   f"({len(tree_checksums(tmp_path / 'a'))} files), manifest equal={same_manifest}")
    assert ok
