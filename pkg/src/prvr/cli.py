"""``prvr`` command line: synth, train, eval, inspect-targets.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .data import SyntheticSpec, generate_synthetic, load_dataset, make_batches, \
    split_videos, write_dataset
from .errors import NumericalError, PrvrError
from .evaluation import (complementarity, grouped_by_mv, margin_report, rank_all, recall_report,
                         write_reports)
from .training import SLOTS, TrainConfig, _targets, branch_similarities, fit, teacher_guidance

log = logging.getLogger("prvr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
_SCHEDULE_KEYS = {"w": "w_schedule", "alpha": "alpha_schedule", "beta": "beta_schedule"}
_RUN_KEYS = {"data", "out", "snapshot_epochs", "schedules"}


class InputError(Exception):
    """Bad command-line input; mapped to exit code 2."""


def _read_json(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be a JSON object")
    return doc


def parse_run_config(doc: dict) -> tuple[TrainConfig, dict]:
    """Split a run config into a TrainConfig and the run-level keys.

    Schedules may be given either as ``w_schedule``-style keys or grouped
    under ``"schedules": {"w": ..., "alpha": ..., "beta": ...}``.
    """
    known = {f.name for f in fields(TrainConfig)} | _RUN_KEYS
    unknown = sorted(set(doc) - known)
    if unknown:
        raise InputError(f"unknown config keys: {unknown}")
    run = {k: doc[k] for k in _RUN_KEYS if k in doc}
    train = {k: v for k, v in doc.items() if k not in _RUN_KEYS}
    for short, spec in (run.pop("schedules", None) or {}).items():
        if short not in _SCHEDULE_KEYS:
            raise InputError(f"unknown schedule {short!r}; expected one of {sorted(_SCHEDULE_KEYS)}")
        train[_SCHEDULE_KEYS[short]] = spec
    return TrainConfig.from_dict(train), run


def _snapshot_path(model_dir: Path, epoch: int) -> Path:
    return model_dir / "snapshots" / f"epoch_{epoch:04d}.ckpt"


def _dims(ds) -> dict[str, int]:
    return {k: int(v) for k, v in ds.manifest.dims.items()}


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_dict(_read_json(args.spec))
    ds = generate_synthetic(spec)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.manifest.videos)} videos, {len(ds.manifest.queries)} queries to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, run = parse_run_config(_read_json(args.config))
    data = args.data or run.get("data")
    out = args.out or run.get("out")
    if not data or not out:
        raise InputError("both a dataset (--data) and an output directory (--out) are required")
    snaps = args.snapshot_epochs if args.snapshot_epochs is not None else run.get("snapshot_epochs", [])
    snaps = sorted({int(e) for e in snaps})
    if any(e < 0 for e in snaps):
        raise InputError("snapshot epochs must be >= 0")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data, max_frames=config.max_frames)
    dims = _dims(ds)
    resolved = {**config.to_dict(), "data": str(data), "out": str(out), "snapshot_epochs": snaps}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
    train_ids, _ = split_videos(ds, config.seed, config.val_fraction)
    steps_per_epoch = len(train_ids) // config.batch_size

    def on_snapshot(epoch, state):
        save_checkpoint(_snapshot_path(out, epoch), state, config, dims,
                        {"epoch": epoch, "step": epoch * steps_per_epoch})

    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(entry):
            fh.write(entry.to_json() + "\n")
            fh.flush()

        try:
            result = fit(config, ds, on_snapshot, frozenset(snaps), on_epoch)
        except NumericalError as exc:
            dump = {"error": str(exc), "batch_ids": list(exc.batch_ids), "details": exc.details}
            (out / "failure.json").write_text(json.dumps(dump, indent=2, default=str) + "\n",
                                              encoding="utf-8")
            print(f"numerical failure: {exc}; diagnostics in {out / 'failure.json'}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(out / "best.ckpt", result.state, config, dims, {"epoch": result.best_epoch})
    print(f"trained {len(result.logs)} epochs; best epoch {result.best_epoch}; "
          f"checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    header = read_header(args.model)
    ds = load_dataset(args.data, max_frames=header["dims"]["max_frames"])
    for key in ("video_dim", "text_dim"):
        if int(header["dims"][key]) != int(ds.manifest.dims[key]):
            raise InputError(f"{key} mismatch: checkpoint {header['dims'][key]} vs "
                             f"dataset {ds.manifest.dims[key]}")
    state, config, _ = load_checkpoint(args.model)
    sigma = config.effective_sigma() if args.sigma is None else args.sigma
    if not 0.0 <= sigma <= 1.0:
        raise InputError(f"--sigma must lie in [0, 1], got {sigma}")
    if args.mv_bins < 1:
        raise InputError("--mv-bins must be >= 1")
    results = rank_all(state, ds, sigma, args.split)
    recall = recall_report(results)
    groups = grouped_by_mv(results, ds, bins=args.mv_bins)
    margins = margin_report(state, ds, sigma, args.split)
    comp = complementarity(state, ds, args.split)
    out = Path(args.out) if args.out else Path(args.model).parent / "eval"
    write_reports(out, recall, groups, margins, comp, {"sigma": sigma, "split": args.split})
    print(json.dumps({"sigma": sigma, **recall.to_dict()}))
    return EXIT_OK


def _write_target_csv(path: Path, matrix: np.ndarray, row_ids, col_ids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *col_ids])
        for rid, row in zip(row_ids, matrix):
            w.writerow([rid, *(f"{x:.9g}" for x in row)])


def cmd_inspect_targets(args) -> int:
    model_dir = Path(args.model)
    if model_dir.is_file():
        model_dir = model_dir.parent
    paths = {e: _snapshot_path(model_dir, e) for e in args.epochs}
    missing = [e for e, p in paths.items() if not p.exists()]
    if missing:
        raise InputError(f"no snapshot for epochs {missing} under {model_dir / 'snapshots'}; "
                         f"train with --snapshot-epochs")
    if args.probe_size < 2:
        raise InputError("--probe-size must be >= 2")
    out = Path(args.out) if args.out else model_dir / "targets"
    out.mkdir(parents=True, exist_ok=True)
    ds = None
    for epoch, path in sorted(paths.items()):
        state, config, header = load_checkpoint(path)
        if ds is None:
            ds = load_dataset(args.data, max_frames=config.max_frames)
            train_ids, _ = split_videos(ds, config.seed, config.val_fraction)
            size = min(args.probe_size, len(train_ids))
            batch = make_batches(ds, size, args.probe_seed, 0, train_ids)[0]
        step = int(header.get("step", 0))
        sched = config.schedules()
        alpha, beta = sched.alpha(epoch, step), sched.beta(epoch, step)
        for slot, role in zip(SLOTS, config.roles()):
            if role is None:
                continue
            if role == "exploration":
                guide = branch_similarities(state.branch(slot), batch)[0].data
            else:
                guide = teacher_guidance(batch)[0]
            targets = _targets(guide, alpha, beta, config)
            stem = f"epoch_{epoch:04d}_{slot}"
            _write_target_csv(out / f"{stem}_t2v.csv", targets.t2v, batch.query_ids, batch.video_ids)
            _write_target_csv(out / f"{stem}_v2t.csv", targets.v2t, batch.video_ids, batch.query_ids)
        print(f"epoch {epoch}: alpha {alpha:.6g} beta {beta:.6g}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prvr", description=__doc__.splitlines()[0],
                                epilog="Set PRVR_THREADS to cap BLAS worker threads.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="run config JSON (training keys, schedules, paths)")
    t.add_argument("--data", help="dataset directory (overrides the config's 'data')")
    t.add_argument("--out", help="output directory (overrides the config's 'out')")
    t.add_argument("--snapshot-epochs", type=_int_list, default=None,
                   help="comma-separated epochs to snapshot; 0 is the initial state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--sigma", type=float, default=None,
                   help="fusion weight of the exploration branch (default: from the checkpoint)")
    e.add_argument("--mv-bins", type=int, default=4, help="number of M/V quantile bins")
    e.add_argument("--split", default="test", help="split to evaluate (default: test)")
    e.add_argument("--out", help="report directory (default: <model dir>/eval)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-targets", help="dump soft targets from training snapshots")
    i.add_argument("--model", required=True, help="training output directory or a checkpoint in it")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--epochs", type=_int_list, required=True, help="comma-separated snapshot epochs")
    i.add_argument("--probe-size", type=int, default=8, help="videos in the probe batch")
    i.add_argument("--probe-seed", type=int, default=0, help="seed choosing the probe batch")
    i.add_argument("--out", help="CSV directory (default: <model dir>/targets)")
    i.set_defaults(func=cmd_inspect_targets)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, PrvrError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
