"""``dtr`` command line: train / sweep / ablate / eval / export.

Every invocation writes into a fresh timestamped run directory under
``--out`` (or ``$DTR_OUT``) and prints that directory on stdout. Failures
print one JSON line ``{"error": kind, "message": ...}`` on stderr and exit
with 2 (config), 3 (data), 4 (numeric divergence) or 1 (other I/O).
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config, run_config_from_dict
from .data import DataFormatError, LabeledDataset, ShiftSpec, load_idx_subset, make_shift_task
from .evaluation import (
    eval_labels,
    evaluate,
    head_accuracies,
    make_evaluator,
    pca_project,
    run_ablation,
    run_sensitivity_sweep,
    write_projection_csv,
    write_table_csv,
)
from .model import Dims, NetworkEnsemble, PrototypeBank, forward_all
from .nn import load_json, save_json
from .rng import SplitMix64
from .trainer import TrainingDiverged, train

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
CHECKPOINT_FORMAT = "dtr-checkpoint/1"

log = logging.getLogger("dtr")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------- data

def spec_from_data_config(d) -> ShiftSpec:
    return ShiftSpec(
        base=d.kind, n_classes=d.n_classes, input_dim=d.input_dim, radius=d.radius,
        cluster_std=d.cluster_std, rotation_deg=d.rotation_deg, translation=d.translation,
        scale=d.scale, class_noise=d.class_noise, outlier_fraction=d.outlier_fraction,
        outlier_shift=d.outlier_shift, standardize=d.standardize,
    )


def build_datasets(cfg: RunConfig, seed: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    seed = d.seed if seed is None else seed
    try:
        if d.kind == "idx":
            src = load_idx_subset(d.source_images, d.source_labels, d.per_class, d.resize_to,
                                  seed, "source", d.n_classes)
            tgt = load_idx_subset(d.target_images, d.target_labels, d.per_class, d.resize_to,
                                  seed, "target", d.n_classes)
            return src, tgt
        return make_shift_task(spec_from_data_config(d), d.n_source, d.n_target, seed)
    except (DataFormatError, OSError) as exc:
        raise CliError("data", EXIT_DATA, str(exc)) from None
    except ValueError as exc:
        raise CliError("config", EXIT_CONFIG, str(exc)) from None


DIGIT_DIMS = {"d_g": 128, "d_di": 64, "d_ds": 16, "hidden": 128}


def sync_dims(cfg: RunConfig, source: LabeledDataset) -> None:
    """The data decides input width and class count.

    Digit subsets get wider default features unless the widths were set explicitly.
    """
    dims = cfg.train.dims
    if cfg.data.kind == "idx" and all(getattr(dims, k) == getattr(Dims(), k) for k in DIGIT_DIMS):
        for k, v in DIGIT_DIMS.items():
            setattr(dims, k, v)
    dims.input_dim = source.input_dim
    dims.n_classes = cfg.data.n_classes


class DataFactory:
    """Picklable per-seed dataset builder for the sweep drivers."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def __call__(self, seed: int):
        c = copy.deepcopy(self.cfg)
        c.data.seed = seed
        return build_datasets(c)


# ---------------------------------------------------------------- run dirs / artifacts

def make_run_dir(out: str | None, command: str) -> Path:
    root = Path(os.environ.get("DTR_OUT") or out or "runs")
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = root / f"{command}-{stamp}"
    n = 0
    while run.exists():
        n += 1
        run = root / f"{command}-{stamp}-{n}"
    run.mkdir(parents=True)
    return run


def write_config_echo(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def checkpoint_doc(cfg: RunConfig, state) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "step": state.step,
        "params": state.ensemble.to_json(),
        "bank": state.bank.to_json(),
        "last_refresh_step": state.bank.last_refresh_step,
        "rng": {"source": state.rng_source.state(), "target": state.rng_target.state()},
    }


def load_checkpoint(path: str | Path) -> tuple[RunConfig, NetworkEnsemble, PrototypeBank, int]:
    try:
        doc = load_json(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError("io", EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CliError("data", EXIT_DATA, f"{path}: not a {CHECKPOINT_FORMAT} document")
    cfg = run_config_from_dict(doc["config"])
    ens = NetworkEnsemble.create(cfg.train.dims, SplitMix64(0), conditional=cfg.train.mode != "dann")
    try:
        ens.load_json(doc["params"])
    except ValueError as exc:
        raise CliError("config", EXIT_CONFIG, f"checkpoint/config dimension mismatch: {exc}") from None
    bank = PrototypeBank.from_json(doc["bank"])
    return cfg, ens, bank, int(doc["step"])


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_cli_config(args)
    source, target = build_datasets(cfg)
    sync_dims(cfg, source)
    run_dir = make_run_dir(args.out, "train")
    write_config_echo(run_dir, cfg)
    metrics = open(run_dir / "metrics.jsonl", "w")

    def emit(record):
        metrics.write(json.dumps(record, default=_json_default) + "\n")
        metrics.flush()

    try:
        state, history = train(cfg.train, source, target.without_seal(),
                               evaluator=make_evaluator(source, target), on_record=emit)
    except TrainingDiverged as exc:
        raise CliError("numeric", EXIT_NUMERIC, str(exc)) from None
    finally:
        metrics.close()
    save_json(run_dir / "checkpoint.json", checkpoint_doc(cfg, state))
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("config", EXIT_CONFIG, "eval requires --checkpoint")
    cfg, ens, bank, step = load_checkpoint(args.checkpoint)
    source, target = build_datasets(cfg)
    if source.input_dim != cfg.train.dims.input_dim:
        raise CliError("config", EXIT_CONFIG,
                       f"checkpoint/config dimension mismatch: data input_dim {source.input_dim} "
                       f"vs checkpoint {cfg.train.dims.input_dim}")
    run_dir = make_run_dir(args.out, "eval")
    acc = head_accuracies(ens, source, target)
    summary = {"step": step, **acc}
    if not args.fast:
        rep = evaluate(ens, bank, source, target, step, seed=cfg.train.seed)
        summary.update(a_distance_raw=rep.a_distance_raw, a_distance_di=rep.a_distance_di,
                       mean_proto_dist_src=rep.mean_proto_dist_src,
                       mean_proto_dist_tgt=rep.mean_proto_dist_tgt)
    (run_dir / "eval.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    print(run_dir)
    return EXIT_OK


def _seeds(args, cfg: RunConfig) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.train.seed + i for i in range(args.n_seeds)]


def cmd_sweep(args) -> int:
    cfg = load_cli_config(args)
    if cfg.train.mode != "dtr":
        raise CliError("config", EXIT_CONFIG, "sweep requires mode=dtr")
    source, _ = build_datasets(cfg)
    sync_dims(cfg, source)
    run_dir = make_run_dir(args.out, "sweep")
    write_config_echo(run_dir, cfg)
    r_values = [int(r) for r in args.r_values.split(",")]
    try:
        rows = run_sensitivity_sweep(cfg.train, DataFactory(cfg), _seeds(args, cfg), r_values, args.jobs)
    except TrainingDiverged as exc:
        raise CliError("numeric", EXIT_NUMERIC, str(exc)) from None
    (run_dir / "tables").mkdir()
    write_table_csv(run_dir / "tables" / "sensitivity.csv", rows,
                    ["r", "mean", "std", "median", "min", "max", "n_seeds"])
    (run_dir / "summary.json").write_text(json.dumps({"rows": rows}, indent=2))
    print(run_dir)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_cli_config(args)
    source, _ = build_datasets(cfg)
    sync_dims(cfg, source)
    run_dir = make_run_dir(args.out, "ablate")
    write_config_echo(run_dir, cfg)
    try:
        rows, summary = run_ablation(cfg.train, DataFactory(cfg), _seeds(args, cfg), args.jobs)
    except TrainingDiverged as exc:
        raise CliError("numeric", EXIT_NUMERIC, str(exc)) from None
    (run_dir / "tables").mkdir()
    write_table_csv(run_dir / "tables" / "ablation.csv", rows,
                    ["method", "mode", "mean", "std", "median", "min", "max", "n_seeds"])
    summary["d_equals_d_r_per_seed"] = {str(k): v for k, v in summary["d_equals_d_r_per_seed"].items()}
    (run_dir / "summary.json").write_text(json.dumps({"rows": rows, **summary}, indent=2))
    log.info("B >= D in median: %s (observed direction, not enforced)", summary["b_ge_d_median"])
    print(run_dir)
    return EXIT_OK


def _export_one(run_dir: Path, tag: str, ens: NetworkEnsemble, source, target) -> None:
    feats = {"raw": [], "di": []}
    labels, domains = [], []
    for ds in (source, target):
        b = forward_all(ens, ds.features)
        feats["raw"].append(b.f_g.data)
        feats["di"].append(b.f_di.data)
        labels.append(eval_labels(ds))
        domains += [ds.domain] * ds.n
    y = np.concatenate(labels)
    for kind, parts in feats.items():
        proj = pca_project(np.concatenate(parts))
        write_projection_csv(run_dir / "projections" / f"{kind}_{tag}.csv", proj.coords, y, domains)


def cmd_export(args) -> int:
    if not args.checkpoint:
        raise CliError("config", EXIT_CONFIG, "export requires --checkpoint")
    cfg, ens, _, _ = load_checkpoint(args.checkpoint)
    source, target = build_datasets(cfg)
    run_dir = make_run_dir(args.out, "export")
    (run_dir / "projections").mkdir()
    _export_one(run_dir, "post", ens, source, target)
    if args.pre_checkpoint:
        _, pre, _, _ = load_checkpoint(args.pre_checkpoint)
        _export_one(run_dir, "pre", pre, source, target)
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------- plumbing

def load_cli_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set mode=dtr --set data.rotation_deg=30")
    common.add_argument("--out", help="output root (env DTR_OUT takes precedence)")
    common.add_argument("--jobs", type=int, default=1, help="parallel training jobs for sweep/ablate")
    common.add_argument("--seed", type=int, help="sets both train.seed and data.seed")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dtr", description="Disentanglement-then-reconstruction domain adaptation")
    p.add_argument("--version", action="version", version=f"dtr {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one model")
    for name, helptext in (("sweep", "reconstruction-interval sensitivity table"),
                           ("ablate", "B / D / D+R / DTR ablation table")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--seeds", help="comma-separated seeds (default: seed..seed+n_seeds-1)")
        sp.add_argument("--n-seeds", dest="n_seeds", type=int, default=5)
        if name == "sweep":
            sp.add_argument("--r-values", dest="r_values", default="1,3,5,7,9")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=False)
    ev.add_argument("--fast", action="store_true", help="accuracies only; skip A-distance probes")
    ex = sub.add_parser("export", parents=[common], help="PCA projections of f_g and f_di")
    ex.add_argument("--checkpoint")
    ex.add_argument("--pre-checkpoint", dest="pre_checkpoint")
    return p


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate, "eval": cmd_eval, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        err, code = {"error": exc.kind, "message": str(exc)}, exc.code
    except ConfigError as exc:
        err, code = {"error": "config", "field": exc.field, "message": exc.message}, EXIT_CONFIG
    except OSError as exc:
        err, code = {"error": "io", "message": str(exc)}, EXIT_IO
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
