"""Command-line entry point.

Ten subcommands cover the pipeline: synth, train, score, eval, the four
experiment suites, theory-check, and report.  Every subcommand accepts
``--config FILE`` plus repeated ``--set key=value`` overrides (overrides win).
Relative output paths resolve under $OSRKIT_OUT when that variable is set.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 numerical.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config as cfg_mod
from .errors import ConfigError, DataError, NumericalError, OsrkitError

OUT_ENV = "OSRKIT_OUT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _write_manifest(path: str, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            if isinstance(value, tuple):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            fh.write(f"{key}={value}\n")


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_synth(cfg: dict) -> int:
    from .synthdata import CorrelationSpec, generate_dataset, relabel, save_dataset, split_known_unknown

    cfg_mod.require(cfg, ("out", "num_fg", "num_bg"), "synth")
    spec = CorrelationSpec(
        num_fg_classes=cfg["num_fg"],
        num_bg_classes=cfg["num_bg"],
        correlation_r=cfg.get("correlation", 1.0),
        images_per_class=cfg.get("per_class", 20),
        image_hw=(cfg.get("height", 32), cfg.get("width", 32)),
        seed=cfg.get("seed", 0),
    )
    dataset = generate_dataset(spec)
    splits = {"all": dataset}
    if "known" in cfg:
        known, unknown = split_known_unknown(dataset, cfg["known"])
        splits["known"] = relabel(known, sorted(cfg["known"]))
        splits["unknown"] = unknown
    out = _resolve_out(cfg["out"])
    save_dataset(out, splits, spec)
    print(f"wrote {len(dataset)} images to {out} (splits: {', '.join(splits)})")
    return 0


def _load_split(directory: str, split: str):
    from .synthdata import load_dataset

    splits, _ = load_dataset(directory)
    if split not in splits:
        raise DataError(f"split {split!r} not in {directory} (has: {', '.join(splits)})")
    return splits[split]


def _cmd_train(cfg: dict) -> int:
    from .cambank import save_bank
    from .mixer import MixConfig, Pairing
    from .model import save_model
    from .training import Augmentation, TrainConfig, train

    cfg_mod.require(cfg, ("data", "out", "epochs"), "train")
    try:
        aug = Augmentation(cfg.get("augmentation", "none"))
    except ValueError as e:
        raise ConfigError(f"unknown augmentation {cfg.get('augmentation')!r}") from e
    try:
        pairing = Pairing(cfg.get("pairing", "random"))
    except ValueError as e:
        raise ConfigError(f"unknown pairing {cfg.get('pairing')!r}") from e
    mix = MixConfig(
        cut_area=cfg.get("cut_area", 0.25),
        mask_keep=cfg.get("mask_keep", 0.25),
        pairing=pairing,
    )
    tc = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg.get("batch_size", 128),
        lr=cfg.get("lr", 0.1),
        momentum=cfg.get("momentum", 0.9),
        weight_decay=cfg.get("weight_decay", 5e-4),
        augmentation=aug,
        mix=mix,
        oe_alpha=cfg.get("oe_alpha", 0.5),
        mixup_alpha=cfg.get("mixup_alpha", 1.0),
        ema_beta=cfg.get("ema_beta", 0.1),
        cam_source=cfg.get("cam_source", "original"),
        seed=cfg.get("seed", 0),
    )
    dataset = _load_split(cfg["data"], cfg.get("split", "all"))
    outliers = None
    if "outlier_data" in cfg:
        outliers = _load_split(cfg["outlier_data"], cfg.get("outlier_split", "all"))
    ckpt = _resolve_out(cfg["checkpoint_dir"]) if "checkpoint_dir" in cfg else None
    result = train(tc, dataset, outliers=outliers, checkpoint_dir=ckpt)
    out = _resolve_out(cfg["out"])
    out_dir = os.path.dirname(out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_model(result.model, out, seed=tc.seed)
    if result.bank is not None:
        save_bank(result.bank, out + ".bank")
    _write_manifest(out + ".manifest.txt", cfg)
    final = result.loss_history[-1] if result.loss_history else float("nan")
    print(f"trained {aug.value} for {tc.epochs} epochs; final loss {final:.4f}; wrote {out}")
    return 0


def _cmd_score(cfg: dict) -> int:
    from .model import load_model
    from .scoring import compute_scores, entropy_summary, write_score_file

    cfg_mod.require(cfg, ("model", "data", "known", "out"), "score")
    model, _, _ = load_model(cfg["model"])
    dataset = _load_split(cfg["data"], cfg.get("split", "all"))
    records = compute_scores(
        model,
        dataset,
        method=cfg.get("method", "msp"),
        is_known=cfg["known"],
        temperature=cfg.get("temperature"),
        eps=cfg.get("eps", 0.0014),
        id_prefix="k" if cfg["known"] else "u",
    )
    out = _resolve_out(cfg["out"])
    out_dir = os.path.dirname(out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    write_score_file(out, records)
    summary = entropy_summary(model, dataset)
    with open(out + ".stats.txt", "w", encoding="utf-8") as fh:
        for key in sorted(summary):
            fh.write(f"{key}={summary[key]!r}\n")
    _write_manifest(out + ".manifest.txt", cfg)
    print(f"scored {len(records)} images with {cfg.get('method', 'msp')}; wrote {out}")
    return 0


def _cmd_eval(cfg: dict, score_paths) -> int:
    from .metrics import evaluate_records, write_report
    from .scoring import read_score_file

    paths = list(score_paths or ())
    if "scores" in cfg:
        paths += [p for p in cfg["scores"].split(",") if p]
    if not paths:
        raise ConfigError("eval needs score files (--scores or scores=)")
    records = []
    for p in paths:
        records += read_score_file(p)
    if not records:
        raise DataError("score files contained no records")
    num_classes = max(max(r.true_label, r.predicted_label) for r in records if r.is_known) + 1
    metrics = evaluate_records(records, num_classes)
    name = cfg.get("name", "eval")
    rows = [(name, key, metrics[key]) for key in sorted(metrics)]
    if "out" in cfg:
        out = _resolve_out(cfg["out"])
        out_dir = os.path.dirname(out)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        write_report(out, rows)
    for _, key, value in rows:
        print(f"{key}\t{value!r}")
    return 0


def _experiment_spec(cfg: dict, name: str):
    from .experiments import ExperimentSpec
    from .mixer import Pairing

    try:
        pairing = Pairing(cfg.get("pairing", "random"))
    except ValueError as e:
        raise ConfigError(f"unknown pairing {cfg.get('pairing')!r}") from e
    kwargs = dict(
        name=name,
        correlation=cfg.get("correlation", 0.9),
        image_hw=(cfg.get("height", 32), cfg.get("width", 32)),
        pairing=pairing,
        out_dir=_resolve_out(cfg["out"]) if "out" in cfg else None,
    )
    for key in (
        "num_known",
        "num_unknown",
        "num_outlier",
        "train_per_class",
        "test_per_class",
        "epochs",
        "batch_size",
        "lr",
        "cut_area",
        "mask_keep",
        "seeds",
        "score_method",
        "workers",
    ):
        if key in cfg:
            kwargs[key] = cfg[key]
    return ExperimentSpec(**kwargs)


def _print_medians(result) -> None:
    for cell in result.cells():
        metrics = sorted({m for c, s, m, _ in result.rows if c == cell})
        parts = "\t".join(f"{m}={result.median(cell, m):.4f}" for m in metrics)
        print(f"{cell}\t{parts}")


def _cmd_experiment(cfg: dict, which: str) -> int:
    from . import experiments as exp

    if which == "sweep":
        cfg_mod.require(cfg, ("s_values", "k_values"), "sweep")
        spec = _experiment_spec(cfg, "param_sweep")
        result = exp.run_param_sweep(cfg["s_values"], cfg["k_values"], spec)
    elif which == "corr-sweep":
        cfg_mod.require(cfg, ("r_values",), "corr-sweep")
        spec = _experiment_spec(cfg, "correlation_sweep")
        result = exp.run_correlation_sweep(cfg["r_values"], spec)
    elif which == "oe-exp":
        spec = _experiment_spec(cfg, "oe_comparison")
        result = exp.run_oe_comparison(spec)
    else:
        spec = _experiment_spec(cfg, "variant_grid")
        result = exp.run_variant_grid(spec)
    _print_medians(result)
    if spec.out_dir is not None:
        print(f"wrote {os.path.join(spec.out_dir, result.name + '.tsv')}")
    return 0


def _cmd_theory_check(cfg: dict) -> int:
    from . import theory

    n = cfg.get("n", 1000)
    tol = cfg.get("tol", 1e-9)
    rng = np.random.default_rng(cfg.get("seed", 0))
    worst = {
        "decomposition": 0.0,
        "constant_background": 0.0,
        "orthogonal_pooling": 0.0,
        "chain_rule": 0.0,
    }
    for _ in range(n):
        ind = theory.random_background_independent_joint(rng)
        worst["decomposition"] = max(worst["decomposition"], theory.check_decomposition(ind))
        const = theory.random_background_independent_joint(rng, nb=1)
        worst["constant_background"] = max(
            worst["constant_background"],
            theory.check_residual_vanishes(const, theory.BackgroundMode.CONSTANT),
        )
        orth = theory.random_background_independent_joint(rng, rule=theory.PoolRule.CONCAT)
        worst["orthogonal_pooling"] = max(
            worst["orthogonal_pooling"],
            theory.check_residual_vanishes(orth, theory.BackgroundMode.ORTHOGONAL),
        )
        anyj = theory.random_joint(rng)
        worst["chain_rule"] = max(worst["chain_rule"], theory.chain_rule_residual(anyj))
    for key in sorted(worst):
        print(f"{key}_max_residual={worst[key]!r}")
    bad = {k: v for k, v in worst.items() if v >= tol}
    if bad:
        raise NumericalError(f"residuals at or above {tol!r}: {bad}")
    return 0


def _cmd_report(cfg: dict, path_arg) -> int:
    path = path_arg or cfg.get("path")
    if not path:
        raise ConfigError("report needs a table path")
    if not os.path.exists(path):
        raise DataError(f"no table at {path}")
    with open(path, encoding="utf-8") as fh:
        table = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    if not table:
        raise DataError(f"table {path} is empty")
    widths = [max(len(row[i]) if i < len(row) else 0 for row in table) for i in range(max(map(len, table)))]
    for row in table:
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

_SCHEMAS = {
    "synth": cfg_mod.SYNTH_SCHEMA,
    "train": cfg_mod.TRAIN_SCHEMA,
    "score": cfg_mod.SCORE_SCHEMA,
    "eval": cfg_mod.EVAL_SCHEMA,
    "sweep": cfg_mod.EXPERIMENT_SCHEMA,
    "oe-exp": cfg_mod.EXPERIMENT_SCHEMA,
    "variant-grid": cfg_mod.EXPERIMENT_SCHEMA,
    "corr-sweep": cfg_mod.EXPERIMENT_SCHEMA,
    "theory-check": cfg_mod.THEORY_SCHEMA,
    "report": cfg_mod.REPORT_SCHEMA,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osrkit",
        description="Open set recognition experiments on synthetic foreground/background data.",
        epilog=f"Relative output paths resolve under ${OUT_ENV} when it is set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset directory"),
        ("train", "train one model from a dataset directory"),
        ("score", "score a dataset split with a trained model"),
        ("eval", "compute metrics from score files"),
        ("sweep", "cut-size / keep-ratio grid experiment"),
        ("oe-exp", "outlier-exposure method comparison"),
        ("variant-grid", "background-variant training/test grid"),
        ("corr-sweep", "correlation sweep experiment"),
        ("theory-check", "verify the information decomposition numerically"),
        ("report", "pretty-print a result table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if name == "eval":
            p.add_argument("--scores", action="append", metavar="FILE", help="score file (repeatable)")
        if name == "theory-check":
            p.add_argument("--n", type=int, help="number of random joints per check")
            p.add_argument("--seed", type=int, help="generator seed")
            p.add_argument("--tol", type=float, help="residual tolerance")
        if name == "report":
            p.add_argument("path", nargs="?", help="table file to print")
    return parser


def run(args) -> int:
    cfg = cfg_mod.load(args.config, args.set, _SCHEMAS[args.command], args.command)
    if args.command == "theory-check":
        for key in ("n", "seed", "tol"):
            value = getattr(args, key)
            if value is not None:
                cfg[key] = value
    if args.command == "synth":
        return _cmd_synth(cfg)
    if args.command == "train":
        return _cmd_train(cfg)
    if args.command == "score":
        return _cmd_score(cfg)
    if args.command == "eval":
        return _cmd_eval(cfg, args.scores)
    if args.command in ("sweep", "oe-exp", "variant-grid", "corr-sweep"):
        return _cmd_experiment(cfg, args.command)
    if args.command == "theory-check":
        return _cmd_theory_check(cfg)
    return _cmd_report(cfg, args.path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 5
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 4
    except OsrkitError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
