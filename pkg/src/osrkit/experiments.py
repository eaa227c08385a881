"""Desk-scale experiment suites over the synthetic datasets.

Five wrappers: the training/test variant grid, the outlier-exposure method
comparison, the augmentation comparison, the (cut size, keep ratio) sweep, and
the correlation sweep.  Each wrapper trains per (cell, seed), evaluates with
the MSP score unless noted, and returns a long-format table (cell, seed,
metric, value) with medians appended.  Datasets and training seeds derive
deterministically from (spec, seed), and every wrapper builds its data through
the same helpers, so reduction identities (cut size 0 = plain, keep ratio 1 =
cutout) hold bit-exactly across wrappers.
"""

from __future__ import annotations

import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .errors import CapabilityError, ConfigError, ParameterError
from .mixer import MixConfig, Pairing
from .scoring import compute_scores
from .synthdata import (
    CorrelationSpec,
    LabeledImage,
    VariantKind,
    generate_dataset,
    make_variant,
    relabel,
)
from .training import Augmentation, TrainConfig, train


@dataclass(frozen=True)
class ExperimentSpec:
    """Shared sizing and schedule knobs for one experiment family."""

    name: str = "osr"
    num_known: int = 4
    num_unknown: int = 4
    num_outlier: int = 4
    correlation: float = 0.7
    train_per_class: int = 120
    test_per_class: int = 40
    image_hw: tuple[int, int] = (32, 32)
    epochs: int = 120
    batch_size: int = 16
    lr: float = 0.05
    cut_area: float = 0.25
    mask_keep: float = 0.25
    pairing: Pairing = Pairing.RANDOM
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    score_method: str = "msp"
    workers: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.num_known < 2 or self.num_unknown < 1:
            raise ParameterError("need >= 2 known and >= 1 unknown classes")
        if not self.seeds:
            raise ParameterError("need at least one seed")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")


@dataclass
class ExperimentResult:
    name: str
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)  # cell, seed, metric, value

    def add(self, cell: str, seed, metric: str, value: float) -> None:
        self.rows.append((cell, str(seed), metric, float(value)))

    def seed_values(self, cell: str, metric: str) -> list[float]:
        return [v for c, s, m, v in self.rows if c == cell and m == metric and s != "median"]

    def median(self, cell: str, metric: str) -> float:
        vals = [v for c, s, m, v in self.rows if c == cell and m == metric and s == "median"]
        if len(vals) != 1:
            raise KeyError(f"no median row for ({cell}, {metric})")
        return vals[0]

    def cells(self) -> list[str]:
        seen = dict.fromkeys(c for c, _, _, _ in self.rows)
        return list(seen)

    def append_medians(self) -> None:
        keys = dict.fromkeys((c, m) for c, s, m, _ in self.rows if s != "median")
        for c, m in keys:
            self.add(c, "median", m, statistics.median(self.seed_values(c, m)))

    def save(self, out_dir, manifest: dict) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{self.name}.tsv"), "w", encoding="utf-8") as fh:
            fh.write("experiment\tcell\tseed\tmetric\tvalue\n")
            for cell, seed, metric, value in self.rows:
                fh.write(f"{self.name}\t{cell}\t{seed}\t{metric}\t{value!r}\n")
        with open(os.path.join(out_dir, f"{self.name}.manifest.txt"), "w", encoding="utf-8") as fh:
            for k, v in manifest.items():
                fh.write(f"{k}={v}\n")


def _manifest(spec: ExperimentSpec, **extra) -> dict:
    out = {
        "name": spec.name,
        "num_known": spec.num_known,
        "num_unknown": spec.num_unknown,
        "num_outlier": spec.num_outlier,
        "correlation": repr(spec.correlation),
        "train_per_class": spec.train_per_class,
        "test_per_class": spec.test_per_class,
        "height": spec.image_hw[0],
        "width": spec.image_hw[1],
        "epochs": spec.epochs,
        "batch_size": spec.batch_size,
        "lr": repr(spec.lr),
        "cut_area": repr(spec.cut_area),
        "mask_keep": repr(spec.mask_keep),
        "pairing": spec.pairing.value,
        "seeds": ",".join(str(s) for s in spec.seeds),
        "score_method": spec.score_method,
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# dataset construction shared by every wrapper


def _slice_classes(dataset, class_ids) -> list[LabeledImage]:
    keep = set(class_ids)
    return [img for img in dataset if img.label in keep]


def _gen(spec: ExperimentSpec, num_fg: int, num_bg: int, r: float, per_class: int, seed: int):
    return generate_dataset(
        CorrelationSpec(
            num_fg_classes=num_fg,
            num_bg_classes=num_bg,
            correlation_r=r,
            images_per_class=per_class,
            image_hw=spec.image_hw,
            seed=seed,
        )
    )


def build_osr_data(
    spec: ExperimentSpec,
    seed: int,
    correlation: float | None = None,
    known_test_correlation: float | None = None,
) -> dict:
    """All splits for one trial, keyed by role.

    Known classes are 0..K-1, each with its own background class.  Spurious
    unknowns are fresh foreground classes on the known background pool;
    disjoint unknowns are fresh foreground classes on fresh backgrounds;
    outliers are a third foreground pool on the known backgrounds.

    known_test_correlation decouples the held-out knowns' background usage
    from the training correlation; dose-response sweeps pass 1/K so the test
    set stays background-balanced while only the training mix moves.
    """
    k, u, p = spec.num_known, spec.num_unknown, spec.num_outlier
    r = spec.correlation if correlation is None else correlation
    r_test = r if known_test_correlation is None else known_test_correlation
    base = 101 * (seed + 1)
    known_ids = range(k)
    spurious_ids = range(k, k + u)
    outlier_ids = range(k + u, k + u + p)
    uniform = 1.0 / k  # uniform background usage for the non-known pools
    train_all = _gen(spec, k + u + p, k, r, spec.train_per_class, base)
    test_known = _slice_classes(_gen(spec, k, k, r_test, spec.test_per_class, base + 1), known_ids)
    test_spurious = _slice_classes(
        _gen(spec, k + u, k, uniform, spec.test_per_class, base + 2), spurious_ids
    )
    # fresh glyphs on fresh backgrounds: with K+U background classes, classes K.. map
    # to background classes K.. which the known pool never uses
    test_disjoint = _slice_classes(
        _gen(spec, k + u, k + u, 1.0, spec.test_per_class, base + 3), spurious_ids
    )
    return {
        "train_known": _slice_classes(train_all, known_ids),
        "outliers": relabel(_slice_classes(train_all, outlier_ids), list(outlier_ids)),
        "test_known": test_known,
        "test_spurious": relabel(test_spurious, list(spurious_ids)),
        "test_disjoint": relabel(test_disjoint, list(spurious_ids)),
    }


def _train_config(spec: ExperimentSpec, seed: int, augmentation: Augmentation, **mix_over) -> TrainConfig:
    mix = MixConfig(
        cut_area=mix_over.get("cut_area", spec.cut_area),
        mask_keep=mix_over.get("mask_keep", spec.mask_keep),
        pairing=spec.pairing,
    )
    return TrainConfig(
        epochs=spec.epochs,
        batch_size=spec.batch_size,
        lr=spec.lr,
        augmentation=augmentation,
        mix=mix,
        seed=seed,
    )


def evaluate_osr(model, test_known, test_unknown, num_classes: int, method: str = "msp") -> dict:
    records = compute_scores(model, test_known, method=method, is_known=True, id_prefix="k")
    records += compute_scores(model, test_unknown, method=method, is_known=False, id_prefix="u")
    return metrics_mod.evaluate_records(records, num_classes)


# ---------------------------------------------------------------------------
# per-seed cell functions (module level so process pools can pickle them)


def _variant_cell(spec: ExperimentSpec, seed: int) -> dict:
    data = build_osr_data(spec, seed)
    train_known = data["train_known"]
    if any(img.fg_mask is None for img in train_known):
        raise CapabilityError("variant grid needs foreground masks on every image")
    donor_rng = np.random.default_rng((9001, seed))
    variants = {}
    for kind in VariantKind:
        if kind is VariantKind.RAW:
            variants[kind] = train_known
        elif kind is VariantKind.FG_ONLY:
            variants[kind] = [make_variant(img, kind) for img in train_known]
        else:
            donors = donor_rng.integers(0, len(train_known), size=len(train_known))
            variants[kind] = [
                make_variant(img, kind, donor=train_known[donors[i]])
                for i, img in enumerate(train_known)
            ]
    # test settings; the varied-background setting swaps in unknown-image backgrounds
    swap_rng = np.random.default_rng((9002, seed))
    donors = swap_rng.integers(0, len(data["test_spurious"]), size=len(data["test_known"]))
    varied_known = [
        make_variant(img, VariantKind.FG_PLUS_BG_STAR, donor=data["test_spurious"][donors[i]])
        for i, img in enumerate(data["test_known"])
    ]
    fg_known = [make_variant(img, VariantKind.FG_ONLY) for img in data["test_known"]]
    fg_unknown = [make_variant(img, VariantKind.FG_ONLY) for img in data["test_spurious"]]
    settings = {
        "raw_raw": (data["test_known"], data["test_spurious"]),
        "varied_bg": (varied_known, data["test_spurious"]),
        "fg_only": (fg_known, fg_unknown),
        "ood": (data["test_known"], data["test_disjoint"]),
    }
    out = {}
    for kind, train_set in variants.items():
        result = train(_train_config(spec, seed, Augmentation.NONE), train_set)
        for setting, (ks, us) in settings.items():
            m = evaluate_osr(result.model, ks, us, spec.num_known, spec.score_method)
            cell = f"train={kind.value}|test={setting}"
            out[(cell, "accuracy")] = m["accuracy"]
            out[(cell, "auroc")] = m["auroc"]
    return out


_OE_METHODS = {
    "plain": Augmentation.NONE,
    "oe": Augmentation.OE,
    "catimg": Augmentation.CATIMG,
    "ftavg": Augmentation.FTAVG,
}

_OE_METRICS = ("accuracy", "auroc", "tnr_at_95tpr", "ft_auc", "ft_cos")


def _oe_cell(spec: ExperimentSpec, seed: int) -> dict:
    data = build_osr_data(spec, seed)
    known_labels = {img.label for img in data["train_known"]}
    outlier_source_labels = set(range(spec.num_known + spec.num_unknown,
                                      spec.num_known + spec.num_unknown + spec.num_outlier))
    if known_labels & outlier_source_labels:
        raise ConfigError("outlier pool overlaps the known classes")
    out = {}
    for name, aug in _OE_METHODS.items():
        outliers = data["outliers"] if aug is not Augmentation.NONE else None
        result = train(_train_config(spec, seed, aug), data["train_known"], outliers=outliers)
        m = evaluate_osr(result.model, data["test_known"], data["test_spurious"], spec.num_known,
                         spec.score_method)
        for metric in _OE_METRICS:
            out[(name, metric)] = m[metric]
    return out


_AUG_METHODS = {
    "plain": (Augmentation.NONE, {}),
    "backmix": (Augmentation.BACKMIX, {}),
    "cutout": (Augmentation.CUTOUT, {}),
    "mixup": (Augmentation.MIXUP, {}),
    "cutmix": (Augmentation.CUTMIX, {}),
}


def _aug_cell(spec: ExperimentSpec, seed: int) -> dict:
    data = build_osr_data(spec, seed)
    out = {}
    for name, (aug, over) in _AUG_METHODS.items():
        result = train(_train_config(spec, seed, aug, **over), data["train_known"])
        m = evaluate_osr(result.model, data["test_known"], data["test_spurious"], spec.num_known,
                         spec.score_method)
        out[(name, "accuracy")] = m["accuracy"]
        out[(name, "auroc")] = m["auroc"]
    return out


def _sweep_cell(spec: ExperimentSpec, seed: int, s_values: tuple, k_values: tuple) -> dict:
    data = build_osr_data(spec, seed)
    out = {}
    for s in s_values:
        for kk in k_values:
            cfg = _train_config(spec, seed, Augmentation.BACKMIX, cut_area=s, mask_keep=kk)
            result = train(cfg, data["train_known"])
            m = evaluate_osr(result.model, data["test_known"], data["test_spurious"],
                             spec.num_known, spec.score_method)
            cell = f"s={s}|k={kk}"
            out[(cell, "accuracy")] = m["accuracy"]
            out[(cell, "auroc")] = m["auroc"]
    return out


def _corr_cell(spec: ExperimentSpec, seed: int, r_values: tuple) -> dict:
    out = {}
    for r in r_values:
        # background-balanced knowns: r moves only the training mix
        data = build_osr_data(
            spec, seed, correlation=r, known_test_correlation=1.0 / spec.num_known
        )
        for name, aug in (("plain", Augmentation.NONE), ("backmix", Augmentation.BACKMIX)):
            result = train(_train_config(spec, seed, aug), data["train_known"])
            for split in ("spurious", "disjoint"):
                m = evaluate_osr(result.model, data["test_known"], data[f"test_{split}"],
                                 spec.num_known, spec.score_method)
                cell = f"r={r}|method={name}|unknown={split}"
                out[(cell, "auroc")] = m["auroc"]
                out[(cell, "fpr_at_95tpr")] = m["fpr_at_95tpr"]
    return out


# ---------------------------------------------------------------------------
# wrappers


def _run(spec: ExperimentSpec, cell_fn, extra_args: tuple, manifest_extra: dict) -> ExperimentResult:
    result = ExperimentResult(name=spec.name)
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = {s: pool.submit(cell_fn, spec, s, *extra_args) for s in spec.seeds}
            per_seed = {s: f.result() for s, f in futures.items()}
    else:
        per_seed = {s: cell_fn(spec, s, *extra_args) for s in spec.seeds}
    for s in spec.seeds:
        for (cell, metric), value in per_seed[s].items():
            result.add(cell, s, metric, value)
    result.append_medians()
    if spec.out_dir is not None:
        result.save(spec.out_dir, _manifest(spec, **manifest_extra))
    return result


def run_variant_grid(spec: ExperimentSpec) -> ExperimentResult:
    """Train on each background variant, evaluate under the four test settings."""
    return _run(spec, _variant_cell, (), {"experiment": "variant_grid"})


def run_oe_comparison(spec: ExperimentSpec) -> ExperimentResult:
    """Plain vs outlier-exposure vs image-concat vs feature-average training."""
    return _run(spec, _oe_cell, (), {"experiment": "oe_comparison"})


def run_augmentation_comparison(spec: ExperimentSpec) -> ExperimentResult:
    """Plain vs background-mix vs cutout vs mixup vs cutmix on one recognition split."""
    return _run(spec, _aug_cell, (), {"experiment": "augmentation_comparison"})


def run_param_sweep(s_values, k_values, spec: ExperimentSpec) -> ExperimentResult:
    """Grid over cut sizes and keep ratios; |s_values| x |k_values| cells."""
    s_tuple = tuple(float(s) for s in s_values)
    k_tuple = tuple(float(k) for k in k_values)
    for s in s_tuple:
        if not (0.0 <= s < 1.0):
            raise ParameterError(f"cut size {s} outside [0, 1)")
    for k in k_tuple:
        if not (0.0 <= k <= 1.0):
            raise ParameterError(f"keep ratio {k} outside [0, 1]")
    return _run(
        spec,
        _sweep_cell,
        (s_tuple, k_tuple),
        {"experiment": "param_sweep", "s_values": ",".join(map(repr, s_tuple)),
         "k_values": ",".join(map(repr, k_tuple))},
    )


def run_correlation_sweep(r_values, spec: ExperimentSpec) -> ExperimentResult:
    """Plain and background-mix across correlation levels, two unknown splits each."""
    r_tuple = tuple(float(r) for r in r_values)
    for r in r_tuple:
        if not (1.0 / spec.num_known <= r <= 1.0):
            raise ParameterError(
                f"correlation {r} outside [{1.0 / spec.num_known}, 1] for {spec.num_known} backgrounds"
            )
    return _run(
        spec,
        _corr_cell,
        (r_tuple,),
        {"experiment": "correlation_sweep", "r_values": ",".join(map(repr, r_tuple))},
    )
