"""Experiment wrapper contracts at toy scale: shapes, determinism, reductions."""

import pytest

from osrkit.errors import ParameterError
from osrkit.experiments import (
    ExperimentResult,
    ExperimentSpec,
    build_osr_data,
    run_augmentation_comparison,
    run_correlation_sweep,
    run_oe_comparison,
    run_param_sweep,
    run_variant_grid,
)


def tiny_spec(**kw):
    base = dict(
        name="toy",
        num_known=2,
        num_unknown=2,
        num_outlier=2,
        correlation=0.6,
        train_per_class=4,
        test_per_class=2,
        image_hw=(16, 16),
        epochs=1,
        batch_size=4,
        lr=0.05,
        seeds=(0,),
    )
    base.update(kw)
    return ExperimentSpec(**base)


# --- spec and result plumbing ----------------------------------------------


def test_spec_validation():
    with pytest.raises(ParameterError):
        tiny_spec(num_known=1)
    with pytest.raises(ParameterError):
        tiny_spec(num_unknown=0)
    with pytest.raises(ParameterError):
        tiny_spec(seeds=())
    with pytest.raises(ParameterError):
        tiny_spec(workers=0)


def test_result_accumulation_and_medians():
    res = ExperimentResult(name="t")
    for seed, v in enumerate((0.2, 0.8, 0.5)):
        res.add("a", seed, "auroc", v)
    res.append_medians()
    assert res.seed_values("a", "auroc") == [0.2, 0.8, 0.5]
    assert res.median("a", "auroc") == 0.5
    assert res.cells() == ["a"]
    with pytest.raises(KeyError):
        res.median("a", "accuracy")


def test_result_save_format(tmp_path):
    res = ExperimentResult(name="t")
    res.add("cell", 0, "auroc", 0.5)
    res.append_medians()
    res.save(tmp_path, {"alpha": 1})
    lines = (tmp_path / "t.tsv").read_text().splitlines()
    assert lines[0] == "experiment\tcell\tseed\tmetric\tvalue"
    assert lines[1] == "t\tcell\t0\tauroc\t0.5"
    assert lines[2] == "t\tcell\tmedian\tauroc\t0.5"
    assert (tmp_path / "t.manifest.txt").read_text() == "alpha=1\n"


# --- dataset assembly -------------------------------------------------------


def test_build_osr_data_splits():
    spec = tiny_spec()
    data = build_osr_data(spec, seed=0)
    assert set(data) == {"train_known", "outliers", "test_known", "test_spurious", "test_disjoint"}
    assert {img.label for img in data["train_known"]} == {0, 1}
    assert len(data["train_known"]) == 2 * 4
    # auxiliary pools come back relabeled from zero
    assert {img.label for img in data["outliers"]} == {0, 1}
    assert {img.label for img in data["test_spurious"]} == {0, 1}
    assert len(data["test_known"]) == 2 * 2


def test_build_osr_data_deterministic_and_r_override():
    spec = tiny_spec()
    a = build_osr_data(spec, seed=3)
    b = build_osr_data(spec, seed=3)
    for key in a:
        assert all(
            (x.pixels == y.pixels).all() and x.label == y.label
            for x, y in zip(a[key], b[key])
        )
    c = build_osr_data(spec, seed=3, correlation=1.0)
    assert any(
        (x.pixels != y.pixels).any()
        for x, y in zip(a["train_known"], c["train_known"])
    )
    # held-out pools ignore the training correlation
    for key in ("test_spurious", "test_disjoint"):
        assert all((x.pixels == y.pixels).all() for x, y in zip(a[key], c[key]))


def test_disjoint_pool_differs_from_spurious():
    spec = tiny_spec()
    data = build_osr_data(spec, seed=1)
    assert {img.label for img in data["test_disjoint"]} == {0, 1}
    assert len(data["test_disjoint"]) == len(data["test_spurious"])
    assert any(
        (a.pixels != b.pixels).any()
        for a, b in zip(data["test_disjoint"], data["test_spurious"])
    )


# --- wrappers at toy scale --------------------------------------------------


def test_augmentation_comparison_cells_and_metrics():
    res = run_augmentation_comparison(tiny_spec())
    assert sorted(res.cells()) == ["backmix", "cutmix", "cutout", "mixup", "plain"]
    for cell in res.cells():
        for metric in ("accuracy", "auroc"):
            assert len(res.seed_values(cell, metric)) == 1
            res.median(cell, metric)


def test_param_sweep_reductions_match_other_wrappers():
    spec = tiny_spec()
    sweep = run_param_sweep((0.0, 0.25), (0.25, 1.0), spec)
    aug = run_augmentation_comparison(spec)
    # cut size 0 trains bit-identically to plain, keep ratio 1 to cutout,
    # and all wrappers share the dataset construction, so metrics are equal
    for metric in ("accuracy", "auroc"):
        assert sweep.median("s=0.0|k=0.25", metric) == aug.median("plain", metric)
        assert sweep.median("s=0.0|k=1.0", metric) == aug.median("plain", metric)
        assert sweep.median("s=0.25|k=1.0", metric) == aug.median("cutout", metric)
    assert len(sweep.cells()) == 4


def test_param_sweep_validation():
    with pytest.raises(ParameterError):
        run_param_sweep((1.0,), (0.5,), tiny_spec())
    with pytest.raises(ParameterError):
        run_param_sweep((0.25,), (1.5,), tiny_spec())


def test_oe_comparison_cells_and_metrics():
    res = run_oe_comparison(tiny_spec())
    assert sorted(res.cells()) == ["catimg", "ftavg", "oe", "plain"]
    for cell in res.cells():
        for metric in ("accuracy", "auroc", "tnr_at_95tpr", "ft_auc", "ft_cos"):
            res.median(cell, metric)


def test_variant_grid_cells():
    res = run_variant_grid(tiny_spec())
    cells = res.cells()
    assert len(cells) == 16  # 4 training variants x 4 test settings
    trains = {c.split("|")[0] for c in cells}
    tests = {c.split("|")[1] for c in cells}
    assert trains == {
        "train=raw",
        "train=fg_only",
        "train=fg_plus_raw_star",
        "train=fg_plus_bg_star",
    }
    assert tests == {"test=raw_raw", "test=varied_bg", "test=fg_only", "test=ood"}


def test_correlation_sweep_cells_and_validation():
    res = run_correlation_sweep((0.6, 1.0), tiny_spec())
    assert len(res.cells()) == 2 * 2 * 2  # r x method x unknown split
    res.median("r=0.6|method=plain|unknown=spurious", "auroc")
    res.median("r=1.0|method=backmix|unknown=disjoint", "fpr_at_95tpr")
    with pytest.raises(ParameterError):
        run_correlation_sweep((0.3,), tiny_spec())  # below 1/num_known


def test_wrapper_determinism_and_saving(tmp_path):
    spec = tiny_spec(out_dir=str(tmp_path))
    a = run_augmentation_comparison(spec)
    b = run_augmentation_comparison(spec)
    assert a.rows == b.rows
    assert (tmp_path / "toy.tsv").exists()
    manifest = (tmp_path / "toy.manifest.txt").read_text()
    assert "experiment=augmentation_comparison\n" in manifest
    assert "correlation=0.6\n" in manifest


def test_parallel_workers_match_serial():
    serial = run_augmentation_comparison(tiny_spec(seeds=(0, 1)))
    parallel = run_augmentation_comparison(tiny_spec(seeds=(0, 1), workers=2))
    assert serial.rows == parallel.rows
