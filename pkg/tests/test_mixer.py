"""Mix operators: geometry, the paste algebra, reductions, pairing."""

import numpy as np
import pytest

from osrkit.errors import (
    GeometryError,
    PairingError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from osrkit.mixer import (
    CutRegion,
    MixConfig,
    Pairing,
    backmix,
    cutmix,
    cutout,
    mixup,
    pair_batch,
    sample_cut_region,
)

RNG = lambda s=0: np.random.default_rng(s)


def _img(seed, h=8, w=8, c=3):
    return np.random.default_rng(seed).random((h, w, c)).astype(np.float32)


# --- MixConfig and CutRegion ------------------------------------------------


def test_mixconfig_defaults():
    cfg = MixConfig()
    assert cfg.cut_area == 0.25 and cfg.mask_keep == 0.25
    assert cfg.pairing is Pairing.RANDOM and not cfg.allow_self_pair


@pytest.mark.parametrize("kw", [{"cut_area": 1.0}, {"cut_area": -0.1}, {"mask_keep": 1.2}])
def test_mixconfig_rejects_out_of_range(kw):
    with pytest.raises(ParameterError):
        MixConfig(**kw)


def test_cutregion_mask_and_area():
    r = CutRegion(1, 2, 3, (8, 8))
    m = r.mask()
    assert r.area == 9 and int(m.sum()) == 9
    assert m[1:4, 2:5].all() and m[0].sum() == 0 and m[:, 0].sum() == 0


def test_cutregion_bounds_checked():
    with pytest.raises(GeometryError):
        CutRegion(6, 0, 3, (8, 8))
    with pytest.raises(GeometryError):
        CutRegion(-1, 0, 2, (8, 8))


# --- sample_cut_region ------------------------------------------------------


def test_region_side_rounding():
    # side = round_half_up(sqrt(s) * min(H, W))
    r = sample_cut_region((32, 32), 0.25, RNG())
    assert r.side == 16
    r = sample_cut_region((32, 32), 0.5, RNG())
    assert r.side == 23  # sqrt(0.5)*32 = 22.63
    r = sample_cut_region((10, 6), 0.25, RNG())
    assert r.side == 3


def test_region_zero_area_is_empty():
    r = sample_cut_region((8, 8), 0.0, RNG())
    assert r.empty and r.area == 0 and r.mask().sum() == 0


def test_region_tiny_area_rounds_to_empty():
    # sqrt(0.001)*8 = 0.253 -> side 0
    assert sample_cut_region((8, 8), 0.001, RNG()).empty


def test_region_stays_inside_bounds():
    rng = RNG(3)
    for _ in range(300):
        r = sample_cut_region((16, 12), 0.3, rng)
        assert 0 <= r.row <= 16 - r.side and 0 <= r.col <= 12 - r.side


def test_region_placement_covers_full_range():
    rng = RNG(4)
    rows = {sample_cut_region((32, 32), 0.25, rng).row for _ in range(500)}
    assert min(rows) == 0 and max(rows) == 16  # every legal offset reachable


def test_region_rejects_bad_inputs():
    with pytest.raises(ParameterError):
        sample_cut_region((8, 8), 1.0, RNG())
    with pytest.raises(GeometryError):
        sample_cut_region((0, 8), 0.25, RNG())


# --- backmix paste algebra --------------------------------------------------


def test_backmix_piecewise_values():
    # inside the window: partner-bg pixels pass through, partner-fg pixels
    # become zero; outside: target bit-exact
    xt, xb = _img(1), _img(2)
    region = CutRegion(2, 2, 4, (8, 8))
    m = region.mask()
    cb = np.zeros((8, 8), np.uint8)
    cb[3:5, 3:5] = 1
    out = backmix(xt, 7, xb, cb, m)
    assert out.label == 7
    inside = m.astype(bool)
    np.testing.assert_array_equal(out.pixels[~inside], xt[~inside])
    fg_in = inside & cb.astype(bool)
    bg_in = inside & ~cb.astype(bool)
    assert np.all(out.pixels[fg_in] == 0.0)
    np.testing.assert_array_equal(out.pixels[bg_in], xb[bg_in])


def test_backmix_empty_window_is_target_bitexact():
    xt, xb = _img(3), _img(4)
    out = backmix(xt, 1, xb, np.ones((8, 8), np.uint8), np.zeros((8, 8), np.uint8))
    assert np.array_equal(out.pixels, xt)


def test_backmix_full_fg_equals_cutout():
    # partner flagged all-foreground: the paste turns into cutout of the window
    xt, xb = _img(5), _img(6)
    region = CutRegion(1, 3, 4, (8, 8))
    out = backmix(xt, 0, xb, np.ones((8, 8), np.uint8), region.mask())
    assert np.array_equal(out.pixels, cutout(xt, region))


def test_backmix_zero_region_pixel_sign():
    # masked locations become +0.0 exactly, same as cutout's fill
    xt = -np.ones((4, 4, 1), np.float32)
    xb = -np.ones((4, 4, 1), np.float32)
    region = CutRegion(0, 0, 2, (4, 4))
    out = backmix(xt, 0, xb, np.ones((4, 4), np.uint8), region.mask())
    patch = out.pixels[0:2, 0:2]
    assert np.all(patch == 0.0)
    assert not np.signbit(patch).any()
    cut = cutout(xt, region)
    assert not np.signbit(cut[0:2, 0:2]).any()


def test_backmix_single_pixel_case():
    out = backmix(
        np.zeros((1, 1, 1)), 2, np.full((1, 1, 1), 0.8),
        np.zeros((1, 1), np.uint8), np.ones((1, 1), np.uint8),
    )
    assert out.pixels[0, 0, 0] == pytest.approx(0.8)


def test_backmix_label_is_targets_hard_label():
    xt, xb = _img(7), _img(8)
    m = CutRegion(0, 0, 8, (8, 8)).mask()  # window covering everything
    for y in [0, 3, 11]:
        assert backmix(xt, y, xb, np.zeros((8, 8), np.uint8), m).label == y


def test_backmix_validates_masks_and_shapes():
    xt, xb = _img(9), _img(10)
    m = np.zeros((8, 8), np.uint8)
    with pytest.raises(ShapeError):
        backmix(xt, 0, _img(11, h=4), np.zeros((8, 8), np.uint8), m)
    with pytest.raises(ValidationError):
        backmix(xt, 0, xb, np.full((8, 8), 2, np.uint8), m)
    with pytest.raises(ShapeError):
        backmix(xt, 0, xb, np.zeros((4, 4), np.uint8), m)


def test_backmix_tracks_provenance_fields():
    out = backmix(
        _img(12), 1, _img(13), np.zeros((8, 8), np.uint8),
        np.zeros((8, 8), np.uint8), ti_index=4, bi_index=9,
    )
    assert out.ti_index == 4 and out.bi_index == 9


# --- cutout -----------------------------------------------------------------


def test_cutout_zeroes_region_only():
    x = _img(14)
    region = CutRegion(2, 1, 3, (8, 8))
    out = cutout(x, region)
    assert np.all(out[2:5, 1:4] == 0.0)
    keep = np.ones((8, 8), bool)
    keep[2:5, 1:4] = False
    np.testing.assert_array_equal(out[keep], x[keep])
    # input untouched
    assert not np.any(x[2:5, 1:4] == 0.0)


def test_cutout_geometry_mismatch():
    with pytest.raises(ShapeError):
        cutout(_img(15), CutRegion(0, 0, 2, (4, 4)))


# --- mixup / cutmix ---------------------------------------------------------


def test_mixup_convex_combination():
    xa, xb = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
    out, soft = mixup(xa, 0, xb, 1, 0.5)
    assert np.allclose(out, 0.5)
    assert soft.label_a == 0 and soft.label_b == 1 and soft.weight_a == 0.5


def test_mixup_lambda_one_is_identity():
    xa, xb = _img(16), _img(17)
    out, soft = mixup(xa, 2, xb, 3, 1.0)
    assert np.allclose(out, xa) and soft.weight_a == 1.0


def test_mixup_rejects_bad_lambda():
    with pytest.raises(ParameterError):
        mixup(_img(18), 0, _img(19), 1, 1.5)


def test_cutmix_region_swap_and_weights():
    xa, xb = _img(20), _img(21)
    region = CutRegion(0, 0, 4, (8, 8))  # 16 of 64 pixels
    out, soft = cutmix(xa, 0, xb, 1, region)
    np.testing.assert_array_equal(out[0:4, 0:4], xb[0:4, 0:4])
    keep = np.ones((8, 8), bool)
    keep[0:4, 0:4] = False
    np.testing.assert_array_equal(out[keep], xa[keep])
    assert soft.weight_a == pytest.approx(1.0 - 16 / 64)


def test_cutmix_empty_region_keeps_everything():
    xa, xb = _img(22), _img(23)
    out, soft = cutmix(xa, 0, xb, 1, CutRegion(0, 0, 0, (8, 8)))
    assert np.array_equal(out, xa) and soft.weight_a == 1.0


# --- pairing ----------------------------------------------------------------


def test_pair_batch_ti_coverage_random():
    rng = RNG(24)
    pairs = pair_batch(np.zeros(8, int), Pairing.RANDOM, rng, allow_self_pair=True)
    assert sorted(ti for ti, _ in pairs) == list(range(8))
    partners = [bi for _, bi in pairs]
    assert sorted(partners) == list(range(8))  # permutation


def test_pair_batch_no_fixed_points():
    rng = RNG(25)
    for _ in range(100):
        pairs = pair_batch(np.zeros(5, int), Pairing.RANDOM, rng)
        assert all(ti != bi for ti, bi in pairs)


def test_pair_batch_of_two_is_swap():
    pairs = pair_batch(np.array([0, 1]), Pairing.RANDOM, RNG(26))
    assert pairs == [(0, 1), (1, 0)]


def test_pair_batch_different_class_labels_differ():
    y = np.array([0, 0, 1, 1, 2])
    rng = RNG(27)
    for _ in range(50):
        for ti, bi in pair_batch(y, Pairing.DIFFERENT_CLASS, rng):
            assert y[ti] != y[bi]


def test_pair_batch_different_class_single_label_fails():
    with pytest.raises(PairingError):
        pair_batch(np.zeros(4, int), Pairing.DIFFERENT_CLASS, RNG(28))


def test_pair_batch_singleton_fails_without_self_pair():
    with pytest.raises(PairingError):
        pair_batch(np.array([0]), Pairing.RANDOM, RNG(29))
    pairs = pair_batch(np.array([0]), Pairing.RANDOM, RNG(30), allow_self_pair=True)
    assert pairs == [(0, 0)]


def test_pair_batch_empty_fails():
    with pytest.raises(PairingError):
        pair_batch(np.array([], int), Pairing.RANDOM, RNG(31))


# --- grid: backmix window area fraction -------------------------------------


def test_default_window_covers_quarter_of_32x32():
    # s = 0.25 on 32x32: side 16, area 256 = exactly a quarter of the image
    region = sample_cut_region((32, 32), 0.25, RNG(32))
    assert region.side == 16 and region.area == 256
    assert region.area / (32 * 32) == 0.25
