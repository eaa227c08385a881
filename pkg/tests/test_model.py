"""Model head algebra: GAP decomposition, head equivalence, gradients, IO."""

import time

import numpy as np
import pytest
import torch

from osrkit.errors import DataError, ParameterError, PartitionError, ShapeError
from osrkit.model import (
    ConvNet,
    ConvNetSpec,
    build_model,
    catimg,
    ftavg_forward,
    gap,
    load_model,
    predict,
    save_model,
)


def tiny_spec(**kw):
    base = dict(image_hw=(16, 16), channels=3, widths=(8, 16), num_classes=4)
    base.update(kw)
    return ConvNetSpec(**base)


# --- spec -------------------------------------------------------------------


def test_spec_geometry_properties():
    spec = tiny_spec()
    assert spec.downsample == 4
    assert spec.cam_hw == (4, 4)
    assert spec.feature_dim == 16


def test_spec_rejects_collapsing_input():
    with pytest.raises(ParameterError):
        ConvNetSpec(image_hw=(16, 16), widths=(8, 8, 8, 8, 8))
    with pytest.raises(ParameterError):
        ConvNetSpec(num_classes=1)
    with pytest.raises(ParameterError):
        ConvNetSpec(widths=())


# --- forward contracts ------------------------------------------------------


def test_forward_shapes():
    model = build_model(tiny_spec(), seed=0)
    x = torch.randn(5, 3, 16, 16)
    cam, logits, probs, feat = model(x)
    assert cam.shape == (5, 4, 4, 4)
    assert logits.shape == (5, 4) and probs.shape == (5, 4)
    assert feat.shape == (5, 16)


def test_logits_are_gap_of_cam_logits():
    model = build_model(tiny_spec(), seed=1)
    x = torch.randn(3, 3, 16, 16)
    cam, logits, _, _ = model(x)
    assert torch.allclose(logits, cam.mean(dim=(2, 3)), atol=1e-6)


def test_probs_sum_to_one():
    model = build_model(tiny_spec(), seed=2)
    _, _, probs, _ = model(torch.randn(4, 3, 16, 16))
    assert torch.allclose(probs.sum(dim=1), torch.ones(4), atol=1e-6)


def test_zeroed_head_gives_uniform_probs():
    model = build_model(tiny_spec(), seed=3)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    _, logits, probs, _ = model(torch.randn(2, 3, 16, 16))
    assert torch.allclose(logits, torch.zeros_like(logits))
    assert torch.allclose(probs, torch.full_like(probs, 0.25), atol=1e-7)


def test_forward_shape_errors():
    model = build_model(tiny_spec(), seed=4)
    with pytest.raises(ShapeError):
        model(torch.randn(1, 1, 16, 16))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 3, 2, 2))


def test_prediction_batch_independence():
    # group norm: single-image prediction must not depend on batch neighbors
    model = build_model(tiny_spec(), seed=5)
    xs = np.random.default_rng(0).normal(size=(4, 16, 16, 3)).astype(np.float32)
    batch = predict(model, xs)["probs"]
    singles = np.stack([predict(model, xs[i])["probs"][0] for i in range(4)])
    assert np.allclose(batch, singles, atol=1e-6)


# --- head equivalence: GAP(conv1x1(F)) == Linear(GAP(F)) --------------------


def test_head_equivalence_100_draws():
    tol = 1e-5
    for trial in range(100):
        torch.manual_seed(trial)
        model = build_model(tiny_spec(), seed=trial)
        fmap = torch.randn(1, 16, 4, 4)
        conv_then_pool = model.head(fmap).mean(dim=(2, 3))
        pool_then_dense = model.head_logits(fmap.mean(dim=(2, 3)))
        assert torch.allclose(conv_then_pool, pool_then_dense, atol=tol), f"trial {trial}"


# --- gap decomposition ------------------------------------------------------


def test_gap_identity_small_example():
    fm = np.zeros((2, 2, 2))
    fm[0, 0] = [2.0, 0.0]
    fm[0, 1] = [2.0, 0.0]
    fm[1, 0] = [0.0, 4.0]
    fm[1, 1] = [0.0, 4.0]
    part = np.array([[1, 1], [0, 0]])
    g = gap(fm, part)
    assert np.allclose(g.z_f, [2.0, 0.0])
    assert np.allclose(g.z_b, [0.0, 4.0])
    assert g.lam == 0.5
    assert np.allclose(g.z_g, [1.0, 2.0])


def test_gap_decomposition_1000_random_maps():
    rng = np.random.default_rng(7)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        h, w, c = rng.integers(2, 9), rng.integers(2, 9), rng.integers(1, 6)
        fm = rng.normal(scale=10.0, size=(h, w, c))
        part = np.zeros((h, w), dtype=np.uint8)
        ones = rng.integers(1, h * w)
        part.ravel()[rng.choice(h * w, size=ones, replace=False)] = 1
        g = gap(fm, part)
        recon = g.lam * g.z_f + (1.0 - g.lam) * g.z_b
        worst = max(worst, float(np.max(np.abs(g.z_g - recon))))
    assert worst < 1e-6
    assert time.time() - t0 < 10.0


def test_gap_without_partition():
    fm = np.random.default_rng(8).normal(size=(3, 3, 2))
    g = gap(fm)
    assert g.z_f is None and g.z_b is None and g.lam is None
    assert np.allclose(g.z_g, fm.mean(axis=(0, 1)))


def test_gap_rejects_degenerate_partitions():
    fm = np.zeros((2, 2, 1))
    with pytest.raises(PartitionError):
        gap(fm, np.ones((2, 2)))
    with pytest.raises(PartitionError):
        gap(fm, np.zeros((2, 2)))
    with pytest.raises(PartitionError):
        gap(fm, np.full((2, 2), 2))
    with pytest.raises(ShapeError):
        gap(fm, np.ones((3, 3)))
    with pytest.raises(ShapeError):
        gap(np.zeros((2, 2)), None)


# --- gradient check ---------------------------------------------------------


def test_gradcheck_small_network():
    # analytic vs central finite differences on a deliberately small model
    spec = ConvNetSpec(image_hw=(16, 16), channels=1, widths=(4, 6), num_classes=3)
    model = build_model(spec, seed=11).double()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 5000, n_params
    x = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    y = torch.tensor([0, 2])

    def loss_value():
        return torch.nn.functional.cross_entropy(model(x)[1], y)

    loss = loss_value()
    loss.backward()
    grads = torch.cat([p.grad.flatten() for p in model.parameters()])
    params = list(model.parameters())
    rng = np.random.default_rng(12)
    flat_index = 0
    offsets = []
    for p in params:
        offsets.append((flat_index, p))
        flat_index += p.numel()
    eps = 1e-6
    for _ in range(20):
        j = int(rng.integers(n_params))
        base, tensor = next((o, p) for o, p in reversed(offsets) if o <= j)
        local = j - base
        with torch.no_grad():
            orig = tensor.flatten()[local].item()
            tensor.flatten()[local] = orig + eps
            up = loss_value().item()
            tensor.flatten()[local] = orig - eps
            down = loss_value().item()
            tensor.flatten()[local] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[j].item()
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom < 1e-3, (j, numeric, analytic)


# --- ftavg and catimg -------------------------------------------------------


def test_ftavg_self_pair_matches_single():
    model = build_model(tiny_spec(), seed=13)
    x = np.random.default_rng(14).normal(size=(16, 16, 3)).astype(np.float32)
    mixed, probs = ftavg_forward(model, x, x)
    single = predict(model, x)
    assert np.allclose(mixed, single["features"][0], atol=1e-6)
    assert np.allclose(probs, single["probs"][0], atol=1e-6)


def test_ftavg_is_elementwise_mean():
    model = build_model(tiny_spec(), seed=15)
    rng = np.random.default_rng(16)
    xa = rng.normal(size=(16, 16, 3)).astype(np.float32)
    xb = rng.normal(size=(16, 16, 3)).astype(np.float32)
    mixed, _ = ftavg_forward(model, xa, xb)
    za = predict(model, xa)["features"][0]
    zb = predict(model, xb)["features"][0]
    assert np.allclose(mixed, 0.5 * za + 0.5 * zb, atol=1e-6)


def test_ftavg_logits_shape_guard():
    model = build_model(tiny_spec(), seed=17)
    with pytest.raises(ShapeError):
        model.ftavg_logits(torch.randn(1, 3, 16, 16), torch.randn(2, 3, 16, 16))


def test_catimg_stacks_height():
    a = np.zeros((16, 12, 3), np.float32)
    b = np.ones((16, 12, 3), np.float32)
    out = catimg(a, b)
    assert out.shape == (32, 12, 3)
    assert np.all(out[:16] == 0.0) and np.all(out[16:] == 1.0)


def test_catimg_rejects_mismatch():
    with pytest.raises(ShapeError):
        catimg(np.zeros((16, 12, 3)), np.zeros((16, 10, 3)))
    with pytest.raises(ShapeError):
        catimg(np.zeros((16, 12, 3)), np.zeros((2, 16, 12, 3)))


def test_catimg_double_height_model_accepts():
    # a model specced for concatenated input consumes stacked images
    spec = tiny_spec(image_hw=(32, 16))
    model = build_model(spec, seed=18)
    pair = catimg(
        np.zeros((16, 16, 3), np.float32), np.ones((16, 16, 3), np.float32)
    )
    out = predict(model, pair)
    assert out["logits"].shape == (1, 4)


# --- persistence ------------------------------------------------------------


def test_model_checkpoint_roundtrip_bitexact(tmp_path):
    model = build_model(tiny_spec(), seed=19)
    p = tmp_path / "net.model"
    save_model(model, p, step=123, seed=19)
    back, step, seed = load_model(p)
    assert step == 123 and seed == 19
    for a, b in zip(model.parameters(), back.parameters()):
        assert torch.equal(a, b)
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x)[1], back(x)[1])


def test_model_checkpoint_covers_groupnorm_params(tmp_path):
    model = build_model(tiny_spec(), seed=20)
    with torch.no_grad():
        # touch a group-norm weight specifically; it must survive the roundtrip
        gn = [m for m in model.encoder if isinstance(m, torch.nn.GroupNorm)][0]
        gn.weight.fill_(0.125)
    p = tmp_path / "net.model"
    save_model(model, p)
    back, _, _ = load_model(p)
    gn_back = [m for m in back.encoder if isinstance(m, torch.nn.GroupNorm)][0]
    assert torch.all(gn_back.weight == 0.125)


def test_model_checkpoint_corruption_detected(tmp_path):
    model = build_model(tiny_spec(), seed=21)
    p = tmp_path / "net.model"
    save_model(model, p)
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_model(p)


def test_model_checkpoint_missing_and_not_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_model(tmp_path / "no.model")
    p = tmp_path / "junk.model"
    p.write_bytes(b"garbage")
    with pytest.raises(DataError):
        load_model(p)


def test_build_model_seed_determinism():
    a = build_model(tiny_spec(), seed=22)
    b = build_model(tiny_spec(), seed=22)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_model(tiny_spec(), seed=23)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))
