"""Training loops: plain, background-mix, cutout/mixup/cutmix baselines, and
outlier-exposure objectives.

One optimizer serves every mode: SGD with Nesterov momentum 0.9, weight decay
5e-4, and a cosine learning-rate schedule over all steps.  Three RNG streams
are kept separate (data order, augmentation draws, parameter init) so the
reduction identities hold bit-exactly under a shared seed: cut area 0 matches
plain training, keep-ratio 1 matches cutout with the same regions, and
outlier weight 0 matches plain training.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import cambank, mixer
from .errors import NumericalError, ParameterError, ShapeError, ValidationError
from .model import ConvNet, ConvNetSpec, build_model, save_model
from .synthdata import as_arrays


class Augmentation(enum.Enum):
    NONE = "none"
    BACKMIX = "backmix"
    CUTOUT = "cutout"
    MIXUP = "mixup"
    CUTMIX = "cutmix"
    OE = "oe"
    CATIMG = "catimg"
    FTAVG = "ftavg"


# modes that pair every batch element with a partner
_PAIRED = {Augmentation.BACKMIX, Augmentation.CUTOUT, Augmentation.MIXUP, Augmentation.CUTMIX}
# modes that draw from an outlier pool
_NEEDS_OUTLIERS = {Augmentation.OE, Augmentation.CATIMG, Augmentation.FTAVG}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augmentation: Augmentation = Augmentation.NONE
    mix: mixer.MixConfig = field(default_factory=mixer.MixConfig)
    oe_alpha: float = 0.5
    mixup_alpha: float = 1.0
    ema_beta: float = 0.1
    cam_source: str = "original"  # or "mixed": which batch feeds the bank estimates
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.oe_alpha < 0:
            raise ParameterError(f"oe_alpha must be >= 0, got {self.oe_alpha}")
        if self.mixup_alpha <= 0:
            raise ParameterError(f"mixup_alpha must be positive, got {self.mixup_alpha}")
        if self.cam_source not in ("original", "mixed"):
            raise ParameterError(f"cam_source must be 'original' or 'mixed', got {self.cam_source}")


def _check_simplex(p: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    a = np.asarray(p, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ShapeError(f"probs must be a 1-d vector of >= 2 entries, got shape {a.shape}")
    if np.any(a < -tol) or abs(a.sum() - 1.0) > tol:
        raise ValidationError(f"probs off the simplex: sum={a.sum()!r}, min={a.min()!r}")
    return np.clip(a, 0.0, None)


def ce_loss(probs, label: int) -> float:
    """Cross-entropy of a single probability vector against a hard label."""
    a = _check_simplex(probs)
    if not (0 <= label < a.size):
        raise IndexError(f"label {label} outside [0, {a.size})")
    with np.errstate(divide="ignore"):
        return float(-np.log(a[label]))


def uniform_loss(probs) -> float:
    """Cross-entropy against the uniform target; minimized (= ln K) at uniform probs."""
    a = _check_simplex(probs)
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(a)))


def oe_loss(known_probs, known_labels, outlier_probs, alpha: float) -> float:
    """Mean known CE plus alpha times the mean uniform-target CE on outliers."""
    kp = np.atleast_2d(np.asarray(known_probs, dtype=np.float64))
    op = np.atleast_2d(np.asarray(outlier_probs, dtype=np.float64))
    labels = np.atleast_1d(known_labels)
    if kp.shape[0] == 0 or op.shape[0] == 0:
        raise ParameterError("both batches must be non-empty")
    if labels.size != kp.shape[0]:
        raise ShapeError(f"{labels.size} labels for {kp.shape[0]} probability rows")
    known_term = float(np.mean([ce_loss(kp[i], int(labels[i])) for i in range(kp.shape[0])]))
    outlier_term = float(np.mean([uniform_loss(op[i]) for i in range(op.shape[0])]))
    return known_term + alpha * outlier_term


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)); base_lr at 0, zero at the end."""
    if total_steps < 1:
        raise ParameterError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainState:
    config: TrainConfig
    model: ConvNet
    optimizer: torch.optim.Optimizer
    x: np.ndarray  # (N, H, W, C) float32 training pixels
    y: np.ndarray  # (N,) int64 labels in [0, K)
    bank: cambank.CamBank | None
    aug_rng: np.random.Generator
    data_rng: np.random.Generator
    total_steps: int
    step: int = 0
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    outlier_x: np.ndarray | None = None


@dataclass
class TrainResult:
    model: ConvNet
    bank: cambank.CamBank | None
    loss_history: list[float]
    config: TrainConfig
    model_spec: ConvNetSpec


def _to_batch(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


def _sgd_step(state: TrainState, loss_builder) -> float:
    """One scheduled SGD update; loss_builder() must build the loss graph."""
    lr_t = cosine_lr(state.step, state.total_steps, state.config.lr)
    for group in state.optimizer.param_groups:
        group["lr"] = lr_t
    state.optimizer.zero_grad()
    loss = loss_builder()
    loss.backward()
    state.optimizer.step()
    val = float(loss.detach())
    if not math.isfinite(val):
        raise NumericalError(
            f"training diverged: loss {val} at step {state.step} (epoch {state.epoch})"
        )
    state.loss_history.append(val)
    state.step += 1
    return val


def _ce_step(state: TrainState, pixels: np.ndarray, labels: np.ndarray) -> float:
    inputs = _to_batch(pixels)
    yb = torch.from_numpy(labels)
    return _sgd_step(state, lambda: F.cross_entropy(state.model(inputs)[1], yb))


def _mixed_backmix_batch(state: TrainState, idx: np.ndarray) -> np.ndarray:
    """Pair, mask, cut and mix one batch; consumes the same RNG draws as cutout."""
    cfg = state.config
    if np.any(idx < 0) or np.any(idx >= state.bank.maps.shape[0]):
        raise NumericalError(f"sample index outside bank range 0..{state.bank.maps.shape[0]}")
    pairs = mixer.pair_batch(state.y[idx], cfg.mix.pairing, state.aug_rng, cfg.mix.allow_self_pair)
    hw = state.x.shape[1:3]
    mixed = np.empty_like(state.x[idx])
    for ti, bi in pairs:
        soft = cambank.upsample_bilinear(state.bank.maps[idx[bi]], hw)
        c_b, _ = cambank.topk_mask(soft, cfg.mix.mask_keep)
        region = mixer.sample_cut_region(hw, cfg.mix.cut_area, state.aug_rng)
        sample = mixer.backmix(
            state.x[idx[ti]], int(state.y[idx[ti]]), state.x[idx[bi]], c_b, region.mask(),
            ti_index=int(idx[ti]), bi_index=int(idx[bi]), region=region,
        )
        mixed[ti] = sample.pixels
    return mixed


def _update_bank(state: TrainState, idx: np.ndarray, pixels: np.ndarray) -> None:
    with torch.no_grad():
        cam_logits = state.model(_to_batch(pixels))[0].permute(0, 2, 3, 1).numpy()
    hats = np.stack(
        [cambank.extract_cam(cam_logits[i], int(state.y[idx[i]])) for i in range(idx.size)]
    )
    cambank.ema_update_many(state.bank, idx, hats)


def train_step_backmix(state: TrainState, idx: np.ndarray) -> TrainState:
    """One background-mix step: SGD on the mixed batch, then bank maintenance."""
    mixed = _mixed_backmix_batch(state, idx)
    _ce_step(state, mixed, state.y[idx])
    source = state.x[idx] if state.config.cam_source == "original" else mixed
    _update_bank(state, idx, source)
    return state


def _step_cutout(state: TrainState, idx: np.ndarray) -> None:
    # consumes pairing + region draws exactly like the backmix step
    cfg = state.config
    pairs = mixer.pair_batch(state.y[idx], cfg.mix.pairing, state.aug_rng, cfg.mix.allow_self_pair)
    hw = state.x.shape[1:3]
    out = np.empty_like(state.x[idx])
    for ti, _bi in pairs:
        region = mixer.sample_cut_region(hw, cfg.mix.cut_area, state.aug_rng)
        out[ti] = mixer.cutout(state.x[idx[ti]], region)
    _ce_step(state, out, state.y[idx])


def _step_pair_soft(state: TrainState, idx: np.ndarray) -> None:
    cfg = state.config
    pairs = mixer.pair_batch(state.y[idx], cfg.mix.pairing, state.aug_rng, cfg.mix.allow_self_pair)
    partner = np.array([bi for _, bi in pairs])
    xa, xb = state.x[idx], state.x[idx[partner]]
    ya = torch.from_numpy(state.y[idx])
    yb = torch.from_numpy(state.y[idx[partner]])
    if cfg.augmentation is Augmentation.MIXUP:
        lam = float(state.aug_rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        batch = lam * xa + (1.0 - lam) * xb
        w = lam
    else:  # CUTMIX: one region per batch, weight from its exact area
        lam = float(state.aug_rng.beta(1.0, 1.0))
        hw = state.x.shape[1:3]
        region = mixer.sample_cut_region(hw, min(1.0 - lam, 1.0 - 1e-9), state.aug_rng)
        batch = xa.copy()
        r, c, s = region.row, region.col, region.side
        batch[:, r : r + s, c : c + s] = xb[:, r : r + s, c : c + s]
        w = 1.0 - region.area / (hw[0] * hw[1])
    inputs = _to_batch(batch)

    def soft_pair_loss():
        logits = state.model(inputs)[1]
        return w * F.cross_entropy(logits, ya) + (1.0 - w) * F.cross_entropy(logits, yb)

    _sgd_step(state, soft_pair_loss)


def _uniform_target_term(logits: torch.Tensor) -> torch.Tensor:
    return (-F.log_softmax(logits, dim=1).mean(dim=1)).mean()


def _step_outlier(state: TrainState, idx: np.ndarray) -> None:
    cfg = state.config
    if cfg.augmentation is Augmentation.OE and cfg.oe_alpha == 0.0:
        # exact plain-training reduction: no outlier draw, no extra term
        _ce_step(state, state.x[idx], state.y[idx])
        return
    oidx = state.aug_rng.integers(0, state.outlier_x.shape[0], size=idx.size)
    xo = state.outlier_x[oidx]
    yb = torch.from_numpy(state.y[idx])
    if cfg.augmentation is Augmentation.OE:
        xk_t, xo_t = _to_batch(state.x[idx]), _to_batch(xo)

        def oe_objective():
            known_logits = state.model(xk_t)[1]
            outlier_logits = state.model(xo_t)[1]
            return F.cross_entropy(known_logits, yb) + cfg.oe_alpha * _uniform_target_term(
                outlier_logits
            )

        _sgd_step(state, oe_objective)
    elif cfg.augmentation is Augmentation.CATIMG:
        batch = np.concatenate([state.x[idx], xo], axis=1)  # stack along height
        _ce_step(state, batch, state.y[idx])
    else:  # FTAVG
        xk_t, xo_t = _to_batch(state.x[idx]), _to_batch(xo)
        _sgd_step(
            state, lambda: F.cross_entropy(state.model.ftavg_logits(xk_t, xo_t), yb)
        )


def _epoch_batches(state: TrainState) -> list[np.ndarray]:
    cfg = state.config
    n = state.x.shape[0]
    order = state.data_rng.permutation(n)
    chunks = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    needs_pairs = cfg.augmentation in _PAIRED and not cfg.mix.allow_self_pair
    if needs_pairs and len(chunks) > 1 and chunks[-1].size == 1:
        # a singleton tail cannot be paired; fold it into the previous batch
        # (borrowing the other way would just move the singleton one slot left)
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def init_state(
    config: TrainConfig,
    dataset,
    outliers=None,
    model_spec: ConvNetSpec | None = None,
) -> TrainState:
    torch.set_num_threads(1)
    x, y, _, _ = as_arrays(dataset)
    num_classes = int(y.max()) + 1
    if np.any(y < 0):
        raise ValidationError("labels must be non-negative")
    needs_outliers = config.augmentation in (Augmentation.CATIMG, Augmentation.FTAVG) or (
        config.augmentation is Augmentation.OE and config.oe_alpha > 0
    )
    if needs_outliers and outliers is None:
        raise ParameterError(f"{config.augmentation.value} needs an outlier dataset")
    outlier_x = None
    if outliers is not None:
        outlier_x, _, _, _ = as_arrays(outliers)
        if outlier_x.shape[1:] != x.shape[1:]:
            raise ShapeError(
                f"outlier image shape {outlier_x.shape[1:]} differs from {x.shape[1:]}"
            )
    hw = (x.shape[1], x.shape[2])
    if model_spec is None:
        input_hw = (hw[0] * 2, hw[1]) if config.augmentation is Augmentation.CATIMG else hw
        model_spec = ConvNetSpec(
            image_hw=input_hw, channels=x.shape[3], num_classes=max(num_classes, 2)
        )
    model = build_model(model_spec, config.seed)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        nesterov=config.momentum > 0,
        weight_decay=config.weight_decay,
    )
    bank = None
    if config.augmentation is Augmentation.BACKMIX:
        ch, cw = model_spec.cam_hw
        bank = cambank.new_bank(
            x.shape[0], ch, cw, beta=config.ema_beta, seed=config.seed + 1_000_003
        )
    n_batches = max(1, math.ceil(x.shape[0] / config.batch_size))
    return TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        x=x,
        y=y,
        bank=bank,
        aug_rng=np.random.default_rng((config.seed, 202)),
        data_rng=np.random.default_rng((config.seed, 101)),
        total_steps=max(1, config.epochs * n_batches),
        outlier_x=outlier_x,
    )


def train(
    config: TrainConfig,
    dataset,
    outliers=None,
    model_spec: ConvNetSpec | None = None,
    checkpoint_dir=None,
) -> TrainResult:
    """Run the configured training and return the model plus the final bank."""
    state = init_state(config, dataset, outliers, model_spec)
    aug = config.augmentation
    for epoch in range(config.epochs):
        state.epoch = epoch
        for idx in _epoch_batches(state):
            if aug is Augmentation.BACKMIX:
                train_step_backmix(state, idx)
            elif aug is Augmentation.CUTOUT:
                _step_cutout(state, idx)
            elif aug in (Augmentation.MIXUP, Augmentation.CUTMIX):
                _step_pair_soft(state, idx)
            elif aug in _NEEDS_OUTLIERS:
                _step_outlier(state, idx)
            else:
                _ce_step(state, state.x[idx], state.y[idx])
        if checkpoint_dir is not None:
            import os

            os.makedirs(checkpoint_dir, exist_ok=True)
            save_model(
                state.model,
                os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.model"),
                step=state.step,
                seed=config.seed,
            )
            if state.bank is not None:
                cambank.save_bank(state.bank, os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.bank"))
    return TrainResult(
        model=state.model,
        bank=state.bank,
        loss_history=state.loss_history,
        config=config,
        model_spec=state.model.spec,
    )
