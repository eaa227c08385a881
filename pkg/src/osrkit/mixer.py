"""Background-mix and baseline augmentation operators.

The central operator pastes background patches from a partner image into a
target image under a square cut region, masking out the partner's estimated
foreground, and keeps the target's hard label.  Cutout, mixup and cutmix are
provided for comparison runs and for the exact reduction identities (empty cut
region leaves the target untouched; an all-ones foreground mask turns the mix
into cutout of the same region).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, PairingError, ParameterError, ShapeError, ValidationError
from .cambank import round_half_up


class Pairing(enum.Enum):
    RANDOM = "random"
    DIFFERENT_CLASS = "different_class"


@dataclass(frozen=True)
class MixConfig:
    """Knobs of the mix operator.

    cut_area: fraction s of min(H, W)^2 covered by the square cut region.
    mask_keep: fraction k of partner locations treated as foreground.
    """

    cut_area: float = 0.25
    mask_keep: float = 0.25
    pairing: Pairing = Pairing.RANDOM
    allow_self_pair: bool = False

    def __post_init__(self):
        if not (0.0 <= self.cut_area < 1.0):
            raise ParameterError(f"cut_area must lie in [0, 1), got {self.cut_area}")
        if not (0.0 <= self.mask_keep <= 1.0):
            raise ParameterError(f"mask_keep must lie in [0, 1], got {self.mask_keep}")


@dataclass(frozen=True)
class CutRegion:
    row: int
    col: int
    side: int
    image_hw: tuple[int, int]

    def __post_init__(self):
        h, w = self.image_hw
        if self.side < 0 or self.row < 0 or self.col < 0:
            raise GeometryError(f"negative region geometry: {self}")
        if self.row + self.side > h or self.col + self.side > w:
            raise GeometryError(f"region exceeds image bounds: {self}")

    @property
    def empty(self) -> bool:
        return self.side == 0

    @property
    def area(self) -> int:
        return self.side * self.side

    def mask(self) -> np.ndarray:
        m = np.zeros(self.image_hw, dtype=np.uint8)
        m[self.row : self.row + self.side, self.col : self.col + self.side] = 1
        return m


def sample_cut_region(image_hw: tuple[int, int], cut_area: float, rng: np.random.Generator) -> CutRegion:
    """Uniformly placed square covering about cut_area of the short-side square.

    Side length is round(sqrt(cut_area) * min(H, W)) with half-up rounding;
    cut_area = 0 yields the empty region.
    """
    h, w = image_hw
    if h < 1 or w < 1:
        raise GeometryError(f"image must be non-empty, got {image_hw}")
    if not (0.0 <= cut_area < 1.0):
        raise ParameterError(f"cut_area must lie in [0, 1), got {cut_area}")
    if cut_area == 0.0:
        return CutRegion(0, 0, 0, (h, w))
    side = round_half_up(math.sqrt(cut_area) * min(h, w))
    if side == 0:
        return CutRegion(0, 0, 0, (h, w))
    row = int(rng.integers(0, h - side + 1))
    col = int(rng.integers(0, w - side + 1))
    return CutRegion(row, col, side, (h, w))


@dataclass(frozen=True)
class MixedSample:
    pixels: np.ndarray
    label: int
    ti_index: int = -1
    bi_index: int = -1
    region: CutRegion | None = None


def _check_image(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != 3:
        raise ShapeError(f"{name} must be (H, W, C), got shape {a.shape}")
    return a


def _check_binary(m, hw: tuple[int, int], name: str) -> np.ndarray:
    a = np.asarray(m)
    if a.shape != hw:
        raise ShapeError(f"{name} must have shape {hw}, got {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{name} must be binary")
    return a


def backmix(
    x_t: np.ndarray,
    y_t: int,
    x_b: np.ndarray,
    c_b: np.ndarray,
    m: np.ndarray,
    *,
    ti_index: int = -1,
    bi_index: int = -1,
    region: CutRegion | None = None,
) -> MixedSample:
    """Paste partner background into the target under the cut mask.

    Inside the cut mask m, locations flagged foreground by c_b become zero and
    the rest take the partner's pixels; outside m the target passes through
    bit-for-bit.  The label stays the target's hard label.
    """
    xt = _check_image(x_t, "x_t")
    xb = _check_image(x_b, "x_b")
    if xt.shape != xb.shape:
        raise ShapeError(f"target and partner shapes differ: {xt.shape} vs {xb.shape}")
    hw = xt.shape[:2]
    cb = _check_binary(c_b, hw, "c_b")
    mm = _check_binary(m, hw, "m")
    inside = mm[:, :, None] == 1
    keep_bg = cb[:, :, None] == 0
    pixels = np.where(inside, np.where(keep_bg, xb, 0.0), xt)
    return MixedSample(pixels, int(y_t), ti_index, bi_index, region)


def cutout(x: np.ndarray, region: CutRegion) -> np.ndarray:
    """Zero the region; everything else passes through bit-for-bit."""
    a = _check_image(x, "x")
    if region.image_hw != a.shape[:2]:
        raise ShapeError(f"region geometry {region.image_hw} does not match image {a.shape[:2]}")
    out = a.copy()
    out[region.row : region.row + region.side, region.col : region.col + region.side] = 0.0
    return out


@dataclass(frozen=True)
class SoftPair:
    """Two-class soft label: weight_a on label_a, 1 - weight_a on label_b."""

    label_a: int
    label_b: int
    weight_a: float


def mixup(x_a, y_a, x_b, y_b, lam: float) -> tuple[np.ndarray, SoftPair]:
    if not (0.0 <= lam <= 1.0):
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    xa = _check_image(x_a, "x_a")
    xb = _check_image(x_b, "x_b")
    if xa.shape != xb.shape:
        raise ShapeError(f"shapes differ: {xa.shape} vs {xb.shape}")
    return lam * xa + (1.0 - lam) * xb, SoftPair(int(y_a), int(y_b), lam)


def cutmix(x_a, y_a, x_b, y_b, region: CutRegion) -> tuple[np.ndarray, SoftPair]:
    """Replace the region with partner pixels; weights follow the exact area split."""
    xa = _check_image(x_a, "x_a")
    xb = _check_image(x_b, "x_b")
    if xa.shape != xb.shape:
        raise ShapeError(f"shapes differ: {xa.shape} vs {xb.shape}")
    if region.image_hw != xa.shape[:2]:
        raise ShapeError(f"region geometry {region.image_hw} does not match image {xa.shape[:2]}")
    out = xa.copy()
    r, c, s = region.row, region.col, region.side
    out[r : r + s, c : c + s] = xb[r : r + s, c : c + s]
    frac = region.area / (xa.shape[0] * xa.shape[1])
    return out, SoftPair(int(y_a), int(y_b), 1.0 - frac)


def pair_batch(
    labels,
    pairing: Pairing,
    rng: np.random.Generator,
    allow_self_pair: bool = False,
) -> list[tuple[int, int]]:
    """Assign one partner index to every batch position.

    RANDOM: partners form a uniform permutation; with self-pairs disallowed the
    permutation is resampled until it has no fixed point.  DIFFERENT_CLASS:
    each partner is drawn uniformly from the positions with a different label,
    which always exists unless the whole batch shares one label.
    """
    y = np.asarray(labels)
    n = y.size
    if n < 1:
        raise PairingError("empty batch")
    if pairing is Pairing.RANDOM:
        if not allow_self_pair and n < 2:
            raise PairingError("cannot avoid self-pairing in a batch of one")
        while True:
            perm = rng.permutation(n)
            if allow_self_pair or not np.any(perm == np.arange(n)):
                return [(i, int(perm[i])) for i in range(n)]
    if pairing is Pairing.DIFFERENT_CLASS:
        pairs = []
        for i in range(n):
            cands = np.flatnonzero(y != y[i])
            if cands.size == 0:
                raise PairingError("batch holds a single class; no cross-class partner exists")
            pairs.append((i, int(cands[rng.integers(cands.size)])))
        return pairs
    raise ParameterError(f"unknown pairing {pairing!r}")
