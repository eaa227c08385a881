"""Synthetic fore/background datasets with pixel-exact foreground masks.

Each image composites a parametric glyph (a lobed star) onto a neutral-grey
background grating.  The two cues are built to sit at opposite ends of the
spatial-frequency axis, mirroring objects vs scenery in natural photographs:
foreground identity is the orientation (plus a coarse frequency bit) of
bright stripes inside the glyph, readable from any small patch of it, while
background identity is the orientation of a grating near one cycle per image,
so no small patch pins the background class on its own.  Locally the glyph is
therefore the discriminative region and the background is ambiguous, yet the
background remains globally learnable as a shortcut.  Every foreground class
has a designated background class, and a controllable fraction r of its
images use that background; the rest draw uniformly from the non-designated
ones, so r = 1/num_bg_classes is exactly uniform usage.  Pixels live in a
normalized space where zero means pure grey.

Generation is deterministic: image g derives its own RNG stream from
(seed, g), so datasets are bit-identical across runs and parallelizable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .cambank import round_half_up
from .errors import DataError, GeometryError, ParameterError, ShapeError, ValidationError

MIN_SIDE = 12  # smallest image side that fits a glyph with margin


@dataclass(frozen=True)
class CorrelationSpec:
    num_fg_classes: int
    num_bg_classes: int
    correlation_r: float
    images_per_class: int
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_fg_classes < 1 or self.num_bg_classes < 1:
            raise ParameterError("class counts must be positive")
        lo = 1.0 / self.num_bg_classes
        if not (lo <= self.correlation_r <= 1.0):
            raise ParameterError(
                f"correlation_r must lie in [{lo}, 1], got {self.correlation_r}"
            )
        if self.images_per_class < 1:
            raise ParameterError("images_per_class must be >= 1")
        h, w = self.image_hw
        if h < MIN_SIDE or w < MIN_SIDE:
            raise GeometryError(f"image sides must be >= {MIN_SIDE}, got {self.image_hw}")
        if self.channels < 1:
            raise ParameterError("channels must be >= 1")

    @property
    def correlated_count(self) -> int:
        return round_half_up(self.correlation_r * self.images_per_class)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (H, W, C) float32, normalized space
    label: int
    is_known: bool = True
    fg_mask: np.ndarray | None = None  # (H, W) uint8


class VariantKind(enum.Enum):
    RAW = "raw"
    FG_ONLY = "fg_only"
    FG_PLUS_RAW_STAR = "fg_plus_raw_star"
    FG_PLUS_BG_STAR = "fg_plus_bg_star"


def designated_background(fg_class: int, num_bg_classes: int) -> int:
    return fg_class % num_bg_classes


def _glyph_mask(c: int, hw: tuple[int, int], rng: np.random.Generator):
    h, w = hw
    lobes = 3 + 2 * (c % 5)
    depth = 0.42 - 0.12 * ((c // 5) % 3)
    rot = rng.uniform(0.0, 2.0 * math.pi)
    radius = (0.26 + 0.03 * rng.random()) * min(h, w)
    cy = h / 2.0 + rng.uniform(-0.06, 0.06) * h
    cx = w / 2.0 + rng.uniform(-0.06, 0.06) * w
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    rho = np.hypot(dy, dx)
    ang = np.arctan2(dy, dx)
    boundary = radius * (1.0 - depth * (0.5 + 0.5 * np.cos(lobes * (ang + rot))))
    return (rho <= boundary).astype(np.uint8), rho / radius


def _bg_texture(b: int, hw: tuple[int, int], channels: int, rng: np.random.Generator) -> np.ndarray:
    """Neutral-grey oriented grating; identity is orientation plus a low frequency.

    The frequency band sits near one cycle per image so no small patch pins the
    background class on its own; recognizing it takes large context.
    """
    h, w = hw
    theta = math.pi * (b % 8) / 8.0
    freq = 0.7 + 0.3 * (b % 4) + 0.15 * ((b // 4) % 2) + rng.uniform(-0.08, 0.08)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    coord = (xx * math.cos(theta) + yy * math.sin(theta)) / min(h, w)
    grating = np.sin(2.0 * math.pi * freq * coord + phase)
    field = 0.35 * np.repeat(grating[:, :, None], channels, axis=2)
    field = field + rng.normal(0.0, 0.1, size=(h, w, channels))
    return np.clip(field, -1.0, 1.0)


def _compose_image(spec: CorrelationSpec, fg_class: int, bg_class: int, rng: np.random.Generator):
    mask, _ = _glyph_mask(fg_class, spec.image_hw, rng)
    h, w = spec.image_hw
    if mask.sum() == 0 or mask.sum() == h * w:
        raise GeometryError("glyph mask degenerate; image too small for the foreground")
    pixels = _bg_texture(bg_class, spec.image_hw, spec.channels, rng)
    # glyph fill: bright stripes whose orientation (and a coarse frequency bit)
    # code the class; the stripe period is a few pixels, so any small patch of
    # the glyph is readable on its own, unlike the near-global background cue
    base = 0.55 + rng.uniform(-0.05, 0.05)
    stripe_dir = math.pi * (fg_class % 6) / 6.0
    stripe_freq = 4.0 + 1.5 * ((fg_class // 6) % 2)
    stripe_phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    coord = (xx * math.cos(stripe_dir) + yy * math.sin(stripe_dir)) / min(h, w)
    stripes = 0.3 * np.sin(2.0 * math.pi * stripe_freq * coord + stripe_phase)
    fg = base + stripes[:, :, None] + rng.normal(0.0, 0.03, size=(h, w, spec.channels))
    fg = np.clip(fg, -1.0, 1.0)
    sel = mask == 1
    pixels[sel] = fg[sel]
    return pixels.astype(np.float32), mask


def generate_dataset(spec: CorrelationSpec) -> list[LabeledImage]:
    """Full dataset: images_per_class samples for each foreground class.

    Exactly round(r * images_per_class) images per class carry the designated
    background; which positions they occupy is a seeded per-class shuffle.
    """
    images: list[LabeledImage] = []
    for c in range(spec.num_fg_classes):
        flags = np.zeros(spec.images_per_class, dtype=bool)
        flags[: spec.correlated_count] = True
        assign_rng = np.random.default_rng((spec.seed, 1_000_000 + c))
        assign_rng.shuffle(flags)
        for i in range(spec.images_per_class):
            g = c * spec.images_per_class + i
            rng = np.random.default_rng((spec.seed, g))
            designated = designated_background(c, spec.num_bg_classes)
            if flags[i]:
                bg = designated
            else:
                others = [b for b in range(spec.num_bg_classes) if b != designated]
                bg = others[rng.integers(len(others))]
            pixels, mask = _compose_image(spec, c, bg, rng)
            images.append(LabeledImage(pixels=pixels, label=c, is_known=True, fg_mask=mask))
    return images


def make_variant(img: LabeledImage, kind: VariantKind, donor: LabeledImage | None = None) -> LabeledImage:
    """Background-substitution transforms; label and fg_mask pass through.

    RAW copies; FG_ONLY greys the background out; FG_PLUS_RAW_STAR takes the
    donor's raw pixels as background; FG_PLUS_BG_STAR does the same but greys
    the donor's own foreground first.
    """
    if img.fg_mask is None:
        raise ValidationError("variant transforms need the image's fg_mask")
    if kind is VariantKind.RAW:
        return replace(img, pixels=img.pixels.copy())
    sel = img.fg_mask[:, :, None] == 1
    if kind is VariantKind.FG_ONLY:
        out = np.where(sel, img.pixels, np.float32(0.0))
        return replace(img, pixels=out)
    if donor is None:
        raise ParameterError(f"{kind.value} requires a donor image")
    if donor.pixels.shape != img.pixels.shape:
        raise ShapeError("donor shape differs from image shape")
    if kind is VariantKind.FG_PLUS_RAW_STAR:
        out = np.where(sel, img.pixels, donor.pixels)
        return replace(img, pixels=out)
    if kind is VariantKind.FG_PLUS_BG_STAR:
        if donor.fg_mask is None:
            raise ParameterError("fg_plus_bg_star requires the donor's fg_mask")
        donor_bg = np.where(donor.fg_mask[:, :, None] == 1, np.float32(0.0), donor.pixels)
        out = np.where(sel, img.pixels, donor_bg)
        return replace(img, pixels=out)
    raise ParameterError(f"unknown variant {kind!r}")


def split_known_unknown(dataset, known_class_ids) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """Partition by label; flags is_known on every returned image."""
    known_ids = set(known_class_ids)
    all_ids = {img.label for img in dataset}
    if not known_ids or not known_ids < all_ids:
        raise ParameterError(
            f"known classes must be a non-empty proper subset of {sorted(all_ids)}"
        )
    known = [replace(img, is_known=True) for img in dataset if img.label in known_ids]
    unknown = [replace(img, is_known=False) for img in dataset if img.label not in known_ids]
    return known, unknown


def relabel(dataset, class_ids) -> list[LabeledImage]:
    """Map the listed class ids onto 0..K-1 (training wants contiguous labels)."""
    table = {c: i for i, c in enumerate(class_ids)}
    out = []
    for img in dataset:
        if img.label not in table:
            raise ParameterError(f"label {img.label} not in relabel table")
        out.append(replace(img, label=table[img.label]))
    return out


def as_arrays(dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack a dataset into (pixels, labels, known flags, masks) arrays."""
    if not dataset:
        raise ShapeError("dataset is empty")
    x = np.stack([img.pixels for img in dataset]).astype(np.float32)
    y = np.array([img.label for img in dataset], dtype=np.int64)
    known = np.array([img.is_known for img in dataset], dtype=np.uint8)
    masks = np.stack(
        [img.fg_mask if img.fg_mask is not None else np.zeros(x.shape[1:3], np.uint8) for img in dataset]
    ).astype(np.uint8)
    return x, y, known, masks


def from_arrays(x, y, known, masks) -> list[LabeledImage]:
    return [
        LabeledImage(
            pixels=np.asarray(x[i], dtype=np.float32),
            label=int(y[i]),
            is_known=bool(known[i]),
            fg_mask=np.asarray(masks[i], dtype=np.uint8),
        )
        for i in range(len(x))
    ]


def save_dataset(directory, splits: dict[str, list[LabeledImage]], spec: CorrelationSpec) -> None:
    """Persist one array file per split plus a key=value manifest."""
    import os

    os.makedirs(directory, exist_ok=True)
    stats_x = []
    for name, images in splits.items():
        x, y, known, masks = as_arrays(images)
        np.savez(os.path.join(directory, f"{name}.npz"), pixels=x, labels=y, known=known, masks=masks)
        stats_x.append(x.reshape(-1, x.shape[-1]))
    allpx = np.concatenate(stats_x, axis=0)
    table = ",".join(
        f"{c}:{designated_background(c, spec.num_bg_classes)}" for c in range(spec.num_fg_classes)
    )
    lines = {
        "num_fg_classes": spec.num_fg_classes,
        "num_bg_classes": spec.num_bg_classes,
        "correlation_r": repr(spec.correlation_r),
        "images_per_class": spec.images_per_class,
        "height": spec.image_hw[0],
        "width": spec.image_hw[1],
        "channels": spec.channels,
        "seed": spec.seed,
        "bg_table": table,
        "splits": ",".join(splits),
    }
    for ch in range(allpx.shape[1]):
        lines[f"norm_mean_{ch}"] = repr(float(allpx[:, ch].mean()))
        lines[f"norm_std_{ch}"] = repr(float(allpx[:, ch].std()))
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        for k, v in lines.items():
            fh.write(f"{k}={v}\n")


def load_manifest(directory) -> dict[str, str]:
    import os

    path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(path):
        raise DataError(f"missing manifest in {directory}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"malformed manifest line: {line!r}")
            k, v = line.split("=", 1)
            out[k] = v
    return out


def load_dataset(directory) -> tuple[dict[str, list[LabeledImage]], dict[str, str]]:
    import os

    manifest = load_manifest(directory)
    splits = {}
    for name in manifest["splits"].split(","):
        path = os.path.join(directory, f"{name}.npz")
        if not os.path.exists(path):
            raise DataError(f"missing split file {path}")
        try:
            with np.load(path) as z:
                splits[name] = from_arrays(z["pixels"], z["labels"], z["known"], z["masks"])
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"corrupt split file {path}: {e}") from e
    return splits, manifest
