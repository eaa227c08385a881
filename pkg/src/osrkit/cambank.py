"""Per-sample class activation bank with exponential moving-average updates.

The bank keeps one soft map per training image at the model's activation
resolution, float64, entries in [0, 1].  Maps start as i.i.d. Uniform(0, 1)
noise and are blended toward fresh per-image estimates during training.
Consumers binarize an upsampled map by keeping a fixed count of its largest
entries.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, GeometryError, ParameterError, ShapeError, ValidationError

_MAGIC = b"OSRKITBANK1\n"


@dataclass
class CamBank:
    maps: np.ndarray  # (n, h, w) float64 in [0, 1]
    beta: float
    step: int
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.maps.shape


def new_bank(n: int, h: int, w: int, beta: float = 0.1, seed: int = 0) -> CamBank:
    """Bank of n maps at resolution h x w, initialized to uniform noise."""
    if n < 1 or h < 1 or w < 1:
        raise ParameterError(f"bank dimensions must be positive, got {(n, h, w)}")
    if not (0.0 < beta <= 1.0):
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")
    rng = np.random.default_rng(seed)
    return CamBank(maps=rng.random((n, h, w), dtype=np.float64), beta=beta, step=0, seed=seed)


def extract_cam(cam_logits: np.ndarray, label: int) -> np.ndarray:
    """Per-location probability of `label` from an (h, w, K) logit volume.

    Softmax runs over the class axis at each location, so the result lies in
    (0, 1) and locations are comparable as evidence for the labeled class.
    """
    a = np.asarray(cam_logits, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"cam_logits must be (h, w, K), got shape {a.shape}")
    if not (0 <= label < a.shape[2]):
        raise IndexError(f"label {label} outside [0, {a.shape[2]})")
    shifted = a - a.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    return e[:, :, label] / e.sum(axis=2)


def ema_update(bank: CamBank, index: int, cam_hat: np.ndarray) -> CamBank:
    """Blend one fresh estimate into the bank: new = beta*hat + (1-beta)*old."""
    return ema_update_many(bank, np.array([index]), np.asarray(cam_hat)[None])


def ema_update_many(bank: CamBank, indices, cam_hats) -> CamBank:
    """Vectorized blend for a batch of distinct sample indices."""
    idx = np.asarray(indices, dtype=np.int64)
    hats = np.asarray(cam_hats, dtype=np.float64)
    n, h, w = bank.maps.shape
    if hats.shape != (idx.size, h, w):
        raise ShapeError(f"expected estimates of shape {(idx.size, h, w)}, got {hats.shape}")
    if np.unique(idx).size != idx.size:
        raise ValidationError("duplicate sample indices in one update")
    if np.any(idx < 0) or np.any(idx >= n):
        raise IndexError(f"sample index outside [0, {n})")
    if np.any(hats < 0) or np.any(hats > 1):
        raise ValidationError("cam estimates must lie in [0, 1]")
    bank.maps[idx] = bank.beta * hats + (1.0 - bank.beta) * bank.maps[idx]
    bank.step += idx.size
    return bank


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def topk_mask(soft_map: np.ndarray, k: float) -> tuple[np.ndarray, int]:
    """Binary mask keeping exactly round(k * h * w) largest entries.

    Rounding is half-up.  Ties are broken row-major: among equal values the
    earlier flat index wins, so an all-tie map keeps its first entries.
    Returns (mask uint8, ones_count).
    """
    a = np.asarray(soft_map, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"soft map must be 2-d, got shape {a.shape}")
    if not (0.0 <= k <= 1.0):
        raise ParameterError(f"k must lie in [0, 1], got {k}")
    m = round_half_up(k * a.size)
    flat = a.ravel()
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(a.size, dtype=np.uint8)
    mask[order[:m]] = 1
    return mask.reshape(a.shape), m


def _axis_map(n_src: int, n_dst: int):
    if n_src == 1:
        z = np.zeros(n_dst, dtype=np.int64)
        return z, z, np.zeros(n_dst)
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_src - 2)
    return lo, lo + 1, pos - lo


def upsample_bilinear(soft_map: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear upsampling; output stays within the input's range."""
    a = np.asarray(soft_map, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"soft map must be 2-d, got shape {a.shape}")
    hh, ww = out_hw
    h, w = a.shape
    if hh < h or ww < w:
        raise GeometryError(f"target {out_hw} smaller than source {a.shape}")
    rlo, rhi, rf = _axis_map(h, hh)
    clo, chi, cf = _axis_map(w, ww)
    rows = a[rlo] * (1.0 - rf)[:, None] + a[rhi] * rf[:, None]
    return rows[:, clo] * (1.0 - cf)[None, :] + rows[:, chi] * cf[None, :]


def save_bank(bank: CamBank, path) -> None:
    n, h, w = bank.maps.shape
    header = json.dumps(
        {
            "n": n,
            "h": h,
            "w": w,
            "beta": float(bank.beta).hex(),
            "step": bank.step,
            "seed": bank.seed,
        }
    ).encode() + b"\n"
    payload = np.ascontiguousarray(bank.maps, dtype="<f8").tobytes()
    digest = hashlib.sha256(_MAGIC + header + payload).hexdigest().encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + header + payload + digest + b"\n")


def load_bank(path) -> CamBank:
    """Reload a saved bank bit-exactly; any corruption raises DataError."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read bank file {path}: {e}") from e
    if not blob.startswith(_MAGIC):
        raise DataError(f"{path} is not a bank file")
    try:
        head_end = blob.index(b"\n", len(_MAGIC)) + 1
        header = json.loads(blob[len(_MAGIC):head_end])
        n, h, w = header["n"], header["h"], header["w"]
        size = n * h * w * 8
        payload = blob[head_end : head_end + size]
        trailer = blob[head_end + size :].strip()
    except (ValueError, KeyError) as e:
        raise DataError(f"malformed bank header in {path}: {e}") from e
    if len(payload) != size:
        raise DataError(f"bank payload truncated in {path}")
    digest = hashlib.sha256(blob[:head_end] + payload).hexdigest().encode()
    if trailer != digest:
        raise DataError(f"bank checksum mismatch in {path}")
    maps = np.frombuffer(payload, dtype="<f8").reshape(n, h, w).astype(np.float64)
    return CamBank(
        maps=maps, beta=float.fromhex(header["beta"]), step=header["step"], seed=header["seed"]
    )
