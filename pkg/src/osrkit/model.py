"""Small convolutional classifier with a 1x1-conv / global-average-pool head.

The head applies a 1x1 convolution to the last feature map, so its pre-pool
output is a per-location class logit volume (a CAM); averaging those logits
spatially gives the classification logits.  That ordering is linearly
equivalent to pooling first and applying the same weights as a dense layer,
which `gap` plus `head_logits` exposes for verification.

`gap` also decomposes the pooled feature over a binary spatial partition:
z_g = lam * z_f + (1 - lam) * z_b with lam the foreground fraction.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DataError, ParameterError, PartitionError, ShapeError


@dataclass(frozen=True)
class ConvNetSpec:
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    widths: tuple[int, ...] = (32, 64)
    num_classes: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.num_classes}")
        if not self.widths:
            raise ParameterError("need at least one stage")
        h, w = self.cam_hw
        if h < 1 or w < 1:
            raise ParameterError(
                f"input {self.image_hw} collapses below 1x1 after {len(self.widths)} pool stages"
            )

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    @property
    def cam_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.downsample, self.image_hw[1] // self.downsample)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


class ConvNet(nn.Module):
    """Conv stages (3x3 conv, group norm, ReLU, 2x2 max pool) and a 1x1 class conv head.

    Group norm rather than batch norm: inference stays batch-size independent
    (per-image scoring must not depend on its neighbors) and the module carries
    no running buffers, so checkpoints are exactly the parameter vector.
    """

    def __init__(self, spec: ConvNetSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c_in = spec.channels
        for width in spec.widths:
            groups = math.gcd(8, width)
            layers += [
                nn.Conv2d(c_in, width, 3, padding=1),
                nn.GroupNorm(groups, width),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            c_in = width
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, spec.num_classes, 1)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ShapeError(f"expected (N, {self.spec.channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] < self.spec.downsample or x.shape[3] < self.spec.downsample:
            raise ShapeError(
                f"input {tuple(x.shape[2:])} collapses under {len(self.spec.widths)} pool stages"
            )
        return self.encoder(x)

    def forward(self, x: torch.Tensor):
        """Returns (cam_logits (N,K,h,w), class logits, probabilities, pooled feature)."""
        fmap = self.encode(x)
        cam_logits = self.head(fmap)
        logits = cam_logits.mean(dim=(2, 3))
        probs = torch.softmax(logits, dim=1)
        feature = fmap.mean(dim=(2, 3))
        return cam_logits, logits, probs, feature

    def head_logits(self, feature: torch.Tensor) -> torch.Tensor:
        """Head applied after pooling: the dense-layer ordering of the same weights."""
        w = self.head.weight[:, :, 0, 0]
        return feature @ w.T + self.head.bias

    def ftavg_logits(self, x_known: torch.Tensor, x_outlier: torch.Tensor) -> torch.Tensor:
        """Logits of the elementwise mean of the two pooled features."""
        if x_known.shape != x_outlier.shape:
            raise ShapeError(f"shapes differ: {tuple(x_known.shape)} vs {tuple(x_outlier.shape)}")
        zk = self.encode(x_known).mean(dim=(2, 3))
        zo = self.encode(x_outlier).mean(dim=(2, 3))
        return self.head_logits(0.5 * zk + 0.5 * zo)


def build_model(spec: ConvNetSpec, seed: int = 0) -> ConvNet:
    torch.manual_seed(seed)
    return ConvNet(spec)


def _to_torch(images: np.ndarray, like: ConvNet) -> torch.Tensor:
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ShapeError(f"expected (N, H, W, C) images, got shape {a.shape}")
    dtype = next(like.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)


def predict(model: ConvNet, images: np.ndarray) -> dict[str, np.ndarray]:
    """No-grad forward of a numpy batch; arrays come back channel-last.

    Keys: cam_logits (N,h,w,K), logits (N,K), probs (N,K), features (N,C').
    """
    with torch.no_grad():
        cam, logits, probs, feat = model(_to_torch(images, model))
    return {
        "cam_logits": cam.permute(0, 2, 3, 1).numpy(),
        "logits": logits.numpy(),
        "probs": probs.numpy(),
        "features": feat.numpy(),
    }


@dataclass(frozen=True)
class GlobalFeature:
    z_g: np.ndarray
    z_f: np.ndarray | None = None
    z_b: np.ndarray | None = None
    lam: float | None = None


def gap(feature_map: np.ndarray, partition: np.ndarray | None = None) -> GlobalFeature:
    """Global average pool, optionally decomposed over a binary partition.

    With a partition, z_f averages the 1-locations, z_b the 0-locations, and
    lam is the 1-fraction; the identity z_g = lam*z_f + (1-lam)*z_b then holds
    to numerical tolerance.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"feature map must be (h, w, C'), got shape {fm.shape}")
    z_g = fm.mean(axis=(0, 1))
    if partition is None:
        return GlobalFeature(z_g=z_g)
    p = np.asarray(partition)
    if p.shape != fm.shape[:2]:
        raise ShapeError(f"partition shape {p.shape} does not match map {fm.shape[:2]}")
    if not np.isin(p, (0, 1)).all():
        raise PartitionError("partition must be binary")
    ones = int(np.count_nonzero(p))
    if ones == 0 or ones == p.size:
        raise PartitionError("partition must contain both foreground and background")
    sel = p == 1
    z_f = fm[sel].mean(axis=0)
    z_b = fm[~sel].mean(axis=0)
    return GlobalFeature(z_g=z_g, z_f=z_f, z_b=z_b, lam=ones / p.size)


def ftavg_forward(model: ConvNet, x_known: np.ndarray, x_outlier: np.ndarray):
    """Feature-average of two images: (mixed pooled feature, class probabilities)."""
    with torch.no_grad():
        zk = model.encode(_to_torch(x_known, model)).mean(dim=(2, 3))
        zo = model.encode(_to_torch(x_outlier, model)).mean(dim=(2, 3))
        mixed = 0.5 * zk + 0.5 * zo
        probs = torch.softmax(model.head_logits(mixed), dim=1)
    return mixed.numpy()[0], probs.numpy()[0]


def catimg(x_known: np.ndarray, x_outlier: np.ndarray) -> np.ndarray:
    """Stack two images along the height axis (known on top)."""
    a = np.asarray(x_known)
    b = np.asarray(x_outlier)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError("catimg expects single (H, W, C) images")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"width/channel mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


_MAGIC = b"OSRKITMODEL1\n"


def save_model(model: ConvNet, path, step: int = 0, seed: int = 0) -> None:
    params = [p.detach().cpu().numpy() for p in model.parameters()]
    dtype = params[0].dtype.name
    flat = np.concatenate([p.ravel() for p in params]).astype(dtype)
    spec = model.spec
    header = json.dumps(
        {
            "image_hw": list(spec.image_hw),
            "channels": spec.channels,
            "widths": list(spec.widths),
            "num_classes": spec.num_classes,
            "dtype": dtype,
            "count": int(flat.size),
            "step": step,
            "seed": seed,
        }
    ).encode() + b"\n"
    payload = flat.tobytes()
    digest = hashlib.sha256(_MAGIC + header + payload).hexdigest().encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + header + payload + digest + b"\n")


def load_model(path) -> tuple[ConvNet, int, int]:
    """Rebuild a checkpointed model bit-exactly; returns (model, step, seed)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if not blob.startswith(_MAGIC):
        raise DataError(f"{path} is not a model checkpoint")
    try:
        head_end = blob.index(b"\n", len(_MAGIC)) + 1
        header = json.loads(blob[len(_MAGIC):head_end])
        dtype = np.dtype(header["dtype"])
        size = header["count"] * dtype.itemsize
        payload = blob[head_end : head_end + size]
        trailer = blob[head_end + size :].strip()
    except (ValueError, KeyError) as e:
        raise DataError(f"malformed checkpoint header in {path}: {e}") from e
    if len(payload) != size:
        raise DataError(f"checkpoint payload truncated in {path}")
    digest = hashlib.sha256(blob[:head_end] + payload).hexdigest().encode()
    if trailer != digest:
        raise DataError(f"checkpoint checksum mismatch in {path}")
    spec = ConvNetSpec(
        image_hw=tuple(header["image_hw"]),
        channels=header["channels"],
        widths=tuple(header["widths"]),
        num_classes=header["num_classes"],
    )
    model = ConvNet(spec)
    if dtype == np.float64:
        model.double()
    flat = np.frombuffer(payload, dtype=dtype)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset : offset + n].copy()).view_as(p))
            offset += n
    if offset != flat.size:
        raise DataError(f"parameter count mismatch in {path}")
    return model, header["step"], header["seed"]
