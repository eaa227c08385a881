"""Post-hoc known-ness scores and the score-file format.

Every score is oriented so that higher means more known.  The energy score is
computed with an explicit max-shift so its shift covariance is exact whenever
the shifted logits are exactly representable; the input-perturbation score
with zero perturbation falls through to temperature-scaled max-softmax
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import torch

from .errors import (
    CapabilityError,
    DataError,
    NumericalError,
    ParameterError,
    ShapeError,
    ValidationError,
)

SIMPLEX_TOL = 1e-6


def check_simplex(probs, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a probability vector; returns it clipped to [0, 1] as float64."""
    a = np.asarray(probs, dtype=np.float64).ravel()
    if a.size < 2:
        raise ShapeError(f"need at least 2 classes, got {a.size}")
    if np.any(a < -tol) or abs(a.sum() - 1.0) > tol:
        raise ValidationError(f"probs off the simplex: sum={a.sum()!r}, min={a.min()!r}")
    return np.clip(a, 0.0, 1.0)


def msp(probs) -> float:
    """Maximum softmax probability."""
    return float(check_simplex(probs).max())


def energy_score(logits, temperature: float = 1.0) -> float:
    """temperature * logsumexp(logits / temperature); a single logit maps to itself."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    a = np.asarray(logits, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeError("logits must be non-empty")
    u = a / temperature
    m = u.max()
    t = math.log(np.exp(u - m).sum())
    return float(temperature * (m + t))


def prob_entropy(probs) -> float:
    """Shannon entropy of a probability vector in nats; 0*log(0) counts as zero."""
    a = check_simplex(probs)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def temperature_msp(model, x, temperature: float) -> float:
    """Max softmax of logits/temperature on an unperturbed input."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    xt = _single_input(model, x)
    with torch.no_grad():
        logits = model(xt)[1]
        return float(torch.softmax(logits / temperature, dim=1).max())


def _single_input(model, x) -> torch.Tensor:
    if not isinstance(model, torch.nn.Module):
        raise CapabilityError("scoring with input perturbation needs a differentiable model")
    a = np.asarray(x)
    if a.ndim != 3:
        raise ShapeError(f"expected one (H, W, C) image, got shape {a.shape}")
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))[None]).to(dtype)


def odin_score(model, x, temperature: float = 1000.0, eps: float = 0.0014) -> float:
    """Temperature-scaled max softmax after a signed input-gradient nudge.

    The input moves eps along the sign of the gradient that increases the
    temperature-scaled max softmax; eps = 0 skips the perturbation entirely.
    """
    if eps < 0:
        raise ParameterError(f"eps must be >= 0, got {eps}")
    if eps == 0.0:
        return temperature_msp(model, x, temperature)
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    xt = _single_input(model, x).requires_grad_(True)
    logits = model(xt)[1]
    objective = torch.log_softmax(logits / temperature, dim=1).max()
    (grad,) = torch.autograd.grad(objective, xt)
    perturbed = xt.detach() + eps * grad.sign()
    with torch.no_grad():
        logits2 = model(perturbed)[1]
        return float(torch.softmax(logits2 / temperature, dim=1).max())


@dataclass(frozen=True)
class GaussianStats:
    class_ids: np.ndarray  # (K',) sorted labels
    means: np.ndarray  # (K', C')
    cov: np.ndarray  # (C', C') pooled covariance plus ridge
    ridge: float
    cho: tuple  # cholesky factorization of cov


def fit_gaussian_stats(features, labels, ridge: float | None = None) -> GaussianStats:
    """Class means plus a shared (pooled within-class) covariance with a ridge.

    The default ridge is 1e-3 * trace(cov) / dim.  Needs at least two samples
    per class so every class contributes spread.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if f.ndim != 2 or f.shape[0] != y.size:
        raise ShapeError(f"features {f.shape} do not match {y.size} labels")
    class_ids = np.unique(y)
    counts = np.array([(y == c).sum() for c in class_ids])
    if counts.min() < 2:
        raise ParameterError("every class needs at least 2 samples")
    means = np.stack([f[y == c].mean(axis=0) for c in class_ids])
    centered = f - means[np.searchsorted(class_ids, y)]
    cov = centered.T @ centered / f.shape[0]
    if ridge is None:
        ridge = 1e-3 * float(np.trace(cov)) / f.shape[1]
    if ridge <= 0:
        raise NumericalError("covariance carries no spread; supply a positive ridge")
    cov = cov + ridge * np.eye(f.shape[1])
    try:
        cho = scipy.linalg.cho_factor(cov)
    except scipy.linalg.LinAlgError as e:
        raise NumericalError(f"covariance not positive definite after ridge: {e}") from e
    return GaussianStats(class_ids=class_ids, means=means, cov=cov, ridge=float(ridge), cho=cho)


def mahalanobis_score(feature, stats: GaussianStats) -> float:
    """Negated squared Mahalanobis distance to the nearest class mean; 0 at a mean."""
    f = np.asarray(feature, dtype=np.float64).ravel()
    if f.size != stats.means.shape[1]:
        raise ShapeError(f"feature dim {f.size} does not match fitted dim {stats.means.shape[1]}")
    diffs = stats.means - f[None, :]
    solved = scipy.linalg.cho_solve(stats.cho, diffs.T)
    d2 = np.einsum("kc,ck->k", diffs, solved)
    return float(-d2.min())


def feature_norm_score(feature) -> float:
    """Euclidean norm of the global feature."""
    f = np.asarray(feature, dtype=np.float64).ravel()
    if not np.all(np.isfinite(f)):
        raise ValidationError("feature contains non-finite values")
    return float(np.linalg.norm(f))


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    is_known: bool
    true_label: int
    predicted_label: int
    score: float
    feature: np.ndarray | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"score must be finite, got {self.score}")


SCORE_METHODS = ("msp", "energy", "odin", "mahalanobis", "featnorm")


def compute_scores(
    model,
    dataset,
    *,
    method: str = "msp",
    is_known: bool,
    temperature: float | None = None,
    eps: float = 0.0014,
    stats: GaussianStats | None = None,
    id_prefix: str = "",
    with_features: bool = True,
) -> list[ScoreRecord]:
    """Score every image in a dataset with one model and one score function."""
    from .model import predict
    from .synthdata import as_arrays

    if method not in SCORE_METHODS:
        raise ParameterError(f"unknown score method {method!r}; expected one of {SCORE_METHODS}")
    x, y, _, _ = as_arrays(dataset)
    out = predict(model, x)
    probs, logits, feats = out["probs"], out["logits"], out["features"]
    preds = probs.argmax(axis=1)
    records = []
    for i in range(x.shape[0]):
        if method == "msp":
            s = msp(probs[i])
        elif method == "energy":
            s = energy_score(logits[i], 1.0 if temperature is None else temperature)
        elif method == "odin":
            s = odin_score(model, x[i], 1000.0 if temperature is None else temperature, eps)
        elif method == "mahalanobis":
            if stats is None:
                raise ParameterError("mahalanobis scoring needs fitted GaussianStats")
            s = mahalanobis_score(feats[i], stats)
        else:
            s = feature_norm_score(feats[i])
        records.append(
            ScoreRecord(
                sample_id=f"{id_prefix}{i}",
                is_known=is_known,
                true_label=int(y[i]),
                predicted_label=int(preds[i]),
                score=float(s),
                feature=feats[i].astype(np.float64) if with_features else None,
            )
        )
    return records


def entropy_summary(model, dataset) -> dict[str, float]:
    """Mean prediction entropy and mean max-softmax over a dataset (diagnostics)."""
    from .model import predict
    from .synthdata import as_arrays

    x, _, _, _ = as_arrays(dataset)
    probs = predict(model, x)["probs"]
    ent = [prob_entropy(p) for p in probs]
    return {
        "mean_entropy": float(np.mean(ent)),
        "mean_msp": float(np.mean(probs.max(axis=1))),
        "count": float(len(ent)),
    }


def write_score_file(path, records) -> None:
    """Tab-delimited records; floats formatted to round-trip float64 bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            cols = [r.sample_id, str(int(r.is_known)), str(r.true_label), str(r.predicted_label), repr(r.score)]
            if r.feature is not None:
                cols += [f"{v:.16e}" for v in np.asarray(r.feature, dtype=np.float64)]
            fh.write("\t".join(cols) + "\n")


def read_score_file(path) -> list[ScoreRecord]:
    records = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise DataError(f"cannot read score file {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 5:
            raise DataError(f"{path}:{lineno}: expected at least 5 fields, got {len(parts)}")
        try:
            feature = np.array([float(v) for v in parts[5:]], dtype=np.float64) if len(parts) > 5 else None
            records.append(
                ScoreRecord(
                    sample_id=parts[0],
                    is_known=bool(int(parts[1])),
                    true_label=int(parts[2]),
                    predicted_label=int(parts[3]),
                    score=float(parts[4]),
                    feature=feature,
                )
            )
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: malformed record: {e}") from e
    if not records:
        raise DataError(f"score file {path} holds no records")
    return records
