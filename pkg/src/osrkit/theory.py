"""Exact information-theoretic checks on finite joint distributions.

Models a triple (y, z_f, z_b) with a pooled variable z_g derived from the
foreground/background parts, either arithmetically (z_g = w*z_f + (1-w)*z_b
over rational alphabet values, grouped by exact rational equality) or by
concatenation (z_g = (z_f, z_b)).  All information quantities are computed in
nats by direct enumeration in float64.

The checks quantify, as residuals, when pooling loses nothing about the label:
``check_decomposition`` measures I(y;z_g) - [I(y;z_f) - I(y;z_f|z_g)], and
``check_residual_vanishes`` measures the leftover term I(y;z_f|z_g) itself for
the two background regimes where it provably vanishes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

PROB_TOL = 1e-12


class PoolRule(enum.Enum):
    ARITHMETIC = "arithmetic"
    CONCAT = "concat"


class BackgroundMode(enum.Enum):
    CONSTANT = "constant"
    ORTHOGONAL = "orthogonal"


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint distribution p(y, z_f, z_b) plus the rule that defines z_g.

    probs: float64 array of shape (ny, nf, nb), entries >= 0 summing to 1.
    fg_values / bg_values: alphabet values as exact rationals (ARITHMETIC only).
    mix_weight: pooling weight w in (0, 1) as an exact rational (ARITHMETIC only).
    """

    probs: np.ndarray
    rule: PoolRule = PoolRule.ARITHMETIC
    fg_values: tuple[Fraction, ...] | None = None
    bg_values: tuple[Fraction, ...] | None = None
    mix_weight: Fraction | None = None
    # (nf, nb) int array mapping each pair to its pooled-value group id
    pool_index: np.ndarray = field(init=False, repr=False)
    num_pooled: int = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise ShapeError(f"probs must be 3-d (y, z_f, z_b), got shape {p.shape}")
        if np.any(p < 0):
            raise ValidationError("probs contains negative entries")
        total = math.fsum(p.ravel().tolist())
        if abs(total - 1.0) > PROB_TOL:
            raise ValidationError(f"probs sums to {total!r}, not 1 within {PROB_TOL}")
        object.__setattr__(self, "probs", p)
        ny, nf, nb = p.shape
        if min(ny, nf, nb) < 1:
            raise ShapeError("every alphabet must be non-empty")

        if self.rule is PoolRule.ARITHMETIC:
            if self.fg_values is None or self.bg_values is None or self.mix_weight is None:
                raise ParameterError("arithmetic pooling needs fg_values, bg_values and mix_weight")
            fv = tuple(Fraction(v) for v in self.fg_values)
            bv = tuple(Fraction(v) for v in self.bg_values)
            w = Fraction(self.mix_weight)
            if len(fv) != nf or len(bv) != nb:
                raise ShapeError("alphabet value lists must match probs axes")
            if len(set(fv)) != nf or len(set(bv)) != nb:
                raise ValidationError("alphabet values must be distinct")
            if not (0 < w < 1):
                raise ParameterError(f"mix_weight must lie in (0, 1), got {w}")
            object.__setattr__(self, "fg_values", fv)
            object.__setattr__(self, "bg_values", bv)
            object.__setattr__(self, "mix_weight", w)
            groups: dict[Fraction, int] = {}
            idx = np.empty((nf, nb), dtype=np.int64)
            for j in range(nf):
                for k in range(nb):
                    pooled = w * fv[j] + (1 - w) * bv[k]
                    idx[j, k] = groups.setdefault(pooled, len(groups))
        else:
            idx = (np.arange(nf)[:, None] * nb + np.arange(nb)[None, :]).astype(np.int64)
            groups = {Fraction(i): i for i in range(nf * nb)}
        object.__setattr__(self, "pool_index", idx)
        object.__setattr__(self, "num_pooled", len(groups))

    @property
    def has_pool_collision(self) -> bool:
        return self.num_pooled < self.probs.shape[1] * self.probs.shape[2]


VARIABLES = ("y", "zf", "zb", "zg")


def _var_levels(joint: DiscreteJoint, name: str) -> tuple[np.ndarray, int]:
    """Per-atom level of a variable over the (ny, nf, nb) grid, plus its cardinality."""
    ny, nf, nb = joint.probs.shape
    i, j, k = np.meshgrid(np.arange(ny), np.arange(nf), np.arange(nb), indexing="ij")
    if name == "y":
        return i, ny
    if name == "zf":
        return j, nf
    if name == "zb":
        return k, nb
    if name == "zg":
        return joint.pool_index[j, k], joint.num_pooled
    raise ParameterError(f"unknown variable {name!r}; expected one of {VARIABLES}")


def _accumulate(joint: DiscreteJoint, names: tuple[str, ...]) -> np.ndarray:
    levels, shape = [], []
    for n in names:
        lv, card = _var_levels(joint, n)
        levels.append(lv)
        shape.append(card)
    table = np.zeros(tuple(shape), dtype=np.float64)
    np.add.at(table, tuple(levels), joint.probs)
    return table


def mutual_info(joint: DiscreteJoint, a: str, b: str) -> float:
    """I(a; b) in nats; 0*log(0) terms contribute zero."""
    pab = _accumulate(joint, (a, b))
    pa = pab.sum(axis=1, keepdims=True)
    pb = pab.sum(axis=0, keepdims=True)
    mask = pab > 0
    terms = pab[mask] * (np.log(pab[mask]) - np.log((pa * pb)[mask]))
    return math.fsum(terms.tolist())


def conditional_mutual_info(joint: DiscreteJoint, a: str, b: str, c: str) -> float:
    """I(a; b | c) in nats by direct enumeration."""
    pabc = _accumulate(joint, (a, b, c))
    pac = np.broadcast_to(pabc.sum(axis=1, keepdims=True), pabc.shape)
    pbc = np.broadcast_to(pabc.sum(axis=0, keepdims=True), pabc.shape)
    pc = np.broadcast_to(pabc.sum(axis=(0, 1), keepdims=True), pabc.shape)
    mask = pabc > 0
    terms = pabc[mask] * (
        np.log(pabc[mask]) + np.log(pc[mask]) - np.log(pac[mask]) - np.log(pbc[mask])
    )
    return math.fsum(terms.tolist())


def property_residuals(joint: DiscreteJoint) -> dict[str, float]:
    """Max absolute deviations from the three independence statements used by the checks.

    fg_bg: p(z_f, z_b) = p(z_f) p(z_b)
    y_bg: p(y, z_b) = p(y) p(z_b)
    joint_bg: p(y, z_f, z_b) = p(y, z_f) p(z_b)
    """
    p = joint.probs
    pfb = p.sum(axis=0)
    pf = pfb.sum(axis=1, keepdims=True)
    pb_row = pfb.sum(axis=0, keepdims=True)
    pyb = p.sum(axis=1)
    py = pyb.sum(axis=1, keepdims=True)
    pb = pyb.sum(axis=0, keepdims=True)
    pyf = p.sum(axis=2)
    return {
        "fg_bg": float(np.abs(pfb - pf * pb_row).max()),
        "y_bg": float(np.abs(pyb - py * pb).max()),
        "joint_bg": float(np.abs(p - pyf[:, :, None] * p.sum(axis=(0, 1))[None, None, :]).max()),
    }


def assert_background_independent(joint: DiscreteJoint, tol: float = 1e-9) -> None:
    """Require z_b independent of (y, z_f) jointly.

    This implies both pairwise statements (z_f vs z_b, y vs z_b) and is what the
    decomposition actually rests on: pairwise independence alone admits parity
    constructions where pooling reveals the label through the pair (z_f, z_b).
    """
    res = property_residuals(joint)
    if res["joint_bg"] > tol:
        raise ValidationError(
            f"background must be independent of (label, foreground); residual {res['joint_bg']:.3e}"
        )


def check_decomposition(joint: DiscreteJoint) -> float:
    """Residual of I(y;z_g) = I(y;z_f) - I(y;z_f|z_g) for a background-independent joint."""
    assert_background_independent(joint)
    lhs = mutual_info(joint, "y", "zg")
    rhs = mutual_info(joint, "y", "zf") - conditional_mutual_info(joint, "y", "zf", "zg")
    return abs(lhs - rhs)


def check_residual_vanishes(joint: DiscreteJoint, mode: BackgroundMode) -> float:
    """The leftover term I(y;z_f|z_g) under a degenerate background.

    CONSTANT: the background alphabet has a single value, so pooling is a
    bijection of z_f and the term is zero.  ORTHOGONAL: z_g carries both parts
    (concatenation), so conditioning on z_g fixes z_f outright.
    """
    if mode is BackgroundMode.CONSTANT:
        if joint.probs.shape[2] != 1:
            raise ValidationError("constant mode requires a single-valued background alphabet")
    elif mode is BackgroundMode.ORTHOGONAL:
        if joint.rule is not PoolRule.CONCAT:
            raise ValidationError("orthogonal mode requires concatenation pooling")
        assert_background_independent(joint)
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    return conditional_mutual_info(joint, "y", "zf", "zg")


def chain_rule_residual(joint: DiscreteJoint) -> float:
    """|[I(y;z_g|z_f) + I(y;z_f)] - [I(y;z_f|z_g) + I(y;z_g)]|; zero for every joint."""
    lhs = conditional_mutual_info(joint, "y", "zg", "zf") + mutual_info(joint, "y", "zf")
    rhs = conditional_mutual_info(joint, "y", "zf", "zg") + mutual_info(joint, "y", "zg")
    return abs(lhs - rhs)


def _random_values(rng: np.random.Generator, n: int, denom: int = 4) -> tuple[Fraction, ...]:
    nums = rng.choice(np.arange(-4 * n, 4 * n + 1), size=n, replace=False)
    return tuple(Fraction(int(v), denom) for v in nums)


def random_background_independent_joint(
    rng: np.random.Generator,
    ny: int = 2,
    nf: int = 3,
    nb: int = 3,
    rule: PoolRule = PoolRule.ARITHMETIC,
) -> DiscreteJoint:
    """Random joint of the form p(y, z_f) * p(z_b), the regime the checks assume.

    Roughly a quarter of the q(y, z_f) entries are zeroed to exercise empty cells.
    """
    q = rng.random((ny, nf))
    q[rng.random((ny, nf)) < 0.25] = 0.0
    if q.sum() == 0:
        q[0, 0] = 1.0
    q /= q.sum()
    r = 0.05 + rng.random(nb)
    r /= r.sum()
    probs = q[:, :, None] * r[None, None, :]
    if rule is PoolRule.CONCAT:
        return DiscreteJoint(probs, rule=PoolRule.CONCAT)
    return DiscreteJoint(
        probs,
        rule=PoolRule.ARITHMETIC,
        fg_values=_random_values(rng, nf),
        bg_values=_random_values(rng, nb),
        mix_weight=Fraction(int(rng.integers(1, 8)), 8),
    )


def random_joint(
    rng: np.random.Generator,
    ny: int = 2,
    nf: int = 3,
    nb: int = 3,
    rule: PoolRule = PoolRule.ARITHMETIC,
) -> DiscreteJoint:
    """Random joint with no independence structure (chain-rule identity still holds)."""
    p = rng.random((ny, nf, nb))
    p[rng.random((ny, nf, nb)) < 0.2] = 0.0
    if p.sum() == 0:
        p[0, 0, 0] = 1.0
    p /= p.sum()
    if rule is PoolRule.CONCAT:
        return DiscreteJoint(p, rule=PoolRule.CONCAT)
    return DiscreteJoint(
        p,
        rule=PoolRule.ARITHMETIC,
        fg_values=_random_values(rng, nf),
        bg_values=_random_values(rng, nb),
        mix_weight=Fraction(int(rng.integers(1, 8)), 8),
    )
