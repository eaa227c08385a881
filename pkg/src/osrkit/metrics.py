"""Open set evaluation metrics with pinned tie conventions.

All metrics treat higher scores as more known.  Inputs are 1-d score arrays
for the known and unknown test populations, or per-sample records carrying
(is_known, true_label, predicted_label, score, feature).  Tie handling is part
of each metric's contract and is documented on the function.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError, ValidationError

# ceil(tpr*n) guard: absorbs float rounding of tpr*n without crossing a real integer
# boundary at desk-scale n
_CEIL_GUARD = 1e-9


def _scores(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeError(f"{name} scores must be non-empty")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} scores contain non-finite values")
    return a


def auroc(known, unknown) -> float:
    """Probability a random known outranks a random unknown; ties count 1/2.

    Computed from average ranks in O(n log n); exactly equal to the pairwise
    count with half-credit for ties.
    """
    k = _scores(known, "known")
    u = _scores(unknown, "unknown")
    pooled = np.concatenate([k, u])
    n = pooled.size
    order = np.argsort(pooled, kind="mergesort")
    sorted_vals = pooled[order]
    bounds = np.flatnonzero(np.diff(sorted_vals)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [n]])
    # ranks are 1-based; a tie group spanning sorted positions [s, e) averages to (s+1+e)/2
    group_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, ends - starts)
    rank_sum = ranks[: k.size].sum()
    return float((rank_sum - k.size * (k.size + 1) / 2.0) / (k.size * u.size))


def _accept_count(n: int, tpr: float) -> int:
    if not (0.0 < tpr <= 1.0):
        raise ParameterError(f"tpr must lie in (0, 1], got {tpr}")
    t = tpr * n
    return int(math.ceil(t - _CEIL_GUARD * max(1.0, abs(t))))


def acceptance_threshold(known, tpr: float = 0.95) -> float:
    """Largest threshold keeping at least ceil(tpr*n) known scores at or above it."""
    k = _scores(known, "known")
    m = _accept_count(k.size, tpr)
    return float(np.sort(k)[::-1][m - 1])


def tnr_at_tpr(known, unknown, tpr: float = 0.95) -> float:
    """Fraction of unknown scores strictly below the acceptance threshold."""
    u = _scores(unknown, "unknown")
    t = acceptance_threshold(known, tpr)
    return float(np.count_nonzero(u < t) / u.size)


def fpr_at_tpr(known, unknown, tpr: float = 0.95) -> float:
    """Complement of tnr_at_tpr; the two sum to 1.0 exactly."""
    return 1.0 - tnr_at_tpr(known, unknown, tpr)


def _detection_candidates(k: np.ndarray, u: np.ndarray) -> np.ndarray:
    v = np.unique(np.concatenate([k, u]))
    mids = (v[:-1] + v[1:]) / 2.0 if v.size > 1 else np.empty(0)
    return np.concatenate([[-np.inf], mids, [np.inf]])


def dtacc(known, unknown) -> float:
    """Best balanced detection accuracy max_t 0.5*(TPR(t) + TNR(t)).

    Accept known when score >= t; thresholds sweep midpoints of the sorted
    distinct pooled scores plus the two infinities.
    """
    k = np.sort(_scores(known, "known"))
    u = np.sort(_scores(unknown, "unknown"))
    cand = _detection_candidates(k, u)
    tpr = (k.size - np.searchsorted(k, cand, side="left")) / k.size
    tnr = np.searchsorted(u, cand, side="left") / u.size
    return float(np.max(0.5 * (tpr + tnr)))


def aupr(pos, neg) -> float:
    """Area under precision-recall with the interpolated-precision envelope.

    Thresholds sweep the distinct scores descending with ties grouped; a point
    (R_j, P_j) is emitted per threshold.  The envelope takes the maximum
    precision at any recall >= R_j, and the area sums (R_j - R_{j-1}) times the
    envelope, from R_0 = 0.
    """
    p = _scores(pos, "positive")
    n = _scores(neg, "negative")
    scores = np.concatenate([p, n])
    is_pos = np.concatenate([np.ones(p.size, bool), np.zeros(n.size, bool)])
    order = np.argsort(-scores, kind="mergesort")
    s_sorted = scores[order]
    pos_sorted = is_pos[order]
    # last index of each tie group marks the state after the whole group is predicted positive
    group_end = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.concatenate([group_end, [s_sorted.size - 1]])
    tp = np.cumsum(pos_sorted)[ends]
    pp = ends + 1
    recall = tp / p.size
    precision = tp / pp
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def auin(known, unknown) -> float:
    """Precision-recall area with knowns as the positive class."""
    return aupr(known, unknown)


def auout(known, unknown) -> float:
    """Precision-recall area with unknowns as the positive class, ranked by low score."""
    return aupr(-_scores(unknown, "unknown"), -_scores(known, "known"))


def ft_cos(known_feats, unknown_feats) -> float:
    """Mean cosine similarity over all known/unknown feature pairs."""
    k = np.asarray(known_feats, dtype=np.float64)
    u = np.asarray(unknown_feats, dtype=np.float64)
    if k.ndim != 2 or u.ndim != 2 or k.shape[1] != u.shape[1]:
        raise ShapeError(f"feature arrays must be 2-d with equal width, got {k.shape} and {u.shape}")
    if k.shape[0] == 0 or u.shape[0] == 0:
        raise ShapeError("feature arrays must be non-empty")
    kn = np.linalg.norm(k, axis=1)
    un = np.linalg.norm(u, axis=1)
    if np.any(kn == 0) or np.any(un == 0):
        raise ValidationError("zero feature vector has no cosine direction")
    sims = (k / kn[:, None]) @ (u / un[:, None]).T
    return float(np.mean(sims))


def _split_records(records):
    known = [r for r in records if r.is_known]
    unknown = [r for r in records if not r.is_known]
    return known, unknown


def accuracy(records) -> float:
    """Closed-set accuracy over the known records."""
    known, _ = _split_records(records)
    if not known:
        raise ShapeError("no known records")
    hits = sum(1 for r in known if r.predicted_label == r.true_label)
    return hits / len(known)


def open_macro_f1(records, num_classes: int, tpr: float = 0.95) -> float:
    """Macro-F1 over the known classes plus a rejection class.

    The rejection threshold keeps tpr of the known records accepted; records
    scoring below it are predicted as class ``num_classes``.  Unknown records
    have that class as ground truth.  Empty classes contribute F1 = 0.
    """
    known, unknown = _split_records(records)
    if not known:
        raise ShapeError("no known records to calibrate the threshold")
    if num_classes < 1:
        raise ParameterError(f"num_classes must be positive, got {num_classes}")
    for r in known:
        if not (0 <= r.true_label < num_classes):
            raise ValidationError(f"known true label {r.true_label} outside [0, {num_classes})")
    thr = acceptance_threshold([r.score for r in known], tpr)
    reject = num_classes
    f1s = []
    truths = [(r.true_label if r.is_known else reject) for r in records]
    preds = [(reject if r.score < thr else r.predicted_label) for r in records]
    for c in range(num_classes + 1):
        tp = sum(1 for t, p in zip(truths, preds) if t == c and p == c)
        fp = sum(1 for t, p in zip(truths, preds) if t != c and p == c)
        fn = sum(1 for t, p in zip(truths, preds) if t == c and p != c)
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(sum(f1s) / len(f1s))


def oscr(records) -> float:
    """Area under correct classification rate versus false positive rate.

    At threshold t, CCR is the fraction of known records that are correctly
    classified and score at least t; FPR is the fraction of unknown records
    scoring at least t.  The curve sweeps the distinct pooled scores from high
    to low with infinite sentinels, and the area is the trapezoid sum.
    """
    known, unknown = _split_records(records)
    if not known or not unknown:
        raise ShapeError("oscr needs both known and unknown records")
    k_scores = np.array([r.score for r in known], dtype=np.float64)
    corr = np.sort(k_scores[[r.predicted_label == r.true_label for r in known]])
    u_scores = np.sort(np.array([r.score for r in unknown], dtype=np.float64))
    thresholds = np.concatenate(
        [[np.inf], np.unique(np.concatenate([k_scores, u_scores]))[::-1], [-np.inf]]
    )
    ccr = (corr.size - np.searchsorted(corr, thresholds, side="left")) / len(known)
    fpr = (u_scores.size - np.searchsorted(u_scores, thresholds, side="left")) / len(unknown)
    return float(np.sum(0.5 * (ccr[1:] + ccr[:-1]) * np.diff(fpr)))


STANDARD_TPR = 0.95


def evaluate_records(records, num_classes: int) -> dict[str, float]:
    """All applicable metrics for one batch of score records.

    Feature-based entries appear only when every record carries a feature.
    """
    known, unknown = _split_records(records)
    if not known:
        raise ShapeError("no known records")
    out = {"accuracy": accuracy(records)}
    if unknown:
        ks = [r.score for r in known]
        us = [r.score for r in unknown]
        out["auroc"] = auroc(ks, us)
        out["tnr_at_95tpr"] = tnr_at_tpr(ks, us, STANDARD_TPR)
        out["fpr_at_95tpr"] = fpr_at_tpr(ks, us, STANDARD_TPR)
        out["dtacc"] = dtacc(ks, us)
        out["auin"] = auin(ks, us)
        out["auout"] = auout(ks, us)
        out["oscr"] = oscr(records)
        out["open_macro_f1"] = open_macro_f1(records, num_classes, STANDARD_TPR)
        if all(r.feature is not None for r in records):
            kf = np.stack([r.feature for r in known])
            uf = np.stack([r.feature for r in unknown])
            out["ft_auc"] = auroc(np.linalg.norm(kf, axis=1), np.linalg.norm(uf, axis=1))
            out["ft_cos"] = ft_cos(kf, uf)
    return out


def write_report(path, rows) -> None:
    """Write (experiment, metric, value) rows as tab-delimited text."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("experiment\tmetric\tvalue\n")
        for exp, metric, value in rows:
            fh.write(f"{exp}\t{metric}\t{value!r}\n")


def read_report(path) -> list[tuple[str, str, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "experiment\tmetric\tvalue":
            raise ValidationError(f"unrecognized report header in {path}")
        for line in fh:
            exp, metric, value = line.rstrip("\n").split("\t")
            rows.append((exp, metric, float(value)))
    return rows
