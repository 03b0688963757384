"""Likelihood-based out-of-distribution detection.

A reference population of in-distribution log-likelihood scores defines
where "typical" samples land.  Three rejection rules are supported:

* ``single_threshold`` rejects the low tail only.  Far-out samples can
  land ABOVE the training scores and sail through, which is the failure
  mode the other two rules fix.
* ``typicality`` rejects outside a band centered on the mean reference
  score, symmetric in distance, sized so a fraction p of the reference
  population falls outside.
* ``two_tailed_quantile`` rejects below the p/2 and above the 1 - p/2
  empirical quantiles.

Quantiles use linear interpolation between order statistics throughout,
so the false-positive rate on the reference population lands on p
exactly whenever the scores are distinct.
"""

import numpy as np

from .errors import DataError


class ScoreSet:
    """Sorted reference log-likelihoods (nats per sample)."""

    def __init__(self, scores):
        scores = np.sort(np.asarray(scores, dtype=np.float64))
        if scores.ndim != 1 or scores.size < 2:
            raise DataError("a score set needs at least two scores")
        if not np.all(np.isfinite(scores)):
            raise DataError("scores must be finite")
        self.scores = scores
        self.n = scores.size
        self.mean = float(scores.mean())

    def quantile(self, q):
        return float(np.quantile(self.scores, q))

    def cdf(self, values):
        """Empirical CDF: fraction of reference scores <= value."""
        v = np.asarray(values, dtype=np.float64)
        return np.searchsorted(self.scores, v, side="right") / self.n


KINDS = ("single_threshold", "typicality", "two_tailed_quantile")


class OodTest:
    """A fitted rejection rule; immutable after construction."""

    def __init__(self, kind, p, lower=None, upper=None, center=None,
                 radius=None, degenerate=False):
        self.kind = kind
        self.p = p
        self.lower = lower
        self.upper = upper
        self.center = center
        self.radius = radius
        self.degenerate = degenerate

    def rejects(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        if self.kind == "single_threshold":
            return s < self.lower
        if self.kind == "typicality":
            return np.abs(s - self.center) > self.radius
        return (s < self.lower) | (s > self.upper)


def fit_test(refs: ScoreSet, kind, p) -> OodTest:
    """Calibrate a rejection rule so the reference false-positive rate
    is p.  The smallest resolvable rate is one reference sample, so any
    tail asked to hold less than half a sample is rounded down to an
    empty rejection zone (p -> 0 accepts everything).  Degenerate
    references (all scores equal) collapse the thresholds; the fitted
    test is flagged and rejects nothing."""
    if kind not in KINDS:
        raise DataError("unknown test kind: %s" % kind)
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    degenerate = refs.scores[0] == refs.scores[-1]
    if kind == "single_threshold":
        lower = refs.quantile(p) if p * refs.n >= 0.5 else -np.inf
        return OodTest(kind, p, lower=lower, degenerate=degenerate)
    if kind == "typicality":
        if p * refs.n >= 0.5:
            dist = np.abs(refs.scores - refs.mean)
            radius = float(np.quantile(dist, 1.0 - p))
        else:
            radius = np.inf
        return OodTest(kind, p, center=refs.mean, radius=radius,
                       degenerate=degenerate)
    if p * refs.n >= 1.0:  # half a sample for each of the two tails
        lower, upper = refs.quantile(p / 2.0), refs.quantile(1.0 - p / 2.0)
    else:
        lower, upper = -np.inf, np.inf
    return OodTest(kind, p, lower=lower, upper=upper, degenerate=degenerate)


def is_ood(scores, test: OodTest):
    """Boolean rejection decisions; scalar in, scalar out."""
    out = test.rejects(scores)
    return bool(out) if np.isscalar(scores) else out


def atypicality(refs: ScoreSet, kind, scores):
    """Scalar orderings induced by sweeping p for each test kind: larger
    means rejected at smaller p (more atypical).

    single_threshold: -score; typicality: |score - mean(refs)|;
    two_tailed_quantile: max(F(score), 1 - F(score)) under the reference
    empirical CDF.
    """
    if kind not in KINDS:
        raise DataError("unknown test kind: %s" % kind)
    s = np.asarray(scores, dtype=np.float64)
    if kind == "single_threshold":
        return -s
    if kind == "typicality":
        return np.abs(s - refs.mean)
    f = refs.cdf(s)
    return np.maximum(f, 1.0 - f)


def roc_auc(in_scores, ood_scores):
    """Area under the ROC curve, in percent, for atypicality scores
    (higher = more out-of-distribution).  Computed by sweeping a
    rejection threshold over the pooled score values; tied scores earn
    the trapezoidal mid-rank credit, so 50 means chance and 100 a
    perfect separation."""
    a = np.asarray(in_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise DataError("both score populations must be nonempty")
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    fpr = [0.0]
    tpr = [0.0]
    for t in thresholds:
        fpr.append(float(np.mean(a >= t)))
        tpr.append(float(np.mean(b >= t)))
    fpr.append(1.0)
    tpr.append(1.0)
    f = np.asarray(fpr)
    t = np.asarray(tpr)
    area = np.sum(np.diff(f) * 0.5 * (t[1:] + t[:-1]))
    return 100.0 * float(area)
