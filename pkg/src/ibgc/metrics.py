"""Calibration errors, predictive entropy, receptive-field sensitivity,
and the synthetic corruption-robustness harness.

Calibration follows the per-class convention: every prediction
contributes one (confidence, correctness) pair per class, so a
well-calibrated M-class model puts most pairs near confidence 1/M or
below.  The corruption suite uses desk-scale parameter tables documented
in the report header; they are not the ImageNet-C kernels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import ood
from . import tensor as T
from .errors import DataError


@dataclass
class CalibrationCurve:
    edges: np.ndarray  # bins + 1 equal-width edges on [0, 1]
    midpoints: np.ndarray
    accuracy: np.ndarray  # NaN where a bin is empty
    counts: np.ndarray
    n_total: int


def calibration_curve(confidences, correct_flags, bins=15) -> CalibrationCurve:
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    correct = np.asarray(correct_flags, dtype=np.float64).ravel()
    if conf.size == 0:
        raise DataError("calibration needs at least one prediction")
    if conf.shape != correct.shape:
        raise DataError("confidences and flags must align")
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise DataError("confidences must lie in [0, 1]")
    if bins < 1:
        raise DataError("need at least one bin")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    hits = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore"):
        acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return CalibrationCurve(
        edges=edges,
        midpoints=0.5 * (edges[:-1] + edges[1:]),
        accuracy=acc,
        counts=counts,
        n_total=int(conf.size),
    )


def ece(curve: CalibrationCurve):
    """Bin-count-weighted mean distance of accuracy from the diagonal,
    with the bin midpoint standing in for its confidence."""
    filled = curve.counts > 0
    gaps = np.abs(curve.midpoints[filled] - curve.accuracy[filled])
    return float(np.sum(curve.counts[filled] * gaps) / curve.n_total)


def mce(curve: CalibrationCurve):
    """Largest distance from the diagonal over the non-empty bins."""
    filled = curve.counts > 0
    return float(np.max(np.abs(curve.midpoints[filled] - curve.accuracy[filled])))


def oce(confidences, correct_flags, c_crit=0.997):
    """Error rate among predictions at confidence >= c_crit, normalized
    by the tail mass 1 - c_crit.  None when nothing reaches c_crit:
    overconfidence is then unmeasurable, not zero."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    correct = np.asarray(correct_flags, dtype=np.float64).ravel()
    if conf.size == 0:
        raise DataError("calibration needs at least one prediction")
    if not 0.0 < c_crit < 1.0:
        raise DataError("c_crit must lie strictly inside (0, 1)")
    sel = conf >= c_crit
    if not np.any(sel):
        return None
    return float((1.0 - correct[sel].mean()) / (1.0 - c_crit))


def predictive_entropy(posterior):
    """-sum p log p in nats, with 0 log 0 = 0; accepts one distribution
    or a batch of rows."""
    p = np.asarray(posterior, dtype=np.float64)
    single = p.ndim == 1
    rows = p[None] if single else p
    if np.any(rows < -1e-12) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-8):
        raise DataError("posterior rows must be distributions")
    safe = np.clip(rows, 1e-300, 1.0)
    h = -np.sum(np.where(rows > 0.0, rows * np.log(safe), 0.0), axis=1)
    return float(h[0]) if single else h


# ------------------------------------------------------------ receptive field

@dataclass
class ReceptiveField:
    sensitivity: np.ndarray  # (H, W), mean L1 input gradient of center column
    fwhm: float  # width of the central row profile at half its maximum
    center: tuple


def _half_max_width(profile):
    p = np.asarray(profile, dtype=np.float64)
    half = p.max() / 2.0
    above = np.nonzero(p >= half)[0]
    lo, hi = int(above[0]), int(above[-1])
    left = float(lo)
    if lo > 0:
        left = lo - 1 + (half - p[lo - 1]) / (p[lo] - p[lo - 1])
    right = float(hi)
    if hi < p.size - 1:
        right = hi + (p[hi] - half) / (p[hi] - p[hi + 1])
    return right - left


def effective_receptive_field(model, images) -> ReceptiveField:
    """Mean absolute gradient of the central pre-pool feature column
    with respect to every input pixel, summed over feature and image
    channels and averaged over the batch."""
    x = np.asarray(images, dtype=np.float64)
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DataError("receptive field needs spatial extent")
    fc, fh, fw = model.feature_shape
    cy, cx = fh // 2, fw // 2
    sens = np.zeros((h, w))
    for l in range(fc):
        with T.Tape() as tape:
            x_t = T.Tensor(x, requires_grad=True)
            feat = model.features_before_pool(x_t)
            col = T.narrow(T.narrow(T.narrow(feat, 1, l, 1), 2, cy, 1), 3, cx, 1)
            total = T.sum(col)
        tape.backward(total)
        sens += np.abs(x_t.grad).sum(axis=1).mean(axis=0)
        for _, p in model.params():
            p.grad = None
    profile = sens[h // 2]
    return ReceptiveField(sensitivity=sens, fwhm=_half_max_width(profile),
                          center=(cy, cx))


# -------------------------------------------------------------- corruptions

GAUSSIAN_SIGMAS = (0.04, 0.08, 0.12, 0.16, 0.2)
SHOT_RATES = (60.0, 25.0, 12.0, 5.0, 3.0)  # photons per unit intensity
BLUR_PASSES = (1, 2, 3, 4, 5)  # repeated 3x3 box filter
CONTRAST_FACTORS = (0.75, 0.6, 0.45, 0.3, 0.15)
BRIGHTNESS_SHIFTS = (0.08, 0.16, 0.24, 0.32, 0.4)

CORRUPTIONS = ("gaussian_noise", "shot_noise", "defocus_blur", "contrast",
               "brightness")


def _box_blur(x, passes):
    out = np.array(x, copy=True)
    for _ in range(passes):
        padded = np.pad(out, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += padded[:, :, dy:dy + out.shape[2], dx:dx + out.shape[3]]
        out = acc / 9.0
    return out


def corrupt(x, kind, severity, seed=0):
    """Severity 0 returns the input untouched; severities 1..5 apply the
    documented desk-scale parameter tables."""
    if kind not in CORRUPTIONS:
        raise DataError("unknown corruption kind: %s" % kind)
    if not 0 <= severity <= 5:
        raise DataError("severity must be 0..5")
    if severity == 0:
        return np.array(x, copy=True)
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), CORRUPTIONS.index(kind), severity]))
    i = severity - 1
    if kind == "gaussian_noise":
        return np.clip(x + rng.normal(0.0, GAUSSIAN_SIGMAS[i], x.shape), 0.0, 1.0)
    if kind == "shot_noise":
        lam = SHOT_RATES[i]
        return np.clip(rng.poisson(np.asarray(x) * lam) / lam, 0.0, 1.0)
    if kind == "defocus_blur":
        return np.clip(_box_blur(x, BLUR_PASSES[i]), 0.0, 1.0)
    if kind == "contrast":
        mean = np.asarray(x).mean(axis=(1, 2, 3), keepdims=True)
        return np.clip((x - mean) * CONTRAST_FACTORS[i] + mean, 0.0, 1.0)
    shift = BRIGHTNESS_SHIFTS[i]
    return np.clip(np.asarray(x) + shift, 0.0, 1.0)


_PARAM_TABLES = {
    "gaussian_noise": ("sigma", (0,) + GAUSSIAN_SIGMAS),
    "shot_noise": ("photons_per_unit", (math.inf,) + SHOT_RATES),
    "defocus_blur": ("box3_passes", (0,) + BLUR_PASSES),
    "contrast": ("factor", (1.0,) + CONTRAST_FACTORS),
    "brightness": ("shift", (0.0,) + BRIGHTNESS_SHIFTS),
}


@dataclass
class CorruptionReport:
    rows: list  # dicts: kind, severity, param, error, delta_entropy, ood_auc
    ce_ratios: dict | None  # per kind: error sum / baseline error sum
    mce: float | None
    conventions: str

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            for line in self.conventions.splitlines():
                fh.write("# %s\n" % line)
            writer = csv.DictWriter(
                fh, fieldnames=["kind", "severity", "param", "error",
                                "delta_entropy", "ood_auc"])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})
            if self.ce_ratios is not None:
                fh.write("# ce_ratio per kind: %s\n" % ",".join(
                    "%s=%r" % (k, v) for k, v in self.ce_ratios.items()))
                fh.write("# mce=%r\n" % self.mce)


_CONVENTIONS = """corruption robustness report
error: top-1 error rate of the model on the corrupted images
delta_entropy: mean predictive entropy minus the clean mean, nats
ood_auc: two-sided typicality ROC-AUC of corrupted vs clean scores, percent
severity 0 is the uncorrupted evaluation; parameters per kind:
gaussian_noise sigma {0.04,0.08,0.12,0.16,0.2}; shot_noise photon rates
{60,25,12,5,3}; defocus_blur 3x3 box passes {1..5}; contrast factors
{0.75,0.6,0.45,0.3,0.15}; brightness shifts {0.08,...,0.4}
ce_ratio(kind) = sum over severities 1-5 of error / same sum for the
baseline model on identical corrupted images; mce = mean of ce_ratio"""


def corruption_suite(model, clean_set, baseline_model=None, seed=0):
    """Evaluate a model (and optionally a baseline on identical inputs)
    over the corruption grid; see the report's conventions header."""
    x, labels = clean_set
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    clean_pred = model.predict(x)
    clean_err = float(np.mean(clean_pred.labels != labels))
    clean_ent = float(np.mean(predictive_entropy(clean_pred.posterior)))
    refs = ood.ScoreSet(clean_pred.marginal)
    clean_atyp = ood.atypicality(refs, "typicality", clean_pred.marginal)

    rows = []
    sums = {}
    base_sums = {}
    for kind in CORRUPTIONS:
        name, params = _PARAM_TABLES[kind]
        sums[kind] = 0.0
        base_sums[kind] = 0.0
        for severity in range(6):
            xc = corrupt(x, kind, severity, seed=seed)
            pred = model.predict(xc)
            err = float(np.mean(pred.labels != labels))
            ent = float(np.mean(predictive_entropy(pred.posterior)))
            auc = ood.roc_auc(clean_atyp,
                              ood.atypicality(refs, "typicality", pred.marginal))
            rows.append({
                "kind": kind, "severity": severity,
                "param": params[severity], "error": err,
                "delta_entropy": ent - clean_ent, "ood_auc": auc,
            })
            if severity > 0:
                sums[kind] += err
                if baseline_model is not None:
                    bpred = baseline_model.predict(xc)
                    base_sums[kind] += float(np.mean(bpred.labels != labels))

    ratios = None
    mean_ratio = None
    if baseline_model is not None:
        ratios = {}
        for kind in CORRUPTIONS:
            if base_sums[kind] == 0.0:
                ratios[kind] = 1.0 if sums[kind] == 0.0 else math.inf
            else:
                ratios[kind] = sums[kind] / base_sums[kind]
        mean_ratio = float(np.mean([ratios[k] for k in CORRUPTIONS]))
    return CorruptionReport(rows=rows, ce_ratios=ratios, mce=mean_ratio,
                            conventions=_CONVENTIONS)
