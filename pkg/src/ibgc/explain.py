"""Explanations read directly off the latent mixture geometry.

Everything here is a pure function of a trained model: projecting a
latent code onto the axis between the two top class means, closed-form
class similarity through the expected confidence of a two-component
mixture, per-pixel heatmaps that decompose the latent log-likelihood
and the exact class posterior, and a plane-constrained refit of
selected class means whose decision boundaries form a Voronoi
tessellation of the plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy import stats

from .errors import DataError, NumericError

# central 90% half-width of a unit Gaussian, Phi^-1(0.95)
GAUSS_90 = 1.6448536269514722


# ------------------------------------------------------------- projection

@dataclass
class DecisionProjection:
    h: float  # coordinate along the mu1 -> mu2 axis (0 at mu1)
    v: float  # in-span radial distance from that axis
    delta_mu: float
    span_dim: int
    h_mark: float  # central-90% half-width along the axis
    v_mark: float  # 90% quantile of the radial distance off the axis


def project_decision_space(z, top_mus) -> DecisionProjection:
    """Project a latent code onto the affine span of the top class means.

    The first axis runs from the best mean toward the runner-up; v is
    the distance from that axis inside the span.  For codes inside the
    span, sqrt(h^2 + v^2) recovers the distance to the first mean
    exactly.  The marks bound the central 90% of a unit-variance
    component along each coordinate; the radial mark is the chi
    quantile in (span_dim - 1) dimensions.
    """
    mus = np.asarray(top_mus, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).ravel()
    if mus.ndim != 2 or mus.shape[0] < 2 or mus.shape[1] != z.size:
        raise ValueError("need at least two means matching the latent length")
    delta = mus[1] - mus[0]
    dmu = float(np.linalg.norm(delta))
    if dmu < 1e-12:
        raise DataError("top two class means coincide")

    centered = mus - mus.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    span_dim = int(np.sum(sv > 1e-9 * max(1.0, sv[0])))

    e = delta / dmu
    y = z - mus[0]
    h = float(e @ y)
    # in-span residual orthogonal to e
    dirs = (mus[1:] - mus[0]) - np.outer((mus[1:] - mus[0]) @ e, e)
    u, s, _ = np.linalg.svd(dirs.T, full_matrices=False)
    basis = u[:, s > 1e-9 * max(1.0, s[0] if s.size else 1.0)]
    v = float(np.linalg.norm(basis.T @ y)) if basis.shape[1] else 0.0

    df = span_dim - 1
    v_mark = float(stats.chi.ppf(0.9, df)) if df > 0 else 0.0
    return DecisionProjection(h=h, v=v, delta_mu=dmu, span_dim=span_dim,
                              h_mark=GAUSS_90, v_mark=v_mark)


# ---------------------------------------------------- expected confidence

def confidence_density(c, delta_mu):
    """Unnormalized density of the winning posterior for two unit-variance
    components a distance delta_mu apart:

        rho(c) = (c - c^2)^(-3/2) exp(-log^2(1/c - 1) / (2 delta_mu^2))

    Defined for c in [1/2, 1); the left endpoint evaluates to 8.
    """
    if not delta_mu > 0:
        raise ValueError("delta_mu must be positive")
    arr = np.asarray(c, dtype=np.float64)
    if np.any(arr < 0.5) or np.any(arr >= 1.0):
        raise ValueError("confidence must lie in [1/2, 1)")
    u = np.log(1.0 / arr - 1.0)
    out = (arr - arr * arr) ** -1.5 * np.exp(-u * u / (2.0 * delta_mu ** 2))
    return float(out) if np.isscalar(c) else out


def _confidence_integrals(delta_mu):
    """Numerator and denominator of C-bar after substituting c = sigma(dmu*t).

    The substitution removes the endpoint singularity: both integrands
    become exp(phi(t)) with phi(t) = eta(dmu*t) - t^2/2 and
    eta(x) = x/2 + log(1 + e^-x), smooth with Gaussian decay.  The
    common peak value is divided out, so only the ratio is meaningful.
    """

    def phi(t):
        x = delta_mu * t
        return 0.5 * x + np.log1p(np.exp(-x)) - 0.5 * t * t

    hi = 0.5 * delta_mu + 15.0
    grid = np.linspace(0.0, hi, 4001)
    m = float(np.max(phi(grid)))

    def den_f(t):
        return math.exp(phi(t) - m)

    def num_f(t):
        x = delta_mu * t
        conf = 1.0 / (1.0 + math.exp(-x)) if x < 700 else 1.0
        return conf * math.exp(phi(t) - m)

    num, num_err = integrate.quad(num_f, 0.0, hi, epsabs=1e-12, epsrel=1e-10,
                                  limit=200)
    den, den_err = integrate.quad(den_f, 0.0, hi, epsabs=1e-12, epsrel=1e-10,
                                  limit=200)
    if den <= 0 or num_err > 1e-6 * max(num, 1.0) or den_err > 1e-6 * max(den, 1.0):
        raise NumericError("confidence quadrature did not converge")
    return num, den


def expected_confidence(delta_mu):
    """Mean winning-class posterior, C-bar in [1/2, 1), for two
    unit-variance components separated by delta_mu; delta_mu = 0 is the
    coincident-class limit 1/2."""
    if delta_mu < 0:
        raise ValueError("delta_mu must be non-negative")
    if delta_mu == 0.0:
        return 0.5
    num, den = _confidence_integrals(float(delta_mu))
    return float(num / den)


@dataclass
class SimilarityEntry:
    delta_mu: float
    expected_confidence: float
    expected_uncertainty: float
    diagonal: bool = False


def similarity_matrix(head):
    """M x M grid of SimilarityEntry over the assembled class means.

    Diagonal entries carry distance 0 and are flagged; expected
    confidence there is the coincident-class limit 1/2.
    """
    mus = head.means()
    m = mus.shape[0]
    d = np.linalg.norm(mus[:, None, :] - mus[None, :, :], axis=2)
    cache = {}
    grid = []
    for i in range(m):
        row = []
        for j in range(m):
            dmu = float(d[i, j])
            key = round(dmu, 12)
            if key not in cache:
                cache[key] = expected_confidence(dmu)
            cbar = cache[key]
            row.append(SimilarityEntry(delta_mu=dmu, expected_confidence=cbar,
                                       expected_uncertainty=1.0 - cbar,
                                       diagonal=i == j))
        grid.append(row)
    return grid


# ---------------------------------------------------------------- heatmaps

@dataclass
class Heatmap:
    grid: np.ndarray  # k x l, pre-pool spatial layout
    kind: str  # "saliency" or "class_posterior"
    y: int | None = None


def _pixel_distances(z, head, pool):
    """Per-pixel squared distance columns: unpool z - mu_y back to the
    spatial feature layout and take channel-wise squared norms, giving a
    (M, k, l) array whose spatial sum is ||z - mu_y||^2 per class."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if pool.dim != head.dim or z.size != head.dim:
        raise ValueError("latent length does not match the pooled feature layout")
    w = pool.inverse(z[None, :] - head.means())
    return np.sum(w * w, axis=1)


def saliency_heatmap(z, head, pool) -> Heatmap:
    """Per-pixel information content -log sum_y q(w_kl|y) p(y), the
    mixture negative log-density of the unpooled feature columns
    (normalization constant dropped)."""
    d2 = _pixel_distances(z, head, pool)
    a = head.log_priors[:, None, None] - 0.5 * d2
    m = a.max(axis=0)
    grid = -(m + np.log(np.exp(a - m).sum(axis=0)))
    return Heatmap(grid=grid, kind="saliency")


def class_heatmap(z, head, pool, y, contrast=0.03) -> Heatmap:
    """Spatial decomposition of the class posterior: exponentiating the
    grid sum reproduces posterior_y exactly.

    Each cell holds log p(w_kl|y) minus a share of the mixture
    aggregate S = log sum_y' q(z|y') p(y'); the shares follow the
    per-pixel mixture density, min-max normalized to [0,1] and lifted
    by ``contrast``, so flat regions still receive weight.  Log-priors
    are spread evenly over cells, keeping the identity exact for any
    prior vector.  Degenerate weights fall back to an even split.
    """
    if contrast < 0:
        raise ValueError("contrast must be non-negative")
    d2 = _pixel_distances(z, head, pool)
    m_classes, k, l = d2.shape
    if not 0 <= y < m_classes:
        raise ValueError("class index out of range")
    cells = k * l

    ll_pix = head.log_priors[:, None, None] / cells - 0.5 * d2
    s_y = ll_pix.sum(axis=(1, 2))
    top = s_y.max()
    s_total = top + math.log(np.exp(s_y - top).sum())

    mix = head.log_priors[:, None, None] - 0.5 * d2
    mx = mix.max(axis=0)
    mix = mx + np.log(np.exp(mix - mx).sum(axis=0))
    span = mix.max() - mix.min()
    if span < 1e-12:
        weights = np.full((k, l), 1.0)
    else:
        weights = (mix - mix.min()) / span + contrast
        if weights.sum() <= 0:
            weights = np.full((k, l), 1.0)
    s_kl = s_total * weights / weights.sum()
    return Heatmap(grid=ll_pix[y] - s_kl, kind="class_posterior", y=int(y))


# ------------------------------------------------- 2d decision space refit

@dataclass
class Fit2dReport:
    classes: tuple
    origin: np.ndarray  # (D,)
    basis: np.ndarray  # (D, 2), orthonormal
    coords: np.ndarray  # (K, 2) per-class plane coordinates
    means: np.ndarray  # (K, D) constrained means
    acc_before: float
    acc_after: float
    retention: float
    voronoi_agreement: float
    sv3: float  # third singular value of the centered constrained means


def fit_2d_decision_space(model, class_subset, x, labels,
                          epochs=100, lr=0.5) -> Fit2dReport:
    """Constrain the selected class means to a 2-plane and fine-tune.

    The plane is fixed from a principal-component fit of the selected
    means; the per-class plane coordinates are then tuned by full-batch
    gradient descent on the subset cross-entropy with the flow frozen.
    Within the plane the decision regions of the refit head are the
    Voronoi cells of the class coordinates (uniform priors), which the
    report verifies on the supplied data.
    """
    subset = tuple(sorted(set(int(c) for c in class_subset)))
    if len(subset) < 3:
        raise ValueError("need at least three classes to span a plane")
    if subset[0] < 0 or subset[-1] >= model.head.n_classes:
        raise ValueError("class index out of range")

    labels = np.asarray(labels)
    keep = np.isin(labels, subset)
    if not np.any(keep):
        raise ValueError("no samples from the selected classes")
    x = np.asarray(x, dtype=np.float64)[keep]
    remap = {c: i for i, c in enumerate(subset)}
    ys = np.array([remap[int(c)] for c in labels[keep]])

    pred = model.predict(x)
    z = pred.z
    sub_cols = np.array(subset)
    acc_before = float(np.mean(np.argmax(pred.posterior[:, sub_cols], axis=1) == ys))

    mus = model.head.means()[sub_cols]
    origin = mus.mean(axis=0)
    centered = mus - origin
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2].T
    coords = centered @ basis
    p = (z - origin) @ basis

    n = p.shape[0]
    onehot = np.zeros((n, len(subset)))
    onehot[np.arange(n), ys] = 1.0
    for _ in range(int(epochs)):
        d2 = ((p[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        logits = -0.5 * d2
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        resid = (prob - onehot) / n
        grad = resid[:, :, None] * (p[:, None, :] - coords[None, :, :])
        coords -= lr * grad.sum(axis=0)
        if not np.all(np.isfinite(coords)):
            raise NumericError("plane finetune diverged")

    means = origin + coords @ basis.T
    d2 = ((p[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    pred_soft = np.argmin(d2, axis=1)
    acc_after = float(np.mean(pred_soft == ys))
    # nearest-center rule equals the softmax argmax under uniform priors
    full_d2 = ((z[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    agreement = float(np.mean(np.argmin(full_d2, axis=1) == pred_soft))
    sv = np.linalg.svd(means - means.mean(axis=0), compute_uv=False)
    return Fit2dReport(
        classes=subset, origin=origin, basis=basis, coords=coords,
        means=means, acc_before=acc_before, acc_after=acc_after,
        retention=acc_after / acc_before if acc_before > 0 else math.nan,
        voronoi_agreement=agreement,
        sv3=float(sv[2]) if sv.size > 2 else 0.0,
    )
