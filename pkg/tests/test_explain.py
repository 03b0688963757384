"""Latent-geometry explanation tests.

Oracles: direct distance computations for the projection, the identity
between mean winning posterior and optimal-rule accuracy for expected
confidence (plus Monte-Carlo), and exact posterior reconstruction for
the heatmaps.
"""

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import chi, norm

from ibgc import explain, model
from ibgc.errors import DataError


def desk_model(n_classes=4, seed=3):
    return model.GenerativeClassifier(
        model.ModelConfig(n_classes=n_classes, hidden=8, seed=seed))


def toy_model(n_classes=4, seed=2):
    return model.GenerativeClassifier(
        model.ModelConfig(image_shape=(8, 1, 1), n_classes=n_classes,
                          hidden=6, depth=3, seed=seed))


def random_means(k=5, d=12, seed=0, scale=3.0):
    return scale * np.random.default_rng(seed).standard_normal((k, d))


# -------------------------------------------------------------- projection

def test_projection_at_first_mean():
    mus = random_means()
    p = explain.project_decision_space(mus[0], mus)
    assert abs(p.h) < 1e-12 and abs(p.v) < 1e-12


def test_projection_midpoint():
    mus = random_means(seed=1)
    p = explain.project_decision_space(0.5 * (mus[0] + mus[1]), mus)
    assert p.h == pytest.approx(0.5 * p.delta_mu, abs=1e-12)
    assert p.v < 1e-9
    assert p.delta_mu == pytest.approx(np.linalg.norm(mus[1] - mus[0]))


def test_projection_preserves_in_span_distances():
    mus = random_means(seed=7)
    rng = np.random.default_rng(8)
    for _ in range(20):
        w = rng.standard_normal(5)
        z = w @ mus / w.sum() if abs(w.sum()) > 0.1 else mus.mean(0)
        p = explain.project_decision_space(z, mus)
        assert np.hypot(p.h, p.v) == pytest.approx(np.linalg.norm(z - mus[0]), abs=1e-9)
        assert np.hypot(p.h - p.delta_mu, p.v) == pytest.approx(
            np.linalg.norm(z - mus[1]), abs=1e-9)


def test_projection_ignores_out_of_span_component():
    mus = random_means(seed=4)
    z_in = 0.3 * mus[2] + 0.7 * mus[3]
    # direction orthogonal to the affine span
    dirs = (mus[1:] - mus[0]).T
    q, _ = np.linalg.qr(np.concatenate([dirs, np.eye(12)], axis=1))
    ortho = q[:, 4]
    assert np.max(np.abs(dirs.T @ ortho)) < 1e-9
    a = explain.project_decision_space(z_in, mus)
    b = explain.project_decision_space(z_in + 5.0 * ortho, mus)
    assert a.h == pytest.approx(b.h, abs=1e-9)
    assert a.v == pytest.approx(b.v, abs=1e-9)


def test_projection_span_dim_and_marks():
    mus = random_means(seed=9)
    p = explain.project_decision_space(mus[0], mus)
    assert p.span_dim == 4
    assert p.h_mark == pytest.approx(norm.ppf(0.95), abs=1e-12)
    assert p.v_mark == pytest.approx(chi.ppf(0.9, 3), abs=1e-12)


def test_projection_planar_means():
    rng = np.random.default_rng(11)
    coords = rng.standard_normal((5, 2)) * 3.0
    basis = np.linalg.qr(rng.standard_normal((12, 2)))[0]
    mus = coords @ basis.T + rng.standard_normal(12)[None, :]
    p = explain.project_decision_space(mus[2], mus)
    assert p.span_dim == 2
    assert p.v_mark == pytest.approx(chi.ppf(0.9, 1), abs=1e-12)


def test_projection_coincident_means_raise():
    mus = random_means(seed=12)
    mus[1] = mus[0]
    with pytest.raises(DataError):
        explain.project_decision_space(mus[0], mus)


# ------------------------------------------------------ confidence density

def test_confidence_density_left_endpoint_is_8():
    for dmu in (0.3, 1.0, 7.0):
        assert explain.confidence_density(0.5, dmu) == pytest.approx(8.0, abs=1e-12)


def test_confidence_density_large_delta_drops_exponential():
    c = np.linspace(0.51, 0.99, 9)
    got = explain.confidence_density(c, 1e9)
    ref = (c - c * c) ** -1.5
    assert np.allclose(got, ref, rtol=1e-12)


def test_confidence_density_domain_errors():
    for bad in (0.3, 1.0, 1.2):
        with pytest.raises(ValueError):
            explain.confidence_density(bad, 1.0)
    with pytest.raises(ValueError):
        explain.confidence_density(0.7, 0.0)


def test_confidence_density_normalizes_to_one():
    # normalizer from adaptive quadrature in c, cross-checked against a
    # dense trapezoid in the log-odds substitution
    dmu = 1.5
    z_c, _ = integrate.quad(lambda c: explain.confidence_density(c, dmu),
                            0.5, 1.0, points=[1 - 1e-3, 1 - 1e-6], limit=200)
    u = np.linspace(0.0, 60.0, 200001)
    # (c - c^2)^(-1/2) = exp(u/2 + log(1 + e^-u)) at c = sigma(u)
    z_u = np.trapezoid(np.exp(0.5 * u + np.log1p(np.exp(-u))
                              - u * u / (2 * dmu ** 2)), u)
    assert z_c == pytest.approx(z_u, rel=1e-6)
    total, _ = integrate.quad(lambda c: explain.confidence_density(c, dmu) / z_c,
                              0.5, 1.0, points=[1 - 1e-3, 1 - 1e-6], limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


# ----------------------------------------------------- expected confidence

def test_expected_confidence_coincident_limit():
    assert explain.expected_confidence(0.0) == 0.5
    assert explain.expected_confidence(1e-6) == pytest.approx(0.5, abs=1e-3)
    with pytest.raises(ValueError):
        explain.expected_confidence(-1.0)


def test_expected_confidence_closed_form():
    # the mean winning posterior over the two-component mixture equals the
    # accuracy of the optimal decision rule, Phi(delta_mu / 2)
    for dmu in (0.5, 1.0, 2.0, 4.0, 8.0):
        assert explain.expected_confidence(dmu) == pytest.approx(
            norm.cdf(dmu / 2.0), abs=1e-7)


def test_expected_confidence_monte_carlo():
    rng = np.random.default_rng(0)
    n = 10 ** 6
    for dmu in (0.5, 1.0, 2.0, 4.0):
        comp = rng.integers(0, 2, n)
        z0 = rng.standard_normal(n) + comp * dmu
        gap = 0.5 * ((z0 - dmu) ** 2 - z0 ** 2)
        conf = 1.0 / (1.0 + np.exp(-np.abs(gap)))
        assert explain.expected_confidence(dmu) == pytest.approx(
            conf.mean(), abs=0.005)


def test_expected_confidence_monotone():
    grid = np.linspace(0.05, 8.0, 100)
    vals = [explain.expected_confidence(d) for d in grid]
    assert np.all(np.diff(vals) > 0)
    assert 0.5 < vals[0] and vals[-1] < 1.0


def test_expected_confidence_saturates():
    assert explain.expected_confidence(10.0) > 0.999


# ---------------------------------------------------------------- similarity

def test_similarity_symmetric_flagged_diagonal():
    net = desk_model()
    grid = explain.similarity_matrix(net.head)
    m = len(grid)
    for i in range(m):
        assert grid[i][i].diagonal
        assert grid[i][i].delta_mu == 0.0
        assert grid[i][i].expected_confidence == 0.5
        for j in range(m):
            assert grid[i][j].delta_mu == pytest.approx(grid[j][i].delta_mu, abs=1e-12)
            assert grid[i][j].expected_confidence == pytest.approx(
                grid[j][i].expected_confidence, abs=1e-12)
            assert grid[i][j].expected_uncertainty == pytest.approx(
                1.0 - grid[i][j].expected_confidence, abs=1e-15)


def test_similarity_identical_means_give_half():
    net = toy_model(n_classes=3)
    net.head.mu_mean.data[1] = net.head.mu_mean.data[0]
    grid = explain.similarity_matrix(net.head)
    assert not grid[0][1].diagonal
    assert grid[0][1].expected_confidence == 0.5


def test_similarity_matches_expected_confidence():
    net = toy_model()
    mus = net.head.means()
    grid = explain.similarity_matrix(net.head)
    for i in range(4):
        for j in range(4):
            dmu = float(np.linalg.norm(mus[i] - mus[j]))
            assert grid[i][j].expected_confidence == pytest.approx(
                explain.expected_confidence(dmu), abs=1e-12)


# ------------------------------------------------------------------ heatmaps

def test_saliency_single_class_matches_latent_distance():
    net = desk_model(n_classes=1)
    x = np.random.default_rng(0).random((3, 1, 16, 16))
    pred = net.predict(x)
    mu = net.head.means()[0]
    for i in range(3):
        hm = explain.saliency_heatmap(pred.z[i], net.head, net.blocks[-1])
        assert hm.kind == "saliency"
        assert hm.grid.shape == (2, 2)
        assert np.all(hm.grid >= 0)
        # orthonormal unpooling: the cells sum to half the squared distance
        assert hm.grid.sum() == pytest.approx(
            0.5 * np.sum((pred.z[i] - mu) ** 2), abs=1e-8)


def test_saliency_uniform_when_offset_is_constant():
    net = desk_model(n_classes=1)
    z = net.head.means()[0].copy()
    z[:64] += 1.3  # only per-channel means move: spatially constant offset
    hm = explain.saliency_heatmap(z, net.head, net.blocks[-1])
    assert np.ptp(hm.grid) < 1e-12


def test_saliency_matches_per_pixel_mixture():
    net = desk_model(n_classes=2)
    pool = net.blocks[-1]
    z = net.head.means()[0] + 0.5
    hm = explain.saliency_heatmap(z, net.head, pool)
    # rebuild from per-pixel mixture evaluated by hand
    w = pool.inverse(z[None, :] - net.head.means())
    d2 = np.sum(w * w, axis=1)
    ref = -np.log(np.sum(np.exp(net.head.log_priors[:, None, None] - 0.5 * d2),
                         axis=0))
    assert np.allclose(hm.grid, ref, atol=1e-10)


def test_class_heatmap_reconstructs_posterior():
    net = desk_model()
    x = np.random.default_rng(5).random((20, 1, 16, 16))
    pred = net.predict(x)
    pool = net.blocks[-1]
    for i in range(20):
        for y in range(4):
            hm = explain.class_heatmap(pred.z[i], net.head, pool, y)
            assert hm.kind == "class_posterior" and hm.y == y
            assert abs(np.exp(hm.grid.sum()) - pred.posterior[i, y]) < 1e-8


def test_class_heatmap_single_cell_is_log_posterior():
    net = toy_model()
    x = np.random.default_rng(6).random((4, 8, 1, 1))
    pred = net.predict(x)
    for i in range(4):
        hm = explain.class_heatmap(pred.z[i], net.head, net.blocks[-1], 2)
        assert hm.grid.shape == (1, 1)
        assert hm.grid[0, 0] == pytest.approx(np.log(pred.posterior[i, 2]),
                                              abs=1e-10)


def test_class_heatmap_contrast_moves_cells_not_sum():
    net = desk_model()
    z = net.head.means()[1] + np.linspace(-1, 1, net.dim)
    pool = net.blocks[-1]
    a = explain.class_heatmap(z, net.head, pool, 0, contrast=0.0)
    b = explain.class_heatmap(z, net.head, pool, 0, contrast=0.03)
    c = explain.class_heatmap(z, net.head, pool, 0, contrast=1.0)
    assert a.grid.sum() == pytest.approx(b.grid.sum(), abs=1e-10)
    assert b.grid.sum() == pytest.approx(c.grid.sum(), abs=1e-10)
    assert np.max(np.abs(a.grid - b.grid)) > 1e-12
    with pytest.raises(ValueError):
        explain.class_heatmap(z, net.head, pool, 0, contrast=-0.1)


def test_class_heatmap_degenerate_weights_fall_back_to_uniform():
    net = desk_model(n_classes=1)
    z = net.head.means()[0].copy()
    z[:64] += 0.7  # constant spatial offset -> flat mixture density
    hm = explain.class_heatmap(z, net.head, net.blocks[-1], 0)
    assert np.ptp(hm.grid) < 1e-12


def test_heatmap_input_validation():
    net = desk_model()
    pool = net.blocks[-1]
    with pytest.raises(ValueError):
        explain.saliency_heatmap(np.zeros(7), net.head, pool)
    with pytest.raises(ValueError):
        explain.class_heatmap(np.zeros(net.dim), net.head, pool, 9)


# --------------------------------------------------------- 2d decision refit

def planar_cluster_setup(bump=1.0, sigma=0.7, seed=7):
    net = toy_model()
    centers = np.zeros((4, 8))
    centers[:, 0] = [4.0, 4.0, -4.0, -4.0]
    centers[:, 1] = [4.0, -4.0, 4.0, -4.0]
    centers[:, 2] = [bump, -bump, -bump, bump]
    net.head.mu_mean.data[:] = centers
    labels = np.repeat(np.arange(4), 100)
    rng = np.random.default_rng(seed)
    z = centers[labels] + sigma * rng.standard_normal((400, 8))
    x = net.decode(z).reshape(400, 8, 1, 1)
    return net, x, labels


def test_fit2d_planar_means_unchanged_without_finetuning():
    net, x, labels = planar_cluster_setup(bump=0.0)
    before = net.head.means().copy()
    rep = explain.fit_2d_decision_space(net, [0, 1, 2, 3], x, labels, epochs=0)
    assert np.allclose(rep.means, before, atol=1e-9)
    assert rep.sv3 < 1e-8


def test_fit2d_constrains_to_plane_and_retains_accuracy():
    net, x, labels = planar_cluster_setup()
    rep = explain.fit_2d_decision_space(net, [0, 1, 2, 3], x, labels,
                                        epochs=60, lr=0.5)
    assert rep.sv3 < 1e-8
    assert rep.acc_before > 0.95
    assert rep.retention >= 0.9
    assert rep.voronoi_agreement == 1.0
    assert rep.coords.shape == (4, 2)
    assert np.allclose(rep.basis.T @ rep.basis, np.eye(2), atol=1e-10)


def test_fit2d_finetuning_reduces_cross_entropy():
    net, x, labels = planar_cluster_setup(bump=2.5, sigma=1.2)

    def subset_ce(rep):
        z = net.predict(x).z
        p = (z - rep.origin) @ rep.basis
        d2 = ((p[:, None, :] - rep.coords[None]) ** 2).sum(axis=2)
        logit = -0.5 * d2
        logit -= logit.max(axis=1, keepdims=True)
        logp = logit - np.log(np.exp(logit).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(labels)), labels].mean()

    frozen = explain.fit_2d_decision_space(net, [0, 1, 2, 3], x, labels, epochs=0)
    tuned = explain.fit_2d_decision_space(net, [0, 1, 2, 3], x, labels,
                                          epochs=80, lr=0.5)
    assert subset_ce(tuned) < subset_ce(frozen)
    assert np.max(np.abs(tuned.coords - frozen.coords)) > 1e-6


def test_fit2d_validation():
    net, x, labels = planar_cluster_setup()
    with pytest.raises(ValueError):
        explain.fit_2d_decision_space(net, [0, 1], x, labels)
    with pytest.raises(ValueError):
        explain.fit_2d_decision_space(net, [0, 1, 9], x, labels)
    with pytest.raises(ValueError):
        explain.fit_2d_decision_space(net, [1, 2, 3], x, np.zeros(400) + 0, epochs=1)
