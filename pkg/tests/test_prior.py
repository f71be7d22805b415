import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from killdiff.errors import ConfigurationError, DomainError
from killdiff.grid import Grid, Rect
from killdiff.prior import (
    LinkConfig,
    MaternConfig,
    build_sampler,
    factor_covariance,
    inverse_link,
    link,
    make_cutoff,
    matern_covariance,
    rescale,
    rescale_factor,
    sample_w,
    smoothstep5,
)

G = Grid(33)
WINDOW = Rect(0.125, 0.875, 0.125, 0.875)
SUPPORT = Rect(0.0625, 0.9375, 0.0625, 0.9375)


@pytest.fixture(scope="module")
def sampler():
    return build_sampler(MaternConfig(), G, SUPPORT)


def test_matern_examples():
    for nu in (0.5, 1.5, 2.5):
        assert matern_covariance(0.0, MaternConfig(nu=nu)) == 1.0
    assert matern_covariance(0.15, MaternConfig(nu=0.5)) == pytest.approx(math.exp(-1), abs=1e-12)
    r = 0.1
    s = math.sqrt(5) * r / 0.15
    assert matern_covariance(r) == pytest.approx((1 + s + s * s / 3) * math.exp(-s), rel=1e-14)
    s = math.sqrt(3) * r / 0.15
    assert matern_covariance(r, MaternConfig(nu=1.5)) == pytest.approx((1 + s) * math.exp(-s), rel=1e-14)
    rs = np.linspace(0, 3, 200)
    assert np.all(np.diff(matern_covariance(rs)) < 0)
    assert matern_covariance(50.0) < 1e-100


def test_matern_config_validation():
    with pytest.raises(ConfigurationError):
        MaternConfig(nu=2.0)
    with pytest.raises(ConfigurationError):
        MaternConfig(length_scale=0)
    with pytest.raises(DomainError):
        matern_covariance(-0.1)


def test_jitter_escalation_for_degenerate_pair():
    C = np.ones((2, 2))  # two nodes at distance 0
    with pytest.raises(np.linalg.LinAlgError):
        factor_covariance(C, 0.0, max_jitter=0.0)
    L, j = factor_covariance(C, 1e-8)
    assert j >= 1e-8
    assert np.max(np.abs(L @ L.T - C)) <= 1e-6


def test_sampler_factor_residual(sampler):
    xx, yy = G.mesh
    pts = np.column_stack([xx.ravel()[sampler.active], yy.ravel()[sampler.active]])
    C = matern_covariance(np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1]))
    L = sampler.factor
    assert np.max(np.abs(L @ L.T - C)) <= 1e-6
    assert sampler.n_active == 29 * 29


def test_sampler_budget():
    with pytest.raises(ConfigurationError):
        build_sampler(MaternConfig(), Grid(257), Rect(0.0, 1.0, 0.0, 1.0))


def test_sample_moments(sampler):
    rng = np.random.default_rng(0)
    draws = np.array([sample_w(sampler, rng) for _ in range(5000)])
    mask = SUPPORT.mask(G)
    assert np.all(draws[:, ~mask] == 0)
    assert np.max(np.abs(draws.mean(0))) <= 0.1
    i, j = G.node_index(0.5), G.node_index(0.5)
    a = draws[:2000, j, i]
    assert a.var() == pytest.approx(1.0, abs=0.1)
    # correlation at 5h = 0.15625, the node offset nearest the length scale
    b = draws[:2000, j, i + 5]
    assert np.corrcoef(a, b)[0, 1] == pytest.approx(matern_covariance(5 * G.h), abs=0.05)


def test_sample_reproducible(sampler):
    a = sample_w(sampler, np.random.default_rng(5))
    b = sample_w(sampler, np.random.default_rng(5))
    c = sample_w(sampler, np.random.default_rng(6))
    assert np.array_equal(a, b) and np.max(np.abs(a - c)) > 0


def test_rescale_examples():
    zeta = make_cutoff(G, WINDOW, SUPPORT)
    w = np.random.default_rng(1).normal(size=G.shape)
    assert np.array_equal(rescale(w, 1, 2.5, zeta), zeta * w)
    assert rescale_factor(1e7, 2.5) == pytest.approx(0.1, rel=1e-12)
    W = rescale(G.constant(1.0), 1e7, 2.5, zeta)
    assert np.allclose(W[WINDOW.mask(G)], 1e7 ** (-1 / 7))
    with pytest.raises(DomainError):
        rescale_factor(0.5, 2.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(1, 1e8), st.sampled_from([1.5, 2.5, 3.5]))
def test_rescale_scaling_law(n, alpha):
    zeta = make_cutoff(G, WINDOW, SUPPORT)
    w = G.sample(lambda x, y: np.sin(5 * x) + y)
    a = rescale(w, n, alpha, zeta)
    # n -> 2^{4 alpha + 2d} n scales by 2^{-d}; n -> 2^{(4 alpha + 2d)/d} n halves
    b = rescale(w, 2 ** (4 * alpha + 4) * n, alpha, zeta)
    assert np.allclose(b, 0.25 * a, rtol=1e-12, atol=0)
    c = rescale(w, 2 ** ((4 * alpha + 4) / 2) * n, alpha, zeta)
    assert np.allclose(c, 0.5 * a, rtol=1e-12, atol=0)


def test_link_examples():
    assert np.all(link(G.constant(0.0)) == 0.5)
    W = G.sample(lambda x, y: np.sin(3 * x))
    assert np.allclose(link(W, LinkConfig(offset=15.0)), 15 + np.exp(W) / 4)
    tel = {}
    D = link(np.array([50.0, -50.0, 1.0]), telemetry=tel)
    assert tel["clamped"] == 2 and np.all(np.isfinite(D))
    assert D[0] == pytest.approx(0.25 + 0.25 * math.exp(40), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_link_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    W1 = rng.normal(scale=5, size=50)
    W2 = W1 + rng.random(50)
    D1, D2 = link(W1), link(W2)
    assert np.all(D1 <= D2) and np.all(D1 > 0.25)


def test_inverse_link_examples():
    assert np.all(inverse_link(G.constant(0.5)) == 0.0)
    W0 = G.sample(lambda x, y: 5 * np.exp(-10 * x**2 - 10 * (y - 0.4) ** 2))
    assert np.max(np.abs(inverse_link(link(W0)) - W0)) <= 1e-12
    with pytest.raises(DomainError):
        inverse_link(np.array([0.25, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20), st.floats(0.05, 5))
def test_link_roundtrip(seed, offset, scale):
    cfg = LinkConfig(offset, scale)
    D = offset + np.random.default_rng(seed).uniform(1e-3, 10, 40)
    assert np.allclose(link(inverse_link(D, cfg), cfg), D, rtol=1e-12, atol=0)


def test_cutoff_examples():
    zeta = make_cutoff(G, WINDOW, SUPPORT)
    assert np.all(zeta[WINDOW.mask(G)] == 1.0)
    assert np.all(zeta[~SUPPORT.mask(G, open=True)] == 0.0)
    assert zeta.min() >= 0 and zeta.max() <= 1
    assert smoothstep5(0.5) == 0.5
    # ramp midpoint on a finer grid
    g = Grid(65)
    z = make_cutoff(g, WINDOW, SUPPORT)
    mid = g.node_index((0.0625 + 0.125) / 2)
    centre = g.node_index(0.5)
    assert z[centre, mid] == pytest.approx(0.5, abs=1e-12)


def test_cutoff_rejects_tight_regions():
    with pytest.raises(ConfigurationError):
        make_cutoff(G, WINDOW, Rect(0.09375, 0.90625, 0.09375, 0.90625))  # one cell gap
    with pytest.raises(ConfigurationError):
        make_cutoff(G, WINDOW, SUPPORT, margin=G.h)


def test_prior_pushforward_bounds(sampler):
    zeta = make_cutoff(G, WINDOW, SUPPORT)
    rng = np.random.default_rng(3)
    for _ in range(50):
        D = link(rescale(sample_w(sampler, rng), 1e6, 2.5, zeta))
        assert np.all(D > 0.25)
        assert np.all(D[~SUPPORT.mask(G, open=True)] == 0.5)
