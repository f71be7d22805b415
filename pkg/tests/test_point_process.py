import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from killdiff.errors import ConfigurationError, DomainError
from killdiff.grid import Grid, Rect, integrate
from killdiff.pde import assemble, solve_elliptic
from killdiff.point_process import (
    BinPartition,
    bin_intensities,
    divergences,
    histogram_estimator,
    kl_exact,
    log_likelihood,
    log_likelihood_ratio,
    log_mixture_likelihood_ratio,
    make_bins,
    read_bins_csv,
    sample_counts,
    sample_nodal_density,
    sample_point_process,
    write_bins_csv,
)
from killdiff.truth import phi_field, q_field

G = Grid(33)
WINDOW = Rect(0.125, 0.875, 0.125, 0.875)


def test_bins_tile_window():
    bins = make_bins(G, WINDOW, 36)
    assert bins.K == 36
    assert bins.areas.sum() == pytest.approx(WINDOW.area, abs=1e-14)
    assert bins.diameters.max() <= WINDOW.diameter * math.sqrt(2) / 6
    rng = np.random.default_rng(0)
    x = rng.uniform(WINDOW.x0, WINDOW.x1, 5000)
    y = rng.uniform(WINDOW.y0, WINDOW.y1, 5000)
    b = bins.locate(x, y)
    assert np.all(b >= 0)
    for k in (0, 7, 35):
        r = bins.rects[k]
        inside = (x >= r.x0) & (x < r.x1) & (y >= r.y0) & (y < r.y1)
        assert np.array_equal(inside, b == k)


def test_locate_edges_and_outside():
    bins = make_bins(G, WINDOW, 4)
    assert bins.locate(0.5, 0.5) == 3  # shared edges belong to the upper bin
    assert bins.locate(0.875, 0.875) == 3  # far edges are closed
    assert bins.locate(0.125, 0.125) == 0
    assert bins.locate(0.1, 0.5) == -1
    counts, outside = bins.count(np.array([0.2, 0.6, 0.05]), np.array([0.2, 0.2, 0.05]))
    assert counts.tolist() == [1, 1, 0, 0] and outside == 1


@pytest.mark.parametrize("K", [35, 0])
def test_bins_reject_non_square(K):
    with pytest.raises(ConfigurationError):
        make_bins(G, WINDOW, K)


def test_bins_reject_misaligned():
    with pytest.raises(ConfigurationError):
        make_bins(G, WINDOW, 25)  # 24 cells do not split into 5
    with pytest.raises(ConfigurationError):
        BinPartition(G, Rect(0.1, 0.9, 0.1, 0.9), 2)


def test_bin_integrals_sum_to_window_integral():
    bins = make_bins(G, WINDOW, 36)
    f = G.sample(lambda x, y: np.exp(x - y) + x * x)
    assert bins.integrate(f).sum() == pytest.approx(integrate(G, f, WINDOW), rel=1e-13)


def test_intensities_sum_to_one_with_windowed_q():
    q = q_field(G, "focus", WINDOW)
    D = G.constant(0.5)
    phi = phi_field(G, "radial")
    u = solve_elliptic(assemble(G, D, q), phi)
    lam = bin_intensities(u, q, make_bins(G, WINDOW, 36))
    assert lam.sum() == pytest.approx(1.0, abs=2e-3)
    assert np.all(lam >= 0)


def test_intensity_zero_where_q_zero():
    bins = make_bins(G, WINDOW, 4)
    q = np.where(G.mesh[0] < 0.5, 1.0, 0.0)
    u = G.constant(1.0)
    lam = bin_intensities(u, q, bins)
    assert lam[1] == 0 and lam[3] == 0


def test_intensity_proportional_to_area_for_constant_coefficients():
    whole = Rect(0.0, 1.0, 0.0, 1.0)
    bins = make_bins(G, whole, 16)
    q = G.constant(3.0)
    u = solve_elliptic(assemble(G, G.constant(0.5), q), G.constant(1.0))
    lam = bin_intensities(u, q, bins)
    assert np.allclose(lam / bins.areas, 1.0, rtol=0.05)


def test_sample_counts_examples():
    rng = np.random.default_rng(0)
    assert np.all(sample_counts(np.full(36, 1 / 36), 0, rng) == 0)
    with pytest.raises(DomainError):
        sample_counts(np.array([0.5, -0.1]), 10, rng)
    reps, n, K = 100, 1e4, 36
    Y = np.array([sample_counts(np.full(K, 1 / K), n, rng) for _ in range(reps)])
    assert Y.dtype.kind == "i"
    dev = np.abs(Y.mean(axis=0) - n / K)
    assert np.all(dev <= 3 * math.sqrt(n / K) / math.sqrt(reps))


def test_sample_counts_large_n_smoke():
    Y = sample_counts(np.full(36, 1 / 36), 1e7, np.random.default_rng(1))
    assert Y.sum() == pytest.approx(1e7, rel=5e-3)


def test_nodal_density_matches_bin_integrals():
    rng = np.random.default_rng(2)
    bins = make_bins(G, Rect(0.0, 1.0, 0.0, 1.0), 16)
    dens = G.sample(lambda x, y: 1 + np.sin(3 * x) * y)
    dens /= integrate(G, dens)
    x, y = sample_nodal_density(G, dens, 200_000, rng)
    assert x.min() >= 0 and x.max() <= 1 and y.min() >= 0 and y.max() <= 1
    counts, outside = bins.count(x, y)
    p = bins.integrate(dens)
    assert outside == 0
    z = (counts - 200_000 * p) / np.sqrt(200_000 * p * (1 - p))
    assert np.max(np.abs(z)) < 4


def test_point_process_empty_and_law():
    rng = np.random.default_rng(3)
    bins = make_bins(G, WINDOW, 4)
    lam_field = np.where(WINDOW.mask(G), 1.0, 0.0)
    lam_field /= integrate(G, lam_field)
    pts, counts = sample_point_process(G, lam_field, 0, bins, rng)
    assert pts.shape == (0, 2) and not counts.any()

    reps, n = 2000, 500
    lam = bins.integrate(lam_field)
    A = np.array([sample_point_process(G, lam_field, n, bins, rng)[1] for _ in range(reps)])
    B = np.array([sample_counts(lam, n, rng) for _ in range(reps)])
    mu = n * lam
    se_mean = np.sqrt(2 * mu / reps)
    se_var = np.sqrt(2 * (mu + 2 * mu**2) / reps)
    assert np.all(np.abs(A.mean(0) - B.mean(0)) <= 3 * se_mean)
    assert np.all(np.abs(A.var(0, ddof=1) - B.var(0, ddof=1)) <= 3 * se_var)
    _, p, _, _ = chi2_contingency(np.array([A.sum(0), B.sum(0)]))
    assert p > 0.01


def test_log_likelihood_examples():
    lam = np.array([0.2, 0.3])
    assert log_likelihood(lam, np.zeros(2, int), 7.0) == pytest.approx(-3.5)
    assert log_likelihood(np.array([1.0]), np.array([3]), 2.0) == pytest.approx(-2 + 3 * math.log(2) - math.log(6))
    assert log_likelihood(np.array([1.0]), np.array([3]), 2.0) == pytest.approx(-1.7123, abs=1e-4)
    assert log_likelihood(np.array([0.0, 1.0]), np.array([1, 0]), 5.0) == -math.inf


def test_log_likelihood_ratio_examples():
    Y = np.array([5, 5])
    v = log_likelihood_ratio(np.array([0.6, 0.4]), np.array([0.5, 0.5]), Y, 10.0)
    assert v == pytest.approx(5 * math.log(1.2) + 5 * math.log(0.8), abs=1e-12)
    assert v == pytest.approx(-0.2041, abs=1e-4)
    assert log_likelihood_ratio(np.array([0.3, 0.7]), np.array([0.3, 0.7]), Y, 10.0) == 0.0
    assert log_likelihood_ratio(np.array([0.0, 1.0]), np.array([0.5, 0.5]), Y, 10.0) == -math.inf


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ratio_consistent_with_likelihood(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 40))
    lam, lam0 = rng.random(K) + 1e-3, rng.random(K) + 1e-3
    n = float(rng.uniform(1, 1e4))
    Y = rng.poisson(n * lam0)
    direct = log_likelihood(lam, Y, n) - log_likelihood(lam0, Y, n)
    r = log_likelihood_ratio(lam, lam0, Y, n)
    assert r == pytest.approx(direct, abs=1e-10 * max(1.0, abs(direct)) + 1e-8)
    assert log_likelihood_ratio(lam0, lam, Y, n) == pytest.approx(-r, abs=1e-8 * max(1.0, abs(r)))


def test_divergence_examples():
    assert divergences(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == (0.0, 0.0, 0.0)
    d = divergences(np.array([0.6, 0.4]), np.array([0.5, 0.5]))
    assert d.l1 == pytest.approx(0.2) and d.d2_squared == pytest.approx(0.04) and d.dinf == pytest.approx(0.2)
    d = divergences(np.array([0.1, 0.9]), np.array([0.0, 1.0]))
    assert d.d2_squared == math.inf and d.dinf == math.inf


def test_kl_examples():
    assert kl_exact(np.array([0.3, 0.7]), np.array([0.3, 0.7]), 10) == 0.0
    assert kl_exact(np.array([0.6, 0.4]), np.array([0.5, 0.5]), 10) == pytest.approx(0.2041, abs=1e-4)
    with pytest.raises(DomainError):
        kl_exact(np.array([0.0, 1.0]), np.array([0.5, 0.5]), 10)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_bound(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 50))
    lam0 = rng.random(K) + 1e-3
    lam = lam0 * (1 + rng.uniform(-0.49, 0.49, K))
    n = float(rng.uniform(1, 1e6))
    assert divergences(lam, lam0).dinf < 0.5
    assert kl_exact(lam, lam0, n) <= 2 * n * divergences(lam, lam0).d2_squared


def test_mixture_evidence_lower_bound():
    rng = np.random.default_rng(5)
    K, n = 16, 1e3
    eps2 = K / n
    lam0 = np.full(K, 1 / K)
    # ten intensities with D2 <= eps^2 and Dinf < 1/2
    signs = rng.choice([-1.0, 1.0], size=(10, K))
    lams = lam0 * (1 + 0.9 * math.sqrt(eps2) * signs)
    for l in lams:
        d = divergences(l, lam0)
        assert d.d2_squared <= eps2 and d.dinf < 0.5
    hits = 0
    for _ in range(1000):
        Y = rng.poisson(n * lam0)
        if log_mixture_likelihood_ratio(lams, lam0, Y, n) <= -3 * n * eps2:
            hits += 1
    assert hits <= 50


def test_histogram_estimator():
    h = histogram_estimator(np.array([3, 0, 1]), 10)
    assert np.allclose(h.intensities, [0.3, 0, 0.1])
    assert not histogram_estimator(np.zeros(4), 5).intensities.any()
    with pytest.raises(DomainError):
        histogram_estimator(np.zeros(4), 0)
    bins = make_bins(G, WINDOW, 4)
    h = histogram_estimator(np.array([10, 20, 30, 40]), 100, bins)
    f = h.density_field(bins)
    i, j = G.node_index(0.25), G.node_index(0.75)
    assert f[i, i] == pytest.approx(0.1 / bins.areas[0])
    assert f[j, i] == pytest.approx(0.3 / bins.areas[2])
    assert f[0, 0] == 0


def test_histogram_l1_mean_bound():
    rng = np.random.default_rng(6)
    K, n = 36, 1e4
    lam = np.full(K, 1 / K)
    errs = [np.abs(sample_counts(lam, n, rng) / n - lam).sum() for _ in range(500)]
    assert np.mean(errs) <= math.sqrt(K) * math.sqrt(lam.sum()) / math.sqrt(n)


def test_bins_csv_roundtrip(tmp_path):
    bins = make_bins(G, WINDOW, 4)
    write_bins_csv(tmp_path / "c.csv", bins, [1, 2, 3, 4])
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "bin_index,x_min,y_min,x_max,y_max,count"
    assert text[1] == "0,0.125,0.125,0.5,0.5,1"
    rects, vals, col = read_bins_csv(tmp_path / "c.csv")
    assert col == "count" and vals.tolist() == [1, 2, 3, 4] and rects == bins.rects
    write_bins_csv(tmp_path / "i.csv", bins, [0.1, 0.2, 0.3, 1 / 3], column="intensity")
    _, vals, col = read_bins_csv(tmp_path / "i.csv")
    assert col == "intensity" and vals[3] == 1 / 3
