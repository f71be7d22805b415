"""Poisson bin-count observation model.

Bins form a k x k lattice of grid-aligned rectangles tiling the observation
window.  Bin ``b = r*k + c`` has column ``c`` along x and row ``r`` along y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from killdiff.errors import ConfigurationError, DomainError
from killdiff.grid import Grid, Rect, trapezoid_weights


@dataclass(frozen=True)
class BinPartition:
    grid: Grid
    window: Rect
    k: int

    def __post_init__(self):
        i0, i1, j0, j1 = self.window.node_range(self.grid)
        if (i1 - i0) % self.k or (j1 - j0) % self.k:
            raise ConfigurationError(
                f"{self.k}x{self.k} bins are not grid-aligned: window spans {i1 - i0}x{j1 - j0} cells"
            )

    @property
    def K(self) -> int:
        return self.k * self.k

    @cached_property
    def _node_edges(self) -> tuple[np.ndarray, np.ndarray]:
        i0, i1, j0, j1 = self.window.node_range(self.grid)
        return (
            np.linspace(i0, i1, self.k + 1).round().astype(int),
            np.linspace(j0, j1, self.k + 1).round().astype(int),
        )

    @cached_property
    def x_edges(self) -> np.ndarray:
        return self._node_edges[0] * self.grid.h

    @cached_property
    def y_edges(self) -> np.ndarray:
        return self._node_edges[1] * self.grid.h

    @cached_property
    def _axis_weights(self) -> tuple[np.ndarray, np.ndarray]:
        ex, ey = self._node_edges
        g = self.grid
        wx = np.array([trapezoid_weights(g.n, ex[c], ex[c + 1], g.h) for c in range(self.k)])
        wy = np.array([trapezoid_weights(g.n, ey[r], ey[r + 1], g.h) for r in range(self.k)])
        return wx, wy

    @property
    def rects(self) -> list[Rect]:
        return [
            Rect(self.x_edges[c], self.x_edges[c + 1], self.y_edges[r], self.y_edges[r + 1])
            for r in range(self.k)
            for c in range(self.k)
        ]

    @property
    def areas(self) -> np.ndarray:
        return np.array([b.area for b in self.rects])

    @property
    def diameters(self) -> np.ndarray:
        return np.array([b.diameter for b in self.rects])

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Trapezoidal integral of a nodal field over every bin."""
        wx, wy = self._axis_weights
        return (wy @ np.asarray(f, dtype=float) @ wx.T).ravel()

    def locate(self, x, y) -> np.ndarray:
        """Bin index of each point, -1 outside the window; shared edges belong to the upper bin."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.searchsorted(self.x_edges, x, side="right") - 1
        r = np.searchsorted(self.y_edges, y, side="right") - 1
        c = np.where(x == self.x_edges[-1], self.k - 1, c)
        r = np.where(y == self.y_edges[-1], self.k - 1, r)
        inside = (c >= 0) & (c < self.k) & (r >= 0) & (r < self.k)
        return np.where(inside, r * self.k + c, -1)

    def count(self, x, y) -> tuple[np.ndarray, int]:
        """Counts per bin and the number of points outside the window."""
        b = self.locate(x, y)
        counts = np.bincount(b[b >= 0], minlength=self.K)
        return counts.astype(np.int64), int(np.count_nonzero(b < 0))


def make_bins(grid: Grid, window: Rect, K: int) -> BinPartition:
    k = math.isqrt(K)
    if k * k != K or K < 1:
        raise ConfigurationError(f"bin count K={K} must be a perfect square")
    return BinPartition(grid, window, k)


def bin_intensities(u: np.ndarray, q: np.ndarray, bins: BinPartition) -> np.ndarray:
    """``Lambda_i = int_{B_i} q u``."""
    return bins.integrate(np.asarray(q) * np.asarray(u))


def sample_counts(lam: np.ndarray, n: float, rng: np.random.Generator) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise DomainError("intensities must be nonnegative")
    if n < 0:
        raise DomainError("scale n must be nonnegative")
    return rng.poisson(n * lam).astype(np.int64)


def sample_nodal_density(
    grid: Grid, density: np.ndarray, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw points from a nonnegative nodal density.

    A node is picked with probability proportional to ``density * weight`` and
    the point is placed uniformly in that node's control volume.  Bin
    probabilities then equal trapezoidal bin integrals exactly.
    """
    p = (np.asarray(density, dtype=float) * grid.weights).ravel()
    if np.any(p < 0):
        raise DomainError("density must be nonnegative")
    total = p.sum()
    if total <= 0:
        raise DomainError("density has zero mass")
    cdf = np.cumsum(p / total)
    cdf[-1] = 1.0
    k = np.searchsorted(cdf, rng.random(size), side="right")
    k = np.minimum(k, grid.size - 1)
    j, i = np.divmod(k, grid.n)
    h = grid.h
    c = grid.coords
    lo_x, hi_x = np.maximum(c[i] - h / 2, 0.0), np.minimum(c[i] + h / 2, 1.0)
    lo_y, hi_y = np.maximum(c[j] - h / 2, 0.0), np.minimum(c[j] + h / 2, 1.0)
    x = lo_x + (hi_x - lo_x) * rng.random(size)
    y = lo_y + (hi_y - lo_y) * rng.random(size)
    return x, y


def sample_point_process(
    grid: Grid, lam_field: np.ndarray, n: float, bins: BinPartition, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mixed-binomial construction: ``n_mol ~ Poisson(n)`` molecules, each binding
    with probability ``int lam`` at a location drawn from ``lam``.

    Returns the ``(m, 2)`` array of binding points and their bin counts.
    """
    lam_field = np.asarray(lam_field, dtype=float)
    if np.any(lam_field < 0):
        raise DomainError("intensity field must be nonnegative")
    n_mol = int(rng.poisson(n)) if n > 0 else 0
    mass = float(np.sum(grid.weights * lam_field))
    if n_mol == 0 or mass <= 0:
        return np.empty((0, 2)), np.zeros(bins.K, dtype=np.int64)
    n_bound = int(rng.binomial(n_mol, min(mass, 1.0)))
    x, y = sample_nodal_density(grid, lam_field, n_bound, rng)
    counts, _ = bins.count(x, y)
    return np.column_stack([x, y]), counts


def log_likelihood(lam: np.ndarray, Y: np.ndarray, n: float) -> float:
    """Poisson log-likelihood; ``-inf`` when a positive count meets a zero intensity."""
    lam = np.asarray(lam, dtype=float)
    Y = np.asarray(Y)
    mu = n * lam
    if np.any((mu <= 0) & (Y > 0)):
        return -math.inf
    return float(np.sum(-mu + xlogy(Y, mu) - gammaln(Y + 1.0)))


def log_likelihood_ratio(lam: np.ndarray, lam0: np.ndarray, Y: np.ndarray, n: float) -> float:
    """``log p_lam(Y) - log p_lam0(Y)`` without the factorial terms."""
    lam = np.asarray(lam, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    Y = np.asarray(Y)
    pos = Y > 0
    if np.any(lam0[pos] <= 0):
        return math.inf if not np.any(lam[pos] <= 0) else math.nan
    if np.any(lam[pos] <= 0):
        return -math.inf
    return float(np.sum(-n * (lam - lam0)) + np.sum(Y[pos] * np.log(lam[pos] / lam0[pos])))


class Divergences(NamedTuple):
    l1: float
    d2_squared: float
    dinf: float


def divergences(lam: np.ndarray, lam0: np.ndarray) -> Divergences:
    lam = np.asarray(lam, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    diff = np.abs(lam - lam0)
    l1 = float(diff.sum())
    if np.any((lam0 == 0) & (diff != 0)):
        return Divergences(l1, math.inf, math.inf)
    nz = lam0 != 0
    d2 = float(np.sum(diff[nz] ** 2 / lam0[nz]))
    dinf = float(np.max(diff[nz] / lam0[nz], initial=0.0))
    return Divergences(l1, d2, dinf)


def kl_exact(lam: np.ndarray, lam0: np.ndarray, n: float) -> float:
    """KL divergence of the count law under ``lam`` from the one under ``lam0``."""
    lam = np.asarray(lam, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    if np.any(lam <= 0) or np.any(lam0 <= 0):
        raise DomainError("KL requires strictly positive intensities")
    return float(n * np.sum(lam0 * np.log(lam0 / lam) + lam - lam0))


def log_mixture_likelihood_ratio(lams: np.ndarray, lam0: np.ndarray, Y: np.ndarray, n: float) -> float:
    """``log mean_j p_{lam_j}(Y) / p_{lam0}(Y)`` for a uniform mixture over the rows of ``lams``."""
    ratios = [log_likelihood_ratio(l, lam0, Y, n) for l in np.atleast_2d(lams)]
    return float(logsumexp(ratios) - math.log(len(ratios)))


@dataclass(frozen=True)
class Histogram:
    intensities: np.ndarray
    densities: np.ndarray  # intensity / bin area

    def density_field(self, bins: BinPartition) -> np.ndarray:
        """Piecewise-constant density on the grid nodes (zero outside the window)."""
        xx, yy = bins.grid.mesh
        b = bins.locate(xx, yy)
        return np.where(b >= 0, self.densities[np.maximum(b, 0)], 0.0)


def histogram_estimator(Y: np.ndarray, n: float, bins: BinPartition | None = None) -> Histogram:
    if n <= 0:
        raise DomainError("histogram estimator needs n > 0")
    lam_hat = np.asarray(Y, dtype=float) / n
    dens = lam_hat / bins.areas if bins is not None else np.full_like(lam_hat, np.nan)
    return Histogram(lam_hat, dens)


def write_bins_csv(path, bins: BinPartition, values, column: str = "count"):
    with open(path, "w", newline="") as fh:
        fh.write(f"bin_index,x_min,y_min,x_max,y_max,{column}\n")
        for b, (r, v) in enumerate(zip(bins.rects, values)):
            val = f"{int(v)}" if column == "count" else f"{float(v):.17g}"
            fh.write(f"{b},{r.x0:.17g},{r.y0:.17g},{r.x1:.17g},{r.y1:.17g},{val}\n")


def read_bins_csv(path) -> tuple[list[Rect], np.ndarray, str]:
    rects, vals = [], []
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
        if header[:5] != ["bin_index", "x_min", "y_min", "x_max", "y_max"] or len(header) != 6:
            raise ConfigurationError(f"{path}: unexpected bin CSV header {header}")
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            rects.append(Rect(float(parts[1]), float(parts[3]), float(parts[2]), float(parts[4])))
            vals.append(float(parts[5]))
    column = header[5]
    arr = np.array(vals, dtype=np.int64 if column == "count" else float)
    return rects, arr, column
