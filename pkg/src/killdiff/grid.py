"""Node-centred uniform grids on the unit square.

A field is a plain ``numpy`` array of shape ``grid.shape == (n, n)`` indexed
``f[j, i]`` with ``x = i*h`` and ``y = j*h``; row-major order therefore runs over
x fastest, then y.  Quadrature is the composite trapezoidal rule, which is the
natural companion of the second-order stencils in :mod:`killdiff.pde`.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from killdiff.errors import ConfigurationError, DomainError

_SNAP = 1e-9


@dataclass(frozen=True)
class Grid:
    """Square node-centred grid with ``n`` nodes per axis on [0, 1]^2."""

    n: int

    def __post_init__(self):
        if self.n < 9:
            raise ConfigurationError(f"node count {self.n} too small (need >= 9)")
        if self.n % 2 == 0:
            raise ConfigurationError(f"even node count {self.n}; the centre must be a node")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @property
    def size(self) -> int:
        return self.n * self.n

    @cached_property
    def coords(self) -> np.ndarray:
        # i*h rather than linspace so that coords[-1] == 1 exactly and spacing is uniform
        c = np.arange(self.n) * self.h
        c[-1] = 1.0
        return c

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        xx, yy = np.meshgrid(self.coords, self.coords, indexing="xy")
        xx.flags.writeable = False
        yy.flags.writeable = False
        return xx, yy

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights (control-volume areas) per node."""
        w1 = trapezoid_weights(self.n, 0, self.n - 1, self.h)
        w = np.outer(w1, w1)
        w.flags.writeable = False
        return w

    def node_xy(self, i: int, j: int) -> tuple[float, float]:
        return (i * self.h, j * self.h)

    def flat_index(self, i: int, j: int) -> int:
        return j * self.n + i

    def unflat_index(self, k: int) -> tuple[int, int]:
        j, i = divmod(k, self.n)
        return i, j

    def node_index(self, x: float) -> int:
        """Index of the node at coordinate ``x``; raises if ``x`` is not on a node."""
        s = x / self.h
        k = int(round(s))
        if abs(s - k) > _SNAP or not 0 <= k < self.n:
            raise ConfigurationError(f"coordinate {x} is not aligned with grid nodes (h={self.h})")
        return k

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(x, y)`` (vectorised) at every node."""
        xx, yy = self.mesh
        return np.asarray(func(xx, yy), dtype=float) * np.ones(self.shape)

    def constant(self, value: float) -> np.ndarray:
        return np.full(self.shape, float(value))


def make_grid(n: int) -> Grid:
    return Grid(int(n))


def trapezoid_weights(n: int, i0: int, i1: int, h: float) -> np.ndarray:
    """1-D trapezoid weights over nodes ``i0..i1`` embedded in a length-``n`` vector."""
    w = np.zeros(n)
    if i1 > i0:
        w[i0 : i1 + 1] = h
        w[i0] = w[i1] = 0.5 * h
    return w


@dataclass(frozen=True)
class Rect:
    """Closed axis-aligned rectangle ``[x0, x1] x [y0, y1]``."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ConfigurationError(f"degenerate rectangle {self}")

    @classmethod
    def square(cls, lo: float, hi: float) -> "Rect":
        return cls(lo, hi, lo, hi)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.x1 - self.x0, self.y1 - self.y0))

    def contains(self, other: "Rect") -> bool:
        return (
            self.x0 <= other.x0 + _SNAP
            and other.x1 <= self.x1 + _SNAP
            and self.y0 <= other.y0 + _SNAP
            and other.y1 <= self.y1 + _SNAP
        )

    def node_range(self, grid: Grid) -> tuple[int, int, int, int]:
        """Node indices ``(i0, i1, j0, j1)`` of the corners; the rectangle must be grid-aligned."""
        return (
            grid.node_index(self.x0),
            grid.node_index(self.x1),
            grid.node_index(self.y0),
            grid.node_index(self.y1),
        )

    def mask(self, grid: Grid, *, open: bool = False) -> np.ndarray:
        xx, yy = grid.mesh
        if open:
            return (xx > self.x0 + _SNAP) & (xx < self.x1 - _SNAP) & (yy > self.y0 + _SNAP) & (yy < self.y1 - _SNAP)
        return (xx >= self.x0 - _SNAP) & (xx <= self.x1 + _SNAP) & (yy >= self.y0 - _SNAP) & (yy <= self.y1 + _SNAP)

    def weights(self, grid: Grid) -> np.ndarray:
        """Trapezoid weights restricted to this (grid-aligned) rectangle."""
        i0, i1, j0, j1 = self.node_range(grid)
        wx = trapezoid_weights(grid.n, i0, i1, grid.h)
        wy = trapezoid_weights(grid.n, j0, j1, grid.h)
        return np.outer(wy, wx)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x1, self.y0, self.y1)


def _check_finite(f: np.ndarray, name: str = "field"):
    if not np.all(np.isfinite(f)):
        raise DomainError(f"{name} contains non-finite values")


def _region_weights(grid: Grid, region: Rect | None) -> np.ndarray:
    return grid.weights if region is None else region.weights(grid)


def integrate(grid: Grid, f: np.ndarray, region: Rect | None = None) -> float:
    """Trapezoidal integral of ``f`` over ``region`` (whole square when ``None``).

    A zero-area region integrates to 0 and emits a ``RuntimeWarning``.
    """
    f = np.asarray(f, dtype=float)
    _check_finite(f)
    if region is not None and region.area == 0.0:
        warnings.warn("integration over an empty region", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.sum(_region_weights(grid, region) * f))


def gradient(grid: Grid, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, second-order one-sided at the boundary."""
    f = np.asarray(f, dtype=float)
    fy, fx = np.gradient(f, grid.h, edge_order=2)
    return fx, fy


def _second_difference(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    d[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h**2
    d[-1] = (2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / h**2
    return np.moveaxis(d, 0, axis)


def discrete_norm(grid: Grid, f: np.ndarray, order: str = "L2", region: Rect | None = None) -> float:
    """L1, L2, H1 or H2 norm of a nodal field over ``region``.

    Derivatives are taken on the full grid and then restricted, so a region in
    the interior uses true central differences across its edges.
    """
    f = np.asarray(f, dtype=float)
    _check_finite(f)
    order = order.upper()
    if order not in ("L1", "L2", "H1", "H2"):
        raise ValueError(f"unknown norm {order!r}")
    w = _region_weights(grid, region)
    if order == "L1":
        return float(np.sum(w * np.abs(f)))
    total = np.sum(w * f**2)
    if order in ("H1", "H2"):
        if region is not None:
            i0, i1, j0, j1 = region.node_range(grid)
            if i1 - i0 < 2 or j1 - j0 < 2:
                raise ConfigurationError(f"region too thin for {order} norm (need >= 3 nodes per axis)")
        fx, fy = gradient(grid, f)
        total += np.sum(w * (fx**2 + fy**2))
        if order == "H2":
            fxx = _second_difference(f, grid.h, axis=1)
            fyy = _second_difference(f, grid.h, axis=0)
            fxy = gradient(grid, fx)[1]
            total += np.sum(w * (fxx**2 + 2.0 * fxy**2 + fyy**2))
    return float(np.sqrt(total))


def interpolate(grid: Grid, f: np.ndarray, x, y):
    """Bilinear interpolation of ``f`` at points ``(x, y)`` (scalars or arrays).

    Points must lie in the closed unit square; reflect them first.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)) or not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("interpolation point outside the unit square")
    out = _bilinear(f, x, y, grid.n, grid.h)
    return float(out) if out.ndim == 0 else out


def _bilinear(f: np.ndarray, x: np.ndarray, y: np.ndarray, n: int, h: float) -> np.ndarray:
    # unchecked fast path for the particle simulator
    sx = x / h
    sy = y / h
    i = np.minimum(sx.astype(np.intp), n - 2)
    j = np.minimum(sy.astype(np.intp), n - 2)
    tx = sx - i
    ty = sy - j
    f00 = f[j, i]
    f10 = f[j, i + 1]
    f01 = f[j + 1, i]
    f11 = f[j + 1, i + 1]
    return (1 - ty) * ((1 - tx) * f00 + tx * f10) + ty * ((1 - tx) * f01 + tx * f11)


def write_field_csv(path, grid: Grid, f: np.ndarray):
    """Write ``x,y,value`` rows, y-major then x, with 17 significant digits."""
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise ConfigurationError(f"field shape {f.shape} does not match grid {grid.shape}")
    c = grid.coords
    with open(path, "w", newline="") as fh:
        fh.write("x,y,value\n")
        for j in range(grid.n):
            for i in range(grid.n):
                fh.write(f"{c[i]:.17g},{c[j]:.17g},{f[j, i]:.17g}\n")


def read_field_csv(path) -> tuple[Grid, np.ndarray]:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["x", "y", "value"]:
            raise ConfigurationError(f"{path}: expected header x,y,value, got {header}")
        vals = [float(row[2]) for row in reader if row]
    n = int(round(np.sqrt(len(vals))))
    if n * n != len(vals):
        raise ConfigurationError(f"{path}: {len(vals)} rows is not a square grid")
    grid = Grid(n)
    return grid, np.array(vals).reshape(grid.shape)
