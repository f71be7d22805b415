"""Registered ground-truth formulas for phi, W0 and q.

The reference experiment lives on the unit disk; formulas given there in
coordinates ``(X, Y) in [-1, 1]^2`` are carried to the unit square through
``X = 2x - 1``, ``Y = 2y - 1``.
"""

from __future__ import annotations

import numpy as np

from killdiff.errors import ConfigurationError
from killdiff.grid import Grid, Rect, integrate


def _disk_coords(x, y):
    return 2.0 * x - 1.0, 2.0 * y - 1.0


def phi_field(grid: Grid, kind: str, freq: float = 3.0) -> np.ndarray:
    """Initial density, normalised to integrate to one."""
    if kind == "uniform":
        f = grid.constant(1.0)
    elif kind == "radial":
        # phi ∝ exp(cos(freq*pi*(X^2 + Y^2)))
        f = grid.sample(lambda x, y: np.exp(np.cos(freq * np.pi * sum(c * c for c in _disk_coords(x, y)))))
    else:
        raise ConfigurationError(f"unknown phi formula {kind!r} (choose 'radial' or 'uniform')")
    return f / integrate(grid, f)


def w0_field(grid: Grid, kind: str, amplitude: float = 5.0, center=(0.5, 0.7), width: float = 40.0) -> np.ndarray:
    """Latent truth before the cutoff is applied.

    ``bump`` is ``amplitude * exp(-width |z - center|^2)``; the disk formula
    ``5 exp(-10 X^2 - 10 (Y - 0.4)^2)`` corresponds to amplitude 5, centre
    (0.5, 0.7) and width 40.
    """
    if kind == "zero":
        return grid.constant(0.0)
    if kind == "bump":
        cx, cy = center
        return grid.sample(lambda x, y: amplitude * np.exp(-width * ((x - cx) ** 2 + (y - cy) ** 2)))
    raise ConfigurationError(f"unknown W0 formula {kind!r} (choose 'bump' or 'zero')")


def q_field(
    grid: Grid,
    kind: str,
    window: Rect,
    inside: float = 200.0,
    outside: float = 100.0,
    center=(0.35, 0.4),
    radius: float = 0.1,
    transition: float = 0.02,
) -> np.ndarray:
    """Binding potential, supported on the open observation window.

    ``focus`` is ``outside`` plus a sigmoid bump of height ``inside - outside``
    on the disk of given centre and radius; ``constant`` is ``outside``
    everywhere in the window.  Window edge nodes carry q = 0, so every node
    with q > 0 is interior to the window and all binding mass is binned.
    """
    xx, yy = grid.mesh
    if kind == "zero":
        return grid.constant(0.0)
    if kind == "constant":
        level = grid.constant(outside)
    elif kind == "focus":
        r = np.hypot(xx - center[0], yy - center[1])
        level = outside + (inside - outside) / (1.0 + np.exp(-(radius - r) / transition))
    else:
        raise ConfigurationError(f"unknown q formula {kind!r} (choose 'focus', 'constant' or 'zero')")
    return np.where(window.mask(grid, open=True), level, 0.0)
