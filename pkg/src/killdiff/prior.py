"""Gaussian-process prior on the latent field W and the diffusivity link.

The base field is a Matérn process restricted to the nodes of the prior
support, sampled through a dense Cholesky factor.  ``rescale`` applies the
sample-size dependent shrinkage and cutoff, ``link`` maps W to D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky

from killdiff.errors import ConfigurationError, DomainError
from killdiff.grid import Grid, Rect

W_CLAMP = 40.0
MAX_ACTIVE_NODES = 20_000


@dataclass(frozen=True)
class MaternConfig:
    nu: float = 2.5
    length_scale: float = 0.15
    variance: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        if self.nu not in (0.5, 1.5, 2.5):
            raise ConfigurationError(f"unsupported Matérn smoothness nu={self.nu} (use 0.5, 1.5 or 2.5)")
        if self.length_scale <= 0:
            raise ConfigurationError("length scale must be positive")


@dataclass(frozen=True)
class LinkConfig:
    offset: float = 0.25
    scale: float = 0.25

    def __post_init__(self):
        if self.offset <= 0 or self.scale <= 0:
            raise ConfigurationError("link offset and scale must be positive")


def matern_covariance(r, config: MaternConfig = MaternConfig()):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("distance must be nonnegative")
    s = r / config.length_scale
    if config.nu == 0.5:
        k = np.exp(-s)
    elif config.nu == 1.5:
        a = np.sqrt(3.0) * s
        k = (1.0 + a) * np.exp(-a)
    else:
        a = np.sqrt(5.0) * s
        k = (1.0 + a + a * a / 3.0) * np.exp(-a)
    return config.variance * k


def factor_covariance(C: np.ndarray, jitter: float, max_jitter: float = 1e-4) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``C + jitter*I``, escalating the jitter by 10x on failure."""
    eye = np.eye(C.shape[0])
    j = jitter
    while True:
        try:
            return cholesky(C + j * eye, lower=True), j
        except np.linalg.LinAlgError:
            if j <= 0:
                j = 1e-12
            j *= 10.0
            if j > max_jitter * (1 + 1e-9):
                raise np.linalg.LinAlgError(f"covariance not factorisable with jitter up to {max_jitter:g}") from None


@dataclass(frozen=True)
class GPSampler:
    grid: Grid
    active: np.ndarray  # flat indices of the support nodes
    factor: np.ndarray  # lower Cholesky factor on the active nodes
    config: MaternConfig
    jitter: float

    @property
    def n_active(self) -> int:
        return self.active.size


def build_sampler(config: MaternConfig, grid: Grid, support: Rect) -> GPSampler:
    mask = support.mask(grid).ravel()
    active = np.flatnonzero(mask)
    if active.size > MAX_ACTIVE_NODES:
        raise ConfigurationError(f"{active.size} active nodes exceed the dense budget of {MAX_ACTIVE_NODES}")
    xx, yy = grid.mesh
    pts = np.column_stack([xx.ravel()[active], yy.ravel()[active]])
    dist = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    C = matern_covariance(dist, config)
    L, jit = factor_covariance(C, config.jitter)
    L.flags.writeable = False
    return GPSampler(grid, active, L, config, jit)


def sample_w(sampler: GPSampler, rng: np.random.Generator) -> np.ndarray:
    """One draw of the base field: ``F @ xi`` on the support, zero elsewhere."""
    xi = rng.standard_normal(sampler.n_active)
    out = np.zeros(sampler.grid.size)
    out[sampler.active] = sampler.factor @ xi
    return out.reshape(sampler.grid.shape)


def rescale_factor(n: float, alpha: float, d: int = 2) -> float:
    if n < 1:
        raise DomainError("sample scale n must be >= 1")
    return float(n) ** (-d / (4.0 * alpha + 2.0 * d))


def rescale(w: np.ndarray, n: float, alpha: float, zeta: np.ndarray, d: int = 2) -> np.ndarray:
    """``W = n^{-d/(4 alpha + 2d)} * zeta * w``."""
    return rescale_factor(n, alpha, d) * zeta * w


def link(W: np.ndarray, cfg: LinkConfig = LinkConfig(), telemetry: dict | None = None) -> np.ndarray:
    """``D = offset + scale * exp(W)``; W is clamped to [-40, 40] before exponentiating.

    If ``telemetry`` is given, ``telemetry["clamped"]`` counts clamped nodes.
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise DomainError("latent field must be finite")
    clipped = np.clip(W, -W_CLAMP, W_CLAMP)
    if telemetry is not None:
        telemetry["clamped"] = telemetry.get("clamped", 0) + int(np.count_nonzero(clipped != W))
    return cfg.offset + cfg.scale * np.exp(clipped)


def inverse_link(D: np.ndarray, cfg: LinkConfig = LinkConfig()) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if np.any(D <= cfg.offset):
        raise DomainError(f"diffusivity must exceed the link offset {cfg.offset}")
    return np.log((D - cfg.offset) / cfg.scale)


def smoothstep5(t):
    """Quintic smoothstep: C^2, 0 for t <= 0, 1 for t >= 1, 1/2 at t = 1/2."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def make_cutoff(grid: Grid, inner: Rect, outer: Rect, margin: float | None = None) -> np.ndarray:
    """Separable C^2 cutoff: 1 on ``inner``, 0 outside ``outer``, quintic ramps between.

    ``margin`` is the minimum admissible gap between the rectangles (default 2h).
    """
    margin = 2 * grid.h if margin is None else margin
    if margin < 2 * grid.h - 1e-12:
        raise ConfigurationError(f"cutoff margin {margin} below two grid cells")
    gaps = (inner.x0 - outer.x0, outer.x1 - inner.x1, inner.y0 - outer.y0, outer.y1 - inner.y1)
    if min(gaps) < margin - 1e-12:
        raise ConfigurationError(f"cutoff regions too close: gap {min(gaps):g} < margin {margin:g}")

    def ramp(c, lo, in_lo, in_hi, hi):
        return smoothstep5((c - lo) / (in_lo - lo)) * smoothstep5((hi - c) / (hi - in_hi))

    c = grid.coords
    zx = ramp(c, outer.x0, inner.x0, inner.x1, outer.x1)
    zy = ramp(c, outer.y0, inner.y0, inner.y1, outer.y1)
    return np.outer(zy, zx)
