"""Monte Carlo simulation of the killed reflected diffusion.

Particles follow ``dX = grad D dt + sqrt(2D) dW`` in the unit square with
mirror reflection at the walls.  A particle binds the first time
``int_0^t q(X_s) ds`` exceeds an independent Exp(1) threshold.  All routines
are vectorised over a batch of particles.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from killdiff.grid import Grid, gradient
from killdiff.point_process import BinPartition, sample_nodal_density

ALIVE, BOUND, CENSORED = 0, 1, 2


def reflect(x, y=None):
    """Fold coordinates into [0, 1] by repeated mirror reflection."""
    if y is None:
        x, y = x
    fx = np.abs(np.asarray(x, dtype=float)) % 2.0
    fy = np.abs(np.asarray(y, dtype=float)) % 2.0
    fx = np.where(fx > 1.0, 2.0 - fx, fx)
    fy = np.where(fy > 1.0, 2.0 - fy, fy)
    if fx.ndim == 0:
        return float(fx), float(fy)
    return fx, fy


class FieldSampler:
    """Bilinear evaluation of several nodal fields at once (shared cell lookup)."""

    def __init__(self, grid: Grid, *fields: np.ndarray):
        self.n = grid.n
        self.h = grid.h
        self.stack = np.stack([np.asarray(f, dtype=float) for f in fields], axis=-1)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sx = x / self.h
        sy = y / self.h
        i = np.minimum(sx.astype(np.intp), self.n - 2)
        j = np.minimum(sy.astype(np.intp), self.n - 2)
        tx = (sx - i)[:, None]
        ty = (sy - j)[:, None]
        s = self.stack
        return (1 - ty) * ((1 - tx) * s[j, i] + tx * s[j, i + 1]) + ty * ((1 - tx) * s[j + 1, i] + tx * s[j + 1, i + 1])


@dataclass
class ParticleState:
    x: np.ndarray
    y: np.ndarray
    integral: np.ndarray  # accumulated int q ds
    threshold: np.ndarray  # Exp(1) clock
    t: np.ndarray
    status: np.ndarray

    @classmethod
    def start(cls, x, y, rng: np.random.Generator) -> "ParticleState":
        x = np.atleast_1d(np.asarray(x, dtype=float)).copy()
        y = np.atleast_1d(np.asarray(y, dtype=float)).copy()
        m = x.size
        return cls(x, y, np.zeros(m), rng.standard_exponential(m), np.zeros(m), np.zeros(m, dtype=np.int8))


def em_step(state: ParticleState, D_sampler: FieldSampler, dt: float, rng: np.random.Generator) -> ParticleState:
    """One reflected Euler-Maruyama step for every particle.

    ``D_sampler`` evaluates ``(D, dD/dx, dD/dy)``.
    """
    vals = D_sampler(state.x, state.y)
    noise = rng.standard_normal((2, state.x.size))
    sd = np.sqrt(2.0 * np.maximum(vals[:, 0], 0.0) * dt)
    x, y = reflect(state.x + vals[:, 1] * dt + sd * noise[0], state.y + vals[:, 2] * dt + sd * noise[1])
    return ParticleState(x, y, state.integral, state.threshold, state.t + dt, state.status)


@dataclass
class BindingEvents:
    x: np.ndarray
    y: np.ndarray
    time: np.ndarray
    censored: np.ndarray

    def __len__(self):
        return self.x.size

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("x,y,time,censored\n")
            for x, y, t, c in zip(self.x, self.y, self.time, self.censored):
                fh.write(f"{x:.17g},{y:.17g},{t:.17g},{int(c)}\n")


def _drift_sampler(grid: Grid, D: np.ndarray) -> FieldSampler:
    Dx, Dy = gradient(grid, D)
    return FieldSampler(grid, D, Dx, Dy)


def simulate_binding(
    grid: Grid,
    D: np.ndarray,
    q: np.ndarray,
    phi: np.ndarray,
    n_particles: int,
    dt: float,
    horizon: float,
    rng: np.random.Generator,
) -> BindingEvents:
    """Simulate ``n_particles`` independent particles started from density ``phi``.

    ``int q ds`` uses the left-endpoint rule; the binding time is the exact
    crossing time of that piecewise-linear integral and the binding location is
    the position at the start of the crossing step.  Particles still alive at
    ``horizon`` are censored with time ``horizon``.
    """
    if n_particles == 0:
        empty = np.empty(0)
        return BindingEvents(empty, empty, empty, np.empty(0, dtype=bool))
    x0, y0 = sample_nodal_density(grid, phi, n_particles, rng)
    state = ParticleState.start(x0, y0, rng)
    return _run_to_binding(grid, D, q, state, dt, horizon, rng)


def _run_to_binding(grid, D, q, state: ParticleState, dt, horizon, rng) -> BindingEvents:
    m = state.x.size
    out_x = np.empty(m)
    out_y = np.empty(m)
    out_t = np.full(m, float(horizon))
    censored = np.zeros(m, dtype=bool)
    drift = _drift_sampler(grid, D)
    qs = FieldSampler(grid, q)

    idx = np.arange(m)
    x, y = state.x, state.y
    acc, thr = state.integral, state.threshold
    t = 0.0
    nsteps = int(np.ceil(horizon / dt - 1e-9))
    for _ in range(nsteps):
        if idx.size == 0:
            break
        qx = qs(x, y)[:, 0]
        new_acc = acc + qx * dt
        hit = new_acc >= thr
        if np.any(hit):
            h = np.flatnonzero(hit)
            gi = idx[h]
            out_x[gi] = x[h]
            out_y[gi] = y[h]
            out_t[gi] = t + (thr[h] - acc[h]) / qx[h]
            keep = ~hit
            idx, x, y, new_acc, thr = idx[keep], x[keep], y[keep], new_acc[keep], thr[keep]
        acc = new_acc
        if idx.size == 0:
            break
        vals = drift(x, y)
        noise = rng.standard_normal((2, idx.size))
        sd = np.sqrt(2.0 * vals[:, 0] * dt)
        x, y = reflect(x + vals[:, 1] * dt + sd * noise[0], y + vals[:, 2] * dt + sd * noise[1])
        t += dt
    out_x[idx] = x
    out_y[idx] = y
    censored[idx] = True
    return BindingEvents(out_x, out_y, out_t, censored)


def worker_rng(seed: int, worker: int) -> np.random.Generator:
    """Independent stream for ``worker`` derived from the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(worker,)))


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if w < extra else 0) for w in range(parts)]


def _worker_events(args):
    grid_n, D, q, phi, m, dt, horizon, seed, w = args
    return simulate_binding(Grid(grid_n), D, q, phi, m, dt, horizon, worker_rng(seed, w))


def simulate_partitioned(
    grid: Grid, D, q, phi, n_particles: int, dt: float, horizon: float, seed: int, workers: int = 1, processes: bool = False
) -> BindingEvents:
    """Split particles across ``workers`` streams; the result depends only on ``(seed, workers)``."""
    tasks = [(grid.n, D, q, phi, m, dt, horizon, seed, w) for w, m in enumerate(_split(n_particles, workers))]
    if processes and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_worker_events, tasks))
    else:
        parts = [_worker_events(t) for t in tasks]
    return BindingEvents(
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.time for p in parts]),
        np.concatenate([p.censored for p in parts]),
    )


@dataclass
class BinCountResult:
    counts: np.ndarray
    outside: int  # bound outside every bin
    censored: int
    events: BindingEvents


def empirical_bin_counts(
    grid: Grid,
    D,
    q,
    phi,
    bins: BinPartition,
    n_particles: int,
    dt: float,
    horizon: float,
    seed: int,
    workers: int = 1,
    processes: bool = False,
) -> BinCountResult:
    ev = simulate_partitioned(grid, D, q, phi, n_particles, dt, horizon, seed, workers, processes)
    bound = ~ev.censored
    counts, outside = bins.count(ev.x[bound], ev.y[bound])
    return BinCountResult(counts, outside, int(np.count_nonzero(ev.censored)), ev)


def feynman_kac_estimate(
    grid: Grid,
    point: tuple[float, float],
    D,
    q,
    phi,
    dt: float,
    horizon: float,
    n_paths: int,
    rng: np.random.Generator,
    discount_floor: float = 1e-12,
) -> tuple[float, float]:
    """Estimate ``E^x int_0^horizon phi(X_t) exp(-int_0^t q) dt`` and its standard error.

    Within a step ``q`` is frozen at the left endpoint, so the discount is
    integrated exactly over the step.  Paths whose discount falls below
    ``discount_floor`` stop contributing.
    """
    x0, y0 = point
    if not (0 <= x0 <= 1 and 0 <= y0 <= 1):
        raise ValueError("start point must lie in the unit square")
    drift = _drift_sampler(grid, D)
    fq = FieldSampler(grid, phi, q)
    total = np.zeros(n_paths)
    idx = np.arange(n_paths)
    x = np.full(n_paths, float(x0))
    y = np.full(n_paths, float(y0))
    acc = np.zeros(n_paths)
    nsteps = int(np.ceil(horizon / dt - 1e-9))
    for _ in range(nsteps):
        vals = fq(x, y)
        ph, qx = vals[:, 0], vals[:, 1]
        disc = np.exp(-acc)
        qdt = qx * dt
        # (1 - e^{-q dt}) / q, with the q -> 0 limit dt
        step_int = np.where(qdt > 1e-12, -np.expm1(-qdt) / np.where(qx > 0, qx, 1.0), dt)
        total[idx] += ph * disc * step_int
        acc = acc + qdt
        live = disc * np.exp(-qdt) >= discount_floor
        if not np.all(live):
            idx, x, y, acc = idx[live], x[live], y[live], acc[live]
            if idx.size == 0:
                break
        v = drift(x, y)
        noise = rng.standard_normal((2, idx.size))
        sd = np.sqrt(2.0 * v[:, 0] * dt)
        x, y = reflect(x + v[:, 1] * dt + sd * noise[0], y + v[:, 2] * dt + sd * noise[1])
    est = float(total.mean())
    se = float(total.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return est, se
