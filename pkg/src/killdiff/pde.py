"""Schrödinger operator ``L v = div(D grad v) - q v`` with Neumann boundary.

The discretisation is a node-centred finite-volume scheme.  Each node owns its
trapezoidal control volume ``w_i``; fluxes across the faces between neighbours
use the arithmetic mean of the nodal diffusivities.  This gives

    K u = M phi,      K = S + M diag(q),   M = diag(w),

where ``S`` is the symmetric flux matrix.  ``M^{-1} K`` coincides with the usual
5-point stencil using mirror ghost nodes on the boundary, so ``A = -L`` in the
pointwise sense is ``M^{-1} K`` while ``K`` itself is exactly symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from killdiff.errors import DomainError, SingularSystemError, SolverError
from killdiff.grid import Grid, integrate

CG_RTOL = 1e-10


@dataclass(frozen=True)
class EllipticOperator:
    grid: Grid
    D: np.ndarray
    q: np.ndarray
    stiffness: sp.csr_matrix  # K, symmetric
    weights: np.ndarray  # flattened control-volume areas
    face_x: np.ndarray  # D on x-faces, shape (n, n-1)
    face_y: np.ndarray  # D on y-faces, shape (n-1, n)
    _diag: np.ndarray = field(repr=False)

    @property
    def q_is_zero(self) -> bool:
        return not np.any(self.q > 0)

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Pointwise action of ``A = -L`` (mirror-ghost stencil)."""
        v = self.stiffness @ np.asarray(f, dtype=float).ravel()
        return (v / self.weights).reshape(self.grid.shape)

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """Quadrature L2 inner product."""
        return float(np.sum(self.weights * np.ravel(f) * np.ravel(g)))


def assemble(grid: Grid, D: np.ndarray, q: np.ndarray) -> EllipticOperator:
    D = np.asarray(D, dtype=float)
    q = np.asarray(q, dtype=float)
    if D.shape != grid.shape or q.shape != grid.shape:
        raise DomainError("D and q must be nodal fields on the grid")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(q))):
        raise DomainError("D and q must be finite")
    if D.min() <= 0:
        raise DomainError(f"diffusivity must be positive (min D = {D.min():g})")
    if q.min() < 0:
        raise DomainError(f"potential must be nonnegative (min q = {q.min():g})")

    n = grid.n
    idx = np.arange(n * n).reshape(n, n)
    w = grid.weights.ravel()

    face_x = 0.5 * (D[:, 1:] + D[:, :-1])
    face_y = 0.5 * (D[1:, :] + D[:-1, :])
    # face length / h: boundary rows and columns only carry half a face
    cx = face_x.copy()
    cx[0, :] *= 0.5
    cx[-1, :] *= 0.5
    cy = face_y.copy()
    cy[:, 0] *= 0.5
    cy[:, -1] *= 0.5

    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    c = np.concatenate([cx.ravel(), cy.ravel()])

    diag = np.bincount(a, weights=c, minlength=n * n) + np.bincount(b, weights=c, minlength=n * n)
    diag += w * q.ravel()
    rows = np.concatenate([a, b, np.arange(n * n)])
    cols = np.concatenate([b, a, np.arange(n * n)])
    vals = np.concatenate([-c, -c, diag])
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))
    K.sort_indices()
    return EllipticOperator(grid, D, q, K, w, face_x, face_y, diag)


def _cg(A, b, x0, maxiter, what):
    diag = A.diagonal()
    precond = spla.LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
    x, info = spla.cg(A, b, x0=x0, rtol=CG_RTOL, atol=0.0, maxiter=maxiter, M=precond)
    bnorm = np.linalg.norm(b)
    res = np.linalg.norm(b - A @ x) / bnorm if bnorm > 0 else 0.0
    if info != 0:
        raise SolverError(f"{what}: CG did not converge in {maxiter} iterations (relative residual {res:.3e})", res)
    return x


def solve_elliptic(op: EllipticOperator, phi: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Solve ``-L u = phi`` with zero Neumann flux.

    With ``q == 0`` the system is singular; ``phi`` must integrate to zero and
    the returned solution is the zero-mean representative.
    """
    grid = op.grid
    phi = np.asarray(phi, dtype=float)
    singular = op.q_is_zero
    if singular:
        mass = integrate(grid, phi)
        if abs(mass) >= 1e-10:
            raise SingularSystemError(f"singular system: q == 0 requires a mean-zero source (integral {mass:.3e})")
    b = op.weights * phi.ravel()
    if not np.any(b):
        return np.zeros(grid.shape)
    guess = None if x0 is None else np.asarray(x0, dtype=float).ravel()
    u = _cg(op.stiffness, b, guess, 10 * grid.size, "elliptic solve")
    if singular:
        u -= np.sum(op.weights * u)  # |Omega| = 1
    return u.reshape(grid.shape)


@dataclass
class ParabolicTrajectory:
    times: np.ndarray
    snapshots: np.ndarray  # (len(times), n, n)
    dt: float

    @property
    def T(self) -> float:
        return float(self.times[-1])


def _n_steps(T: float, dt: float) -> int:
    if dt <= 0 or T < dt:
        raise DomainError(f"need dt > 0 and T >= dt (got T={T}, dt={dt})")
    return max(1, int(round(T / dt)))


def _backward_euler(op: EllipticOperator, phi: np.ndarray, dt: float, nsteps: int):
    M = sp.diags(op.weights)
    system = (M + dt * op.stiffness).tocsr()
    v = np.asarray(phi, dtype=float).ravel().copy()
    yield v
    for _ in range(nsteps):
        rhs = op.weights * v
        v = _cg(system, rhs, v, 10 * op.grid.size, "parabolic step") if np.any(rhs) else np.zeros_like(v)
        yield v


def solve_parabolic(op: EllipticOperator, phi: np.ndarray, T: float, dt: float) -> ParabolicTrajectory:
    """Backward-Euler trajectory of ``dv/dt = L v``, ``v(0) = phi``."""
    nsteps = _n_steps(T, dt)
    dt = T / nsteps
    snaps = np.array([v.reshape(op.grid.shape) for v in _backward_euler(op, phi, dt, nsteps)])
    times = np.arange(nsteps + 1) * dt
    times[-1] = T
    return ParabolicTrajectory(times, snaps, dt)


def time_average(op: EllipticOperator, phi: np.ndarray, T: float, dt: float) -> np.ndarray:
    """Trapezoidal approximation of ``int_0^T v(t) dt`` along the backward-Euler path."""
    nsteps = _n_steps(T, dt)
    dt = T / nsteps
    acc = np.zeros(op.grid.size)
    prev = None
    for v in _backward_euler(op, phi, dt, nsteps):
        if prev is not None:
            acc += 0.5 * dt * (prev + v)
        prev = v
    return acc.reshape(op.grid.shape)


def eigen_smallest(op: EllipticOperator, m: int = 1) -> list[tuple[float, np.ndarray]]:
    """The ``m`` smallest eigenpairs of ``K v = lam M v`` (i.e. of ``-L``).

    Shift-invert Lanczos about a negative shift; eigenfields are orthonormal in
    the quadrature inner product and signed so their largest entry is positive.
    """
    if not 1 <= m <= 10:
        raise ValueError("m must be between 1 and 10")
    N = op.grid.size
    M = sp.diags(op.weights).tocsc()
    K = op.stiffness.tocsc()
    try:
        vals, vecs = spla.eigsh(K, k=m, M=M, sigma=-1.0, which="LM", tol=1e-12, v0=np.ones(N))
    except spla.ArpackNoConvergence as exc:
        res = None
        if exc.eigenvalues.size:
            r = K @ exc.eigenvectors - (M @ exc.eigenvectors) * exc.eigenvalues
            res = float(np.max(np.linalg.norm(r, axis=0)))
        raise SolverError(f"eigen iteration stagnated (residual {res})", res) from exc
    order = np.argsort(vals)
    out = []
    for k in order:
        v = vecs[:, k]
        v = v / np.sqrt(np.sum(op.weights * v * v))
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out.append((float(vals[k]), v.reshape(op.grid.shape)))
    return out


def spectral_gap(op: EllipticOperator) -> float:
    return eigen_smallest(op, 1)[0][0]
