"""Preconditioned Crank-Nicolson sampling of the latent field W.

The reference measure is the rescaled Gaussian prior, so the acceptance ratio
only involves the Poisson log-likelihood of the bin counts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from killdiff.errors import ConfigurationError, KilldiffError
from killdiff.forward import ForwardModel
from killdiff.point_process import log_likelihood
from killdiff.prior import GPSampler, link, rescale, sample_w

log = logging.getLogger(__name__)

BETA_MIN, BETA_MAX = 1e-4, 1.0


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 15_000
    burn_in: int = 5_000
    thin: int = 200
    beta: float = 0.1
    target_rate: float = 0.25
    adapt_window: int = 100
    seed: int = 0
    check_every: int = 500

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ConfigurationError("burn-in must be smaller than the number of iterations")
        if self.thin < 1:
            raise ConfigurationError("thinning stride must be >= 1")
        if not 0 < self.beta <= 1:
            raise ConfigurationError("pCN step beta must lie in (0, 1]")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class PriorDraw:
    """Draws of the rescaled prior field ``n^{-d/(4a+2d)} zeta w``."""

    sampler: GPSampler
    n_scale: float
    alpha: float
    zeta: np.ndarray

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        return rescale(sample_w(self.sampler, rng), self.n_scale, self.alpha, self.zeta)


def pcn_propose(W: np.ndarray, beta: float, prior: PriorDraw, rng: np.random.Generator, xi=None) -> np.ndarray:
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if xi is None:
        xi = prior(rng)
    return math.sqrt(1.0 - beta * beta) * W + beta * xi


def adapt_beta(rate: float, beta: float, target: float = 0.25) -> float:
    return float(np.clip(beta * math.exp(0.5 * (rate - target)), BETA_MIN, BETA_MAX))


@dataclass
class ChainState:
    W: np.ndarray
    loglik: float
    u: np.ndarray | None
    lam: np.ndarray | None
    iteration: int = 0
    accepted: int = 0
    proposed: int = 0
    solver_failures: int = 0
    telemetry: dict = field(default_factory=lambda: {"clamped": 0})

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


class Likelihood:
    """``W -> log p(Y | Lambda_{link(W)})`` with the forward solution cached for warm starts."""

    def __init__(self, forward: ForwardModel, Y: np.ndarray, n: float):
        self.forward = forward
        self.Y = np.asarray(Y)
        self.n = float(n)
        if self.Y.shape != (forward.bins.K,):
            raise ConfigurationError(f"data has {self.Y.size} bins, model has {forward.bins.K}")
        if self.n == 0 and np.any(self.Y > 0):
            raise ConfigurationError("positive counts with n = 0")

    @property
    def trivial(self) -> bool:
        # n = 0 with empty data: the likelihood is identically 1
        return self.n == 0

    def evaluate(self, W, x0=None, telemetry=None):
        if self.trivial:
            return 0.0, None, None
        res = self.forward(W, x0=x0, telemetry=telemetry)
        return log_likelihood(res.lam, self.Y, self.n), res.u, res.lam


def init_state(W0: np.ndarray, lik: Likelihood) -> ChainState:
    ll, u, lam = lik.evaluate(W0)
    return ChainState(W0.copy(), ll, u, lam)


def pcn_step(state: ChainState, lik: Likelihood, prior: PriorDraw, beta: float, rng: np.random.Generator) -> bool:
    """Advance ``state`` by one pCN iteration in place; returns whether the move was accepted."""
    Wp = pcn_propose(state.W, beta, prior, rng)
    log_u = math.log(rng.random())
    state.iteration += 1
    state.proposed += 1
    try:
        ll, u, lam = lik.evaluate(Wp, x0=state.u, telemetry=state.telemetry)
    except KilldiffError as exc:
        state.solver_failures += 1
        log.debug("proposal rejected after solver failure: %s", exc)
        return False
    if ll == -math.inf or not log_u < ll - state.loglik:
        return False
    state.W, state.loglik, state.u, state.lam = Wp, ll, u, lam
    state.accepted += 1
    return True


@dataclass
class PosteriorSummary:
    W_mean: np.ndarray
    D_mean: np.ndarray
    fitted: np.ndarray  # n * Lambda_{D_mean}
    acceptance_rate: float  # over the post-burn-in iterations
    n_retained: int
    samples: np.ndarray  # retained W fields
    loglik_trace: np.ndarray  # at every retained iteration
    beta_trace: list
    final_beta: float
    solver_failures: int
    clamped: int
    cache_max_error: float
    chain_mean: np.ndarray  # over all post-burn-in iterates
    chain_var: np.ndarray


class ChainAborted(KilldiffError):
    pass


def run_chain(config: ChainConfig, lik: Likelihood, prior: PriorDraw, W0: np.ndarray | None = None) -> PosteriorSummary:
    """Run one chain from ``W0`` (default 0) and summarise the retained samples.

    ``beta`` is adapted towards the target acceptance rate in windows during
    burn-in and frozen afterwards.
    """
    rng = np.random.default_rng(config.seed)
    shape = prior.zeta.shape
    W0 = np.zeros(shape) if W0 is None else np.asarray(W0, dtype=float)
    state = init_state(W0, lik)
    beta = config.beta
    beta_trace = [beta]
    window_acc = 0
    samples, ll_trace = [], []
    mean = np.zeros(shape)
    m2 = np.zeros(shape)
    n_post = 0
    post_acc = 0
    cache_err = 0.0

    for it in range(1, config.n_iter + 1):
        acc = pcn_step(state, lik, prior, beta, rng)
        if it <= config.burn_in:
            window_acc += acc
            if it % config.adapt_window == 0:
                beta = adapt_beta(window_acc / config.adapt_window, beta, config.target_rate)
                beta_trace.append(beta)
                window_acc = 0
        else:
            post_acc += acc
            n_post += 1
            delta = state.W - mean
            mean += delta / n_post
            m2 += delta * (state.W - mean)
            if (it - config.burn_in) % config.thin == 0:
                samples.append(state.W.copy())
                ll_trace.append(state.loglik)
        if config.check_every and it % config.check_every == 0 and not lik.trivial:
            fresh, _, _ = lik.evaluate(state.W)
            cache_err = max(cache_err, abs(fresh - state.loglik) / max(1.0, abs(fresh)))
        if it >= 100 and state.solver_failures > 0.5 * state.proposed:
            raise ChainAborted(f"{state.solver_failures} of {state.proposed} proposals failed numerically")

    samples = np.array(samples)
    W_mean = samples.mean(axis=0) if len(samples) else np.zeros(shape)
    D_mean = link(W_mean, lik.forward.link_cfg)
    fitted = lik.n * lik.forward.solve_D(D_mean).lam
    return PosteriorSummary(
        W_mean=W_mean,
        D_mean=D_mean,
        fitted=fitted,
        acceptance_rate=post_acc / n_post if n_post else 0.0,
        n_retained=len(samples),
        samples=samples,
        loglik_trace=np.array(ll_trace),
        beta_trace=beta_trace,
        final_beta=beta,
        solver_failures=state.solver_failures,
        clamped=state.telemetry.get("clamped", 0),
        cache_max_error=cache_err,
        chain_mean=mean,
        chain_var=m2 / max(n_post - 1, 1),
    )
