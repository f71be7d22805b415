"""Experiment commands: forward model, particle oracle, synthesis, MCMC,
evaluation and the three property studies.

Every command is a deterministic function of the configuration (including its
seed).  Tables are CSV, metadata is JSON with sorted keys; wall-clock times go
to ``timing.json`` only, which is the one file outside the determinism
contract.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import stats

from killdiff.config import ExperimentConfig, derive_seed, dump_config, validate
from killdiff.errors import ConfigurationError, KilldiffError
from killdiff.forward import ForwardModel, ForwardResult
from killdiff.grid import Grid, Rect, discrete_norm, integrate, read_field_csv, write_field_csv
from killdiff.mcmc import ChainConfig, Likelihood, PriorDraw, run_chain
from killdiff.particles import empirical_bin_counts
from killdiff.pde import assemble, solve_elliptic
from killdiff.point_process import (
    BinPartition,
    histogram_estimator,
    make_bins,
    read_bins_csv,
    sample_counts,
    write_bins_csv,
)
from killdiff.prior import LinkConfig, MaternConfig, build_sampler, link, make_cutoff
from killdiff.truth import phi_field, q_field, w0_field

log = logging.getLogger(__name__)

# sub-seed keys
SEED_SYNTH, SEED_CHAIN, SEED_PARTICLES, SEED_STABILITY, SEED_CONCENTRATION = 1, 2, 3, 4, 5
SEED_CONTRACTION_DATA, SEED_CONTRACTION_CHAIN = 10, 11


@dataclass
class Setup:
    cfg: ExperimentConfig
    grid: Grid
    window: Rect
    support: Rect
    bins: BinPartition
    zeta: np.ndarray
    q: np.ndarray
    phi: np.ndarray
    link_cfg: LinkConfig

    @cached_property
    def W0(self) -> np.ndarray:
        c = self.cfg
        return self.zeta * w0_field(self.grid, c.w0, c.w0_amplitude, c.w0_center, c.w0_width)

    @cached_property
    def D0(self) -> np.ndarray:
        return link(self.W0, self.link_cfg)

    @cached_property
    def forward(self) -> ForwardModel:
        return ForwardModel(self.grid, self.q, self.phi, self.bins, self.link_cfg)

    @cached_property
    def truth(self) -> ForwardResult:
        return self.forward.solve_D(self.D0)

    @property
    def baseline_D(self) -> np.ndarray:
        return link(np.zeros(self.grid.shape), self.link_cfg)

    def with_bins(self, K: int) -> "Setup":
        return Setup(self.cfg, self.grid, self.window, self.support, make_bins(self.grid, self.window, K),
                     self.zeta, self.q, self.phi, self.link_cfg)

    def prior(self, n: float) -> PriorDraw:
        c = self.cfg
        sampler = build_sampler(MaternConfig(c.prior_nu, c.prior_length_scale), self.grid, self.support)
        return PriorDraw(sampler, max(float(n), 1.0), c.rescale_alpha, self.zeta)


def build_setup(cfg: ExperimentConfig) -> Setup:
    validate(cfg)
    grid = Grid(cfg.grid_n)
    window, support = Rect(*cfg.window), Rect(*cfg.support)
    q = q_field(grid, cfg.q, window, cfg.q_inside, cfg.q_outside, cfg.q_center, cfg.q_radius, cfg.q_transition)
    return Setup(
        cfg=cfg,
        grid=grid,
        window=window,
        support=support,
        bins=make_bins(grid, window, cfg.K),
        zeta=make_cutoff(grid, window, support),
        q=q,
        phi=phi_field(grid, cfg.phi, cfg.phi_freq),
        link_cfg=LinkConfig(cfg.link_offset, cfg.link_scale),
    )


# -- output helpers ---------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_table(path, header: list[str], rows: list[list]):
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(fmt(v) for v in r) + "\n")


def _out(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    (p / "config.txt").write_text(dump_config(cfg))
    return p


class _Timer:
    def __init__(self, out: Path, name: str):
        self.out, self.name = out, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        path = self.out / "timing.json"
        timing = read_json(path) if path.exists() else {}
        timing[self.name] = self.seconds
        write_json(path, timing)


# -- commands ---------------------------------------------------------------


def cmd_forward(cfg: ExperimentConfig) -> dict:
    """Solve the forward problem for the configured truth and write all fields."""
    out = _out(cfg)
    with _Timer(out, "forward"):
        s = build_setup(cfg)
        tr = s.truth
        lam_field = s.q * tr.u
        for name, f in (("D0", s.D0), ("q", s.q), ("phi", s.phi), ("u", tr.u), ("lambda", lam_field)):
            write_field_csv(out / f"{name}.csv", s.grid, f)
        write_bins_csv(out / "intensities.csv", s.bins, tr.lam, column="intensity")
        total = float(tr.lam.sum())
        report = {
            "config_hash": cfg.hash,
            "K": s.bins.K,
            "sum_intensity": total,
            "mass_outside_window": float(integrate(s.grid, lam_field) - total),
            "D0_min": float(s.D0.min()),
            "D0_max": float(s.D0.max()),
        }
        write_json(out / "forward.json", report)
    print(f"sum of bin intensities: {total:.12f}")
    return report


def cmd_particles(cfg: ExperimentConfig, n_particles: int | None = None) -> dict:
    """Compare simulated binding counts with the PDE intensities."""
    out = _out(cfg)
    n_particles = cfg.n_particles if n_particles is None else int(n_particles)
    with _Timer(out, "particles"):
        s = build_setup(cfg)
        lam = s.truth.lam
        res = empirical_bin_counts(
            s.grid, s.D0, s.q, s.phi, s.bins, n_particles, cfg.particle_dt, cfg.particle_horizon,
            derive_seed(cfg.seed, SEED_PARTICLES), workers=cfg.workers,
        )
        expected = n_particles * lam
        rows = []
        chi2 = 0.0
        within = 0
        for b in range(s.bins.K):
            e, c = expected[b], int(res.counts[b])
            z = (c - e) / math.sqrt(e) if e > 0 else 0.0
            ok = abs(c - e) <= 4 * math.sqrt(e)
            within += ok
            if e > 0:
                chi2 += (c - e) ** 2 / e
            rows.append([cfg.hash, b, c, e, z, ok])
        write_table(out / "particles_detail.csv", ["config_hash", "bin_index", "count", "expected", "z", "within_4sd"], rows)
        write_bins_csv(out / "particle_counts.csv", s.bins, res.counts)
        dof = max(s.bins.K - 1, 1)
        report = {
            "config_hash": cfg.hash,
            "n_particles": n_particles,
            "chi2": chi2,
            "chi2_dof": dof,
            "chi2_pvalue": float(stats.chi2.sf(chi2, dof)) if n_particles else 1.0,
            "bins_within_4sd": within,
            "censored": res.censored,
            "censored_fraction": res.censored / n_particles if n_particles else 0.0,
            "bound_outside_window": res.outside,
        }
        if s.bins.k % 2 == 0 and n_particles:
            h = s.bins.k // 2
            grid_counts = res.counts.reshape(s.bins.k, s.bins.k)
            quads = [int(grid_counts[r:r + h, c:c + h].sum()) for r in (0, h) for c in (0, h)]
            qchi2 = float(stats.chisquare(quads).statistic) if sum(quads) else 0.0
            report["quadrant_counts"] = quads
            report["quadrant_chi2"] = qchi2
            report["quadrant_pvalue"] = float(stats.chi2.sf(qchi2, 3))
        write_json(out / "particles.json", report)
    return report


def synthesize(s: Setup) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(s.cfg.seed, SEED_SYNTH))
    return sample_counts(s.truth.lam, s.cfg.n, rng)


def cmd_synth(cfg: ExperimentConfig) -> dict:
    out = _out(cfg)
    with _Timer(out, "synth"):
        s = build_setup(cfg)
        Y = synthesize(s)
        write_bins_csv(out / "counts.csv", s.bins, Y)
        report = {"config_hash": cfg.hash, "n": cfg.n, "K": s.bins.K, "total_count": int(Y.sum())}
        write_json(out / "synth.json", report)
    return report


def _load_counts(path, bins: BinPartition) -> np.ndarray:
    rects, Y, column = read_bins_csv(path)
    if column != "count" or len(rects) != bins.K:
        raise ConfigurationError(f"{path}: counts do not match the {bins.K}-bin partition")
    for r, b in zip(rects, bins.rects):
        if not np.allclose(r.as_tuple(), b.as_tuple(), atol=1e-12):
            raise ConfigurationError(f"{path}: bin geometry differs from the configuration")
    return Y


def cmd_mcmc(cfg: ExperimentConfig, counts_path=None) -> dict:
    """Run the pCN chain on synthetic (or supplied) counts and write the posterior summary."""
    out = _out(cfg)
    with _Timer(out, "mcmc") as timer:
        s = build_setup(cfg)
        if counts_path is None:
            Y = synthesize(s)
            write_bins_csv(out / "counts.csv", s.bins, Y)
        else:
            Y = _load_counts(counts_path, s.bins)
        chain_cfg = ChainConfig(cfg.chain_iter, cfg.chain_burn_in, cfg.chain_thin, cfg.chain_beta,
                                cfg.adapt_target, cfg.adapt_window, derive_seed(cfg.seed, SEED_CHAIN))
        summary = run_chain(chain_cfg, Likelihood(s.forward, Y, cfg.n), s.prior(cfg.n))
        write_field_csv(out / "W_mean.csv", s.grid, summary.W_mean)
        write_field_csv(out / "D_mean.csv", s.grid, summary.D_mean)
        write_bins_csv(out / "fitted.csv", s.bins, summary.fitted, column="intensity")
        report = {
            "config_hash": cfg.hash,
            "acceptance_rate": summary.acceptance_rate,
            "beta_trace": summary.beta_trace,
            "final_beta": summary.final_beta,
            "n_retained": summary.n_retained,
            "loglik_trace": summary.loglik_trace,
            "solver_failures": summary.solver_failures,
            "clamped": summary.clamped,
            "cache_max_error": summary.cache_max_error,
            "min_retained_D": float(min((link(w, s.link_cfg).min() for w in summary.samples), default=math.nan)),
        }
        write_json(out / "summary.json", report)
    report["runtime_s"] = timer.seconds
    return report


def _argmax_location(grid: Grid, f: np.ndarray) -> tuple[float, float]:
    j, i = np.unravel_index(int(np.argmax(f)), grid.shape)
    return float(grid.coords[i]), float(grid.coords[j])


def evaluate_estimate(s: Setup, D_hat: np.ndarray) -> dict:
    """Errors of a diffusivity estimate against the configured truth."""
    g = s.grid
    u_hat = solve_elliptic(assemble(g, D_hat, s.q), s.phi)
    lam_hat, lam0 = s.q * u_hat, s.q * s.truth.u
    loc = _argmax_location(g, D_hat - s.baseline_D)
    center = np.array(s.cfg.w0_center)
    return {
        "l1_D": discrete_norm(g, D_hat - s.D0, "L1"),
        "l2_D": discrete_norm(g, D_hat - s.D0, "L2"),
        "l1_lambda": discrete_norm(g, lam_hat - lam0, "L1"),
        "argmax_x": loc[0],
        "argmax_y": loc[1],
        "argmax_dist": float(np.hypot(*(np.array(loc) - center))),
    }


def cmd_eval(cfg: ExperimentConfig, summary_dir=None) -> dict:
    """Compare a posterior mean against the truth and the ``D = link(0)`` baseline."""
    out = _out(cfg)
    summary_dir = Path(summary_dir or cfg.out_dir)
    with _Timer(out, "eval"):
        s = build_setup(cfg)
        meta = read_json(summary_dir / "summary.json")
        if meta.get("config_hash") != cfg.hash:
            raise ConfigurationError(
                f"config hash mismatch: summary has {meta.get('config_hash')}, config is {cfg.hash}"
            )
        grid, D_hat = read_field_csv(summary_dir / "D_mean.csv")
        if grid.n != s.grid.n:
            raise ConfigurationError(f"grid mismatch: summary on {grid.n}^2, config on {s.grid.n}^2")
        _, fitted, _ = read_bins_csv(summary_dir / "fitted.csv")
        Y = _load_counts(summary_dir / "counts.csv", s.bins)
        est = evaluate_estimate(s, D_hat)
        base = evaluate_estimate(s, s.baseline_D)
        cols = ["l1_D", "l2_D", "l1_lambda", "argmax_x", "argmax_y", "argmax_dist"]
        write_table(out / "eval.csv", ["config_hash", "estimator"] + cols,
                    [[cfg.hash, "posterior_mean"] + [est[c] for c in cols],
                     [cfg.hash, "baseline"] + [base[c] for c in cols]])
        truth_counts = cfg.n * s.truth.lam
        write_table(out / "eval_bins.csv", ["config_hash", "bin_index", "observed", "fitted", "truth"],
                    [[cfg.hash, b, int(Y[b]), fitted[b], truth_counts[b]] for b in range(s.bins.K)])
        ratio = est["l2_D"] / base["l2_D"] if base["l2_D"] > 0 else math.nan
        report = {
            "config_hash": cfg.hash,
            "posterior_mean": est,
            "baseline": base,
            "l2_ratio": ratio,
            "pass_error_ratio": bool(ratio <= 0.5),
            "pass_argmax": bool(est["argmax_dist"] <= 0.15),
        }
        write_json(out / "eval.json", report)
    return report


def bin_schedule(n: float, d: int = 2) -> int:
    """Target bin count ``K ~ n^{d/(2+d)}``."""
    return int(round(float(n) ** (d / (2.0 + d))))


def aligned_bins(s: Setup, K_target: int) -> int:
    """Largest grid-aligned ``k^2 <= K_target``."""
    i0, i1, j0, j1 = s.window.node_range(s.grid)
    cells = math.gcd(i1 - i0, j1 - j0)
    k = max(1, math.isqrt(max(K_target, 1)))
    while cells % k:
        k -= 1
    return k * k


def cmd_study_contraction(cfg: ExperimentConfig, n_list=None) -> dict:
    """Posterior-mean error as the sample scale n grows, with K following the bin schedule."""
    out = _out(cfg)
    n_list = tuple(cfg.contraction_n if n_list is None else n_list)
    rows = []
    with _Timer(out, "study_contraction"):
        base = build_setup(cfg)
        baseline_l2 = discrete_norm(base.grid, base.baseline_D - base.D0)
        for idx, n in enumerate(n_list):
            K_target = bin_schedule(n)
            K = aligned_bins(base, K_target)
            row = {"n": float(n), "K_target": K_target, "K": K, "baseline_l2": baseline_l2}
            try:
                s = base.with_bins(K)
                Y = sample_counts(s.truth.lam, n, np.random.default_rng(derive_seed(cfg.seed, SEED_CONTRACTION_DATA, idx)))
                it = cfg.contraction_iter
                chain_cfg = ChainConfig(it, it * 2 // 5, max(1, it // 60), cfg.chain_beta, cfg.adapt_target,
                                        cfg.adapt_window, derive_seed(cfg.seed, SEED_CONTRACTION_CHAIN, idx))
                summ = run_chain(chain_cfg, Likelihood(s.forward, Y, n), s.prior(n))
                row.update(l2_error=discrete_norm(s.grid, summ.D_mean - s.D0), acceptance=summ.acceptance_rate, error="")
            except KilldiffError as exc:
                row.update(l2_error=math.nan, acceptance=math.nan, error=str(exc))
            rows.append(row)
        errs = np.array([r["l2_error"] for r in rows])
        ok = np.isfinite(errs)
        slope = float(np.polyfit(np.log(np.array(n_list)[ok]), np.log(errs[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
        monotone = bool(all(errs[i + 1] <= 1.1 * errs[i] for i in range(len(errs) - 1)) and ok.all())
        cols = ["n", "K_target", "K", "l2_error", "baseline_l2", "acceptance", "error"]
        write_table(out / "contraction.csv", ["config_hash"] + cols, [[cfg.hash] + [r[c] for c in cols] for r in rows])
        report = {"config_hash": cfg.hash, "rows": rows, "loglog_slope": slope,
                  "pass_monotone": monotone, "pass_slope": bool(slope < 0)}
        write_json(out / "contraction.json", report)
    return report


def concentration_study(K: int, n: float, reps: int, ts, rng: np.random.Generator) -> dict:
    lam = np.full(K, 1.0 / K)
    Y = rng.poisson(n * lam, size=(reps, K))
    l1 = np.array([np.abs(histogram_estimator(y, n).intensities - lam).sum() for y in Y])
    scale = math.sqrt(K / n)
    freqs = [float(np.mean(l1 >= t * scale)) for t in ts]
    return {
        "K": K, "n": n, "reps": reps, "t": list(ts),
        "exceedances": [int(np.sum(l1 >= t * scale)) for t in ts],
        "frequency": freqs,
        "reference_exp_minus_K": math.exp(-K),
        "mean_l1": float(l1.mean()),
        "mean_bound": math.sqrt(K) * math.sqrt(lam.sum()) / math.sqrt(n),
    }


def cmd_study_concentration(cfg: ExperimentConfig, K=None, n=None, reps=None, ts=None) -> dict:
    out = _out(cfg)
    K = cfg.concentration_K if K is None else int(K)
    n = cfg.concentration_n if n is None else float(n)
    reps = cfg.concentration_reps if reps is None else int(reps)
    ts = tuple(cfg.concentration_t if ts is None else ts)
    with _Timer(out, "study_concentration"):
        rng = np.random.default_rng(derive_seed(cfg.seed, SEED_CONCENTRATION))
        res = concentration_study(K, n, reps, ts, rng)
        write_table(out / "concentration.csv",
                    ["config_hash", "t", "threshold", "exceedances", "frequency", "reference_exp_minus_K"],
                    [[cfg.hash, t, t * math.sqrt(K / n), e, f, res["reference_exp_minus_K"]]
                     for t, e, f in zip(ts, res["exceedances"], res["frequency"])])
        res.update(
            config_hash=cfg.hash,
            pass_mean_bound=bool(res["mean_l1"] <= res["mean_bound"]),
            pass_nonincreasing=bool(all(a >= b for a, b in zip(res["frequency"], res["frequency"][1:]))),
        )
        write_json(out / "concentration.json", res)
    return res


def stability_ratio(grid: Grid, window: Rect, D1, D2, q, phi, rel_tol: float = 1e-9) -> dict:
    """``||D1 - D2||_{L2} / ||u1 - u2||_{H2(window)}``; flagged degenerate when the solutions coincide."""
    u1 = solve_elliptic(assemble(grid, D1, q), phi)
    u2 = solve_elliptic(assemble(grid, D2, q), phi)
    num = discrete_norm(grid, np.asarray(D1) - np.asarray(D2), "L2")
    den = discrete_norm(grid, u1 - u2, "H2", window)
    scale = max(discrete_norm(grid, u1, "H2", window), 1e-300)
    degenerate = den <= rel_tol * scale
    return {"l2_D": num, "h2_u": den, "ratio": math.nan if degenerate else num / den, "degenerate": bool(degenerate)}


def cmd_study_stability(cfg: ExperimentConfig, pairs=None, q_scales=None) -> dict:
    """Empirical inverse-continuity ratios for random prior pairs at several potential scales."""
    out = _out(cfg)
    pairs = cfg.stability_pairs if pairs is None else int(pairs)
    q_scales = tuple(cfg.stability_q_scales if q_scales is None else q_scales)
    with _Timer(out, "study_stability"):
        s = build_setup(cfg)
        q_unit = s.q * (cfg.stability_q_level / cfg.q_outside)
        prior = s.prior(cfg.n)
        rng = np.random.default_rng(derive_seed(cfg.seed, SEED_STABILITY))
        draws = [(link(prior(rng), s.link_cfg), link(prior(rng), s.link_cfg)) for _ in range(pairs)]
        rows, per_scale = [], {}
        for scale in q_scales:
            ratios = []
            for p, (D1, D2) in enumerate(draws):
                r = stability_ratio(s.grid, s.window, D1, D2, scale * q_unit, s.phi)
                rows.append([cfg.hash, scale, p, r["l2_D"], r["h2_u"], r["ratio"], r["degenerate"]])
                if not r["degenerate"]:
                    ratios.append(r["ratio"])
            per_scale[str(scale)] = {
                "max_ratio": float(np.max(ratios)) if ratios else math.nan,
                "median_ratio": float(np.median(ratios)) if ratios else math.nan,
                "n_valid": len(ratios),
                "q_norm_H2": discrete_norm(s.grid, scale * q_unit, "H2"),
            }
        write_table(out / "stability.csv",
                    ["config_hash", "q_scale", "pair", "l2_D_diff", "h2_u_diff", "ratio", "degenerate"], rows)
        report = {"config_hash": cfg.hash, "pairs": pairs, "per_scale": per_scale}
        write_json(out / "stability.json", report)
    return report
