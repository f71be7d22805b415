"""Command-line entry point: ``killdiff <command> CONFIG [options]``.

CONFIG is a key-value config file or ``preset:<name>``.  Exit status is 0 on
success, 2 for configuration errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from killdiff import experiments as ex
from killdiff.config import load_config
from killdiff.errors import ConfigurationError, KilldiffError


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="killdiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("config", help="config file or preset:<name>")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out-dir", help="override the output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("forward", "solve the forward problem and write fields and bin intensities")
    add("particles", "simulate particles and compare bin counts with the PDE").add_argument(
        "--n-particles", type=int)
    add("synth", "draw Poisson bin counts from the forward intensities")
    add("mcmc", "run the pCN chain").add_argument("--counts", help="counts CSV (default: synthesise)")
    add("eval", "evaluate a posterior summary").add_argument("--summary", help="directory holding mcmc output")
    add("study-contraction", "error of the posterior mean versus n").add_argument(
        "--n-list", type=_floats, help="comma separated sample scales")
    sp = add("study-concentration", "concentration of the histogram estimator")
    sp.add_argument("--K", type=int)
    sp.add_argument("--n", type=float)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--t", type=_floats, help="comma separated multipliers")
    sp = add("study-stability", "empirical inverse-continuity ratios")
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--q-scales", type=_floats)
    return p


def run(args) -> dict:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    cfg = cfg.replace(**overrides)
    cmd = args.command
    if cmd == "forward":
        return ex.cmd_forward(cfg)
    if cmd == "particles":
        return ex.cmd_particles(cfg, args.n_particles)
    if cmd == "synth":
        return ex.cmd_synth(cfg)
    if cmd == "mcmc":
        return ex.cmd_mcmc(cfg, args.counts)
    if cmd == "eval":
        return ex.cmd_eval(cfg, args.summary)
    if cmd == "study-contraction":
        return ex.cmd_study_contraction(cfg, args.n_list)
    if cmd == "study-concentration":
        return ex.cmd_study_concentration(cfg, args.K, args.n, args.reps, args.t)
    if cmd == "study-stability":
        return ex.cmd_study_stability(cfg, args.pairs, args.q_scales)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except KilldiffError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
