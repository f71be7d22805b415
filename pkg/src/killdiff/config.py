"""Declarative experiment configuration.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  Values
are Python literals (numbers, quoted strings, tuples); bare words are read as
strings.  A ``preset = <name>`` line selects the starting point, later keys
override it.  Example::

    preset = desk
    grid_n = 65
    window = (0.125, 0.875, 0.125, 0.875)
    n = 1e5
"""

from __future__ import annotations

import ast
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from killdiff.errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    # discretisation and observation window (Omega_00) / prior support (Omega_0)
    grid_n: int = 33
    window: tuple = (0.125, 0.875, 0.125, 0.875)
    support: tuple = (0.0625, 0.9375, 0.0625, 0.9375)
    K: int = 36
    n: float = 1e6
    # truth
    w0: str = "bump"
    w0_amplitude: float = 5.0
    w0_center: tuple = (0.5, 0.7)
    w0_width: float = 40.0
    phi: str = "radial"
    phi_freq: float = 3.0
    q: str = "focus"
    q_inside: float = 200.0
    q_outside: float = 100.0
    q_center: tuple = (0.35, 0.4)
    q_radius: float = 0.1
    q_transition: float = 0.02
    # prior and link
    prior_nu: float = 2.5
    prior_length_scale: float = 0.15
    link_offset: float = 0.25
    link_scale: float = 0.25
    rescale_alpha: float = 2.5
    # chain
    chain_iter: int = 5000
    chain_burn_in: int = 2000
    chain_thin: int = 50
    chain_beta: float = 0.1
    adapt_target: float = 0.25
    adapt_window: int = 100
    # particles
    n_particles: int = 100_000
    particle_dt: float = 1e-4
    particle_horizon: float = 50.0
    workers: int = 1
    # studies
    contraction_n: tuple = (1e4, 1e5, 1e6)
    contraction_iter: int = 3000
    concentration_K: int = 36
    concentration_n: float = 1e4
    concentration_reps: int = 500
    concentration_t: tuple = (0.0, 0.5, 1.0, 2.0, 3.0)
    stability_pairs: int = 50
    stability_q_level: float = 1.0
    stability_q_scales: tuple = (1.0, 10.0)
    seed: int = 1
    out_dir: str = "out"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def hash(self) -> str:
        """Digest of every field that affects results (all but ``out_dir``)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PRESETS = {
    "desk": {},
    # constant coefficients: D = 1/2, q constant on the window, uniform phi
    "constant": {"w0": "zero", "q": "constant", "phi": "uniform"},
    "full": {
        "grid_n": 65,
        "n": 1e7,
        "link_offset": 15.0,
        "chain_iter": 15_000,
        "chain_burn_in": 5_000,
        "chain_thin": 200,
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            return str(value)
        if kind == "tuple":
            return tuple(float(v) for v in (value if isinstance(value, (tuple, list)) else (value,)))
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot interpret {value!r} as {kind}") from None
    return value


def from_mapping(mapping: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    mapping = dict(mapping)
    preset = mapping.pop("preset", None)
    if base is None:
        base = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        base = base.replace(**{k: _coerce(k, v) for k, v in PRESETS[preset].items()})
    unknown = sorted(set(mapping) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return base.replace(**{k: _coerce(k, v) for k, v in mapping.items()})


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            out[key] = val
    return out


def load_config(source: str | Path) -> ExperimentConfig:
    """Load a config file, or a bare preset name written as ``preset:<name>``."""
    s = str(source)
    if s.startswith("preset:"):
        return from_mapping({"preset": s.split(":", 1)[1]})
    return from_mapping(parse_config_text(Path(source).read_text()))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"# config hash {cfg.hash}"]
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {v!r}")
    return "\n".join(lines) + "\n"


def validate(cfg: ExperimentConfig) -> list[str]:
    """Raise ``ConfigurationError`` on hard violations; return soft warnings."""
    from killdiff.grid import Grid, Rect
    from killdiff.point_process import make_bins

    grid = Grid(cfg.grid_n)
    for key in ("window", "support"):
        if len(getattr(cfg, key)) != 4:
            raise ConfigurationError(f"{key}: expected (x0, x1, y0, y1)")
    window, support = Rect(*cfg.window), Rect(*cfg.support)
    try:
        window.node_range(grid)
        support.node_range(grid)
    except ConfigurationError as exc:
        raise ConfigurationError(f"window/support: {exc}") from None
    if not support.contains(window):
        raise ConfigurationError("support: must contain the observation window")
    if min(support.x0, support.y0, 1 - support.x1, 1 - support.y1) < 2 * grid.h - 1e-12:
        raise ConfigurationError("support: must stay at least two grid cells away from the boundary")
    make_bins(grid, window, cfg.K)
    if cfg.w0 not in ("bump", "zero"):
        raise ConfigurationError(f"w0: unknown formula {cfg.w0!r}")
    if cfg.q not in ("focus", "constant", "zero"):
        raise ConfigurationError(f"q: unknown formula {cfg.q!r}")
    levels = {"focus": (cfg.q_inside, cfg.q_outside), "constant": (cfg.q_outside,)}.get(cfg.q, (0.0,))
    if min(levels) <= 0:
        raise ConfigurationError("q: q must be positive on the window")
    if cfg.n < 0:
        raise ConfigurationError("n: must be nonnegative")
    if cfg.link_offset <= 0 or cfg.link_scale <= 0:
        raise ConfigurationError("link_offset/link_scale: must be positive")
    if cfg.prior_nu not in (0.5, 1.5, 2.5):
        raise ConfigurationError("prior_nu: must be 0.5, 1.5 or 2.5")
    soft = []
    from killdiff.truth import phi_field

    phi = phi_field(grid, cfg.phi, cfg.phi_freq)
    if np.min(phi[window.mask(grid)]) <= 1.0:
        soft.append("phi: normalised initial density is <= 1 somewhere on the window (identifiability surrogate not met)")
    for msg in soft:
        log.warning(msg)
    return soft


def derive_seed(seed: int, *key: int) -> int:
    """Deterministic sub-seed for an independent purpose/task."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
