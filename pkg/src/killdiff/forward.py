"""Parameter-to-intensity map ``W -> D = link(W) -> u_{D,q} -> Lambda_D``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from killdiff.grid import Grid
from killdiff.pde import assemble, solve_elliptic
from killdiff.point_process import BinPartition, bin_intensities
from killdiff.prior import LinkConfig, link


@dataclass
class ForwardResult:
    D: np.ndarray
    u: np.ndarray
    lam: np.ndarray


@dataclass
class ForwardModel:
    grid: Grid
    q: np.ndarray
    phi: np.ndarray
    bins: BinPartition
    link_cfg: LinkConfig = LinkConfig()

    def solve_D(self, D: np.ndarray, x0: np.ndarray | None = None) -> ForwardResult:
        op = assemble(self.grid, D, self.q)
        u = solve_elliptic(op, self.phi, x0=x0)
        return ForwardResult(D, u, bin_intensities(u, self.q, self.bins))

    def __call__(self, W: np.ndarray, x0: np.ndarray | None = None, telemetry: dict | None = None) -> ForwardResult:
        return self.solve_D(link(W, self.link_cfg, telemetry), x0=x0)
