"""Planes in normalised image coordinates, cell moments and the cell-level energy.

A plane (a, b, c) predicts inverse depth a*u' + b*v' + c, with (u', v') the
centred, scale-normalised pixel coordinates from ``GridDims.normalize``.
Every energy function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .geodesic import CellGraph, VoronoiPartition
from .scene_io import DepthSample, DepthSamples, GridDims


class Plane(NamedTuple):
    a: float
    b: float
    c: float

    def at(self, u_n, v_n):
        return self.a * u_n + self.b * v_n + self.c

    def at_pixel(self, u: int, v: int, dims: GridDims) -> float:
        un, vn = dims.normalize(u, v)
        return float(self.at(un, vn))


@dataclass(frozen=True)
class CellMoments:
    """Per-cell sums of x x^T with x = (u', v', 1); ``M[n, 2, 2]`` is the cell size."""

    M: np.ndarray  # (S, 3, 3)
    count: np.ndarray  # (S,)

    def __getitem__(self, n: int) -> "CellMoments":
        return CellMoments(self.M[n : n + 1], self.count[n : n + 1])

    @property
    def single(self) -> np.ndarray:
        return self.M[0]


def cell_moments(part: VoronoiPartition) -> CellMoments:
    un, vn = part.dims.normalized_grid()
    lab = part.nearest_seed.ravel()
    S = part.n_seeds
    cols = (un.ravel(), vn.ravel(), np.ones(part.dims.size))
    M = np.empty((S, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            s = np.bincount(lab, weights=cols[i] * cols[j], minlength=S)
            M[:, i, j] = s
            M[:, j, i] = s
    count = np.bincount(lab, minlength=S)
    return CellMoments(M, count)


@dataclass(frozen=True)
class EnergyParams:
    w_una: float = 1e4
    w_c: float = 1.0
    lambda_c: float = 1.0
    p_prior: float = 0.1
    tau_o: float = 0.02
    s_o: float = 0.005

    def __post_init__(self):
        if self.w_una < 0 or self.w_c < 0:
            raise ValueError("w_una and w_c must be >= 0")
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be > 0")
        if not 0 < self.p_prior < 1:
            raise ValueError("p_prior must lie in (0, 1)")
        if not self.tau_o > 0 or not self.s_o > 0:
            raise ValueError("tau_o and s_o must be > 0")


@dataclass
class SolverState:
    planes: np.ndarray  # (S, 3)
    outlier: np.ndarray  # (S,) bool
    coplanar: np.ndarray  # (P,) bool, aligned with CellGraph pairs
    residual: np.ndarray  # (S,) deviation r_n used by the outlier term
    energy: float = float("nan")
    prev_planes: Optional[np.ndarray] = None  # anchor of the last plane sweep
    trace: list = field(default_factory=list)  # (iter, stage, energy)

    def copy(self) -> "SolverState":
        return SolverState(
            self.planes.copy(),
            self.outlier.copy(),
            self.coplanar.copy(),
            self.residual.copy(),
            self.energy,
            None if self.prev_planes is None else self.prev_planes.copy(),
            list(self.trace),
        )

    def plane(self, n: int) -> Plane:
        return Plane(*(float(x) for x in self.planes[n]))


def design_vectors(samples: DepthSamples) -> np.ndarray:
    """(S, 3) rows (u'_n, v'_n, 1) at each measurement pixel."""
    un, vn = samples.normalized()
    return np.stack([un, vn, np.ones(len(samples))], axis=1)


# ---------------------------------------------------------------- single terms


def unary_energy(plane: Plane, sample: DepthSample, o: bool, p: EnergyParams, dims: GridDims) -> float:
    if o:
        return 0.0
    r = Plane(*plane).at_pixel(sample.pixel.u, sample.pixel.v, dims) - 1.0 / sample.z
    return p.w_una * r * r


def moment_quadratic(d: np.ndarray, M: np.ndarray) -> np.ndarray:
    """d^T M d, broadcast over leading axes."""
    return np.einsum("...i,...ij,...j->...", d, M, d)


def pairwise_energy(theta_n, theta_m, c: bool, moments_n: CellMoments, p: EnergyParams) -> float:
    """Un-weighted pair term summed over the pixels of cell n."""
    M = moments_n.single if isinstance(moments_n, CellMoments) else np.asarray(moments_n)
    if c:
        d = np.asarray(theta_n, dtype=np.float64) - np.asarray(theta_m, dtype=np.float64)
        return float(p.w_c * moment_quadratic(d, M))
    return float(M[2, 2] * p.lambda_c)


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def outlier_log_probs(r, p: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """(log p(o=0), log p(o=1)) for deviation ``r`` under the logistic posterior."""
    t = (np.asarray(r, dtype=np.float64) - p.tau_o) / p.s_o
    a = np.log(p.p_prior) + _log_sigmoid(t)
    b = np.log1p(-p.p_prior) + _log_sigmoid(-t)
    z = np.logaddexp(a, b)
    return b - z, a - z


def outlier_energies(r, p: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """(E_o(o=0), E_o(o=1)) = (-log(1 - p1), -log p1)."""
    l0, l1 = outlier_log_probs(r, p)
    return -l0, -l1


def outlier_residuals(planes: np.ndarray, coplanar: np.ndarray, graph: CellGraph, samples: DepthSamples) -> np.ndarray:
    """Smallest deviation of each measurement from the planes it is connected to.

    Seeds without a connected neighbour fall back to their own plane.
    """
    x = design_vectors(samples)
    inv = samples.inverse_depth
    S = len(samples)
    r = np.full(S, np.inf)
    if graph.n_pairs:
        k = np.flatnonzero(coplanar)
        dev = np.abs(np.einsum("ki,ki->k", planes[graph.dst[k]], x[graph.src[k]]) - inv[graph.src[k]])
        np.minimum.at(r, graph.src[k], dev)
    own = np.abs(np.einsum("ni,ni->n", planes, x) - inv)
    return np.where(np.isinf(r), own, r)


def outlier_probability(n: int, state: SolverState, graph: CellGraph, samples: DepthSamples, p: EnergyParams) -> float:
    """p(o_n = 1) given the current planes and coplanarity flags."""
    r = outlier_residuals(state.planes, state.coplanar, graph, samples)[n]
    _, l1 = outlier_log_probs(r, p)
    return float(np.exp(l1))


# ---------------------------------------------------------------- totals


def unary_terms(planes: np.ndarray, outlier: np.ndarray, samples: DepthSamples, p: EnergyParams) -> np.ndarray:
    res = np.einsum("ni,ni->n", planes, design_vectors(samples)) - samples.inverse_depth
    return np.where(outlier, 0.0, p.w_una * res * res)


def pair_terms(planes: np.ndarray, coplanar: np.ndarray, graph: CellGraph, moments: CellMoments, p: EnergyParams) -> np.ndarray:
    """Un-weighted pair energies for every retained ordered pair."""
    if graph.n_pairs == 0:
        return np.zeros(0)
    d = planes[graph.src] - planes[graph.dst]
    quad = p.w_c * moment_quadratic(d, moments.M[graph.src])
    return np.where(coplanar, quad, moments.count[graph.src] * p.lambda_c)


def outlier_terms(residual: np.ndarray, outlier: np.ndarray, p: EnergyParams) -> np.ndarray:
    e0, e1 = outlier_energies(residual, p)
    return np.where(outlier, e1, e0)


def energy_terms(state: SolverState, graph: CellGraph, moments: CellMoments, samples: DepthSamples, p: EnergyParams):
    """(unary, weighted pairwise, outlier) totals; the outlier term uses ``state.residual``."""
    una = unary_terms(state.planes, state.outlier, samples, p)
    pair = graph.weight * pair_terms(state.planes, state.coplanar, graph, moments, p)
    out = outlier_terms(state.residual, state.outlier, p)
    return float(np.sum(una)), float(np.sum(pair)), float(np.sum(out))


def total_energy(state: SolverState, graph: CellGraph, moments: CellMoments, samples: DepthSamples, p: EnergyParams) -> float:
    return float(sum(energy_terms(state, graph, moments, samples, p)))
