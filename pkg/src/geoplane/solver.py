"""Initialisation, block-coordinate minimisation and dense rendering.

Each iteration updates coplanarity flags, then outlier flags, then planes.
Flag updates are exact per-flag minimisers; a plane update solves the 3x3
normal equations of every term containing that plane, plus a tiny Tikhonov
anchor ``mu * |theta - theta_prev|^2`` that keeps isolated cells well posed.

The outlier term is evaluated at the deviations ``state.residual`` captured
during the outlier update, so within one iteration the plane sweep sees a
quadratic objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .energy import (
    CellMoments,
    EnergyParams,
    Plane,
    SolverState,
    design_vectors,
    moment_quadratic,
    outlier_energies,
    outlier_residuals,
    total_energy,
)
from .geodesic import CellGraph, VoronoiPartition
from .scene_io import DenseDepthMap, DepthSamples, SemanticMap

logger = logging.getLogger(__name__)

SCHEDULES = ("gauss-seidel", "jacobi")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 50
    tol_energy: float = 1e-7
    tol_grad: float = 1e-6
    schedule: str = "gauss-seidel"
    mu: float = 1e-9
    ground_labels: tuple = ()
    z_max: float = 1e4

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not self.tol_energy > 0:
            raise ValueError("tol_energy must be > 0")
        if self.tol_grad < 0:
            raise ValueError("tol_grad must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if not self.z_max > 0:
            raise ValueError("z_max must be > 0")
        object.__setattr__(self, "ground_labels", tuple(self.ground_labels))


def ground_cells(sem: SemanticMap, part: VoronoiPartition, ground_labels: Sequence[str]) -> np.ndarray:
    """Cells where more than half of the pixels have a ground label as argmax."""
    idx = [i for i, name in enumerate(sem.label_names) if name in set(ground_labels)]
    if not idx:
        return np.zeros(part.n_seeds, dtype=bool)
    is_ground = np.isin(sem.argmax(), idx).ravel()
    lab = part.nearest_seed.ravel()
    hits = np.bincount(lab, weights=is_ground.astype(np.float64), minlength=part.n_seeds)
    return hits > 0.5 * part.cell_sizes()


def initialize(
    samples: DepthSamples,
    graph: CellGraph,
    sem: Optional[SemanticMap],
    part: VoronoiPartition,
    cfg: SolverConfig,
    moments: Optional[CellMoments] = None,
    p: Optional[EnergyParams] = None,
) -> SolverState:
    """Fronto-parallel planes at each measurement, no outliers, all pairs coplanar.

    With semantics and ground labels, ground-dominated cells take the
    v'-slope of a scene-wide ground line fitted to their measurements.
    """
    S = len(samples)
    inv = samples.inverse_depth
    planes = np.zeros((S, 3))
    planes[:, 2] = inv
    if sem is not None and cfg.ground_labels:
        g = ground_cells(sem, part, cfg.ground_labels)
        _, vn = samples.normalized()
        if g.sum() >= 2 and len(np.unique(vn[g])) >= 2:
            X = np.stack([vn[g], np.ones(int(g.sum()))], axis=1)
            (beta, _gamma), *_ = np.linalg.lstsq(X, inv[g], rcond=None)
            planes[g, 1] = beta
            planes[g, 2] = inv[g] - beta * vn[g]
            logger.debug("ground init on %d cells, slope %.6g", int(g.sum()), beta)
    coplanar = np.ones(graph.n_pairs, dtype=bool)
    state = SolverState(
        planes,
        np.zeros(S, dtype=bool),
        coplanar,
        outlier_residuals(planes, coplanar, graph, samples),
    )
    if moments is not None and p is not None:
        state.energy = total_energy(state, graph, moments, samples, p)
    return state


# ---------------------------------------------------------------- flag updates


def update_coplanarity(state: SolverState, graph: CellGraph, moments: CellMoments, p: EnergyParams) -> SolverState:
    """c_{n,m} = 1 iff the quadratic disagreement does not exceed |V_n| * lambda_c."""
    new = state.copy()
    if graph.n_pairs:
        d = state.planes[graph.src] - state.planes[graph.dst]
        quad = p.w_c * moment_quadratic(d, moments.M[graph.src])
        new.coplanar = quad <= moments.count[graph.src] * p.lambda_c
    new.energy = float("nan")
    return new


def update_outliers(state: SolverState, graph: CellGraph, samples: DepthSamples, p: EnergyParams) -> SolverState:
    """Refresh the deviations and pick the cheaper outlier flag per measurement (ties keep 0)."""
    new = state.copy()
    new.residual = outlier_residuals(state.planes, state.coplanar, graph, samples)
    e0, e1 = outlier_energies(new.residual, p)
    res = np.einsum("ni,ni->n", state.planes, design_vectors(samples)) - samples.inverse_depth
    new.outlier = e1 < p.w_una * res * res + e0
    new.energy = float("nan")
    return new


# ---------------------------------------------------------------- plane solves


def _coupling(state: SolverState, graph: CellGraph, moments: CellMoments, p: EnergyParams) -> np.ndarray:
    """Per-pair 3x3 coupling w_c * w_k * M_src, zeroed where the pair is not coplanar."""
    if graph.n_pairs == 0:
        return np.zeros((0, 3, 3))
    scale = np.where(state.coplanar, p.w_c * graph.weight, 0.0)
    return scale[:, None, None] * moments.M[graph.src]


def _unary_system(state: SolverState, samples: DepthSamples, p: EnergyParams):
    x = design_vectors(samples)
    on = np.where(state.outlier, 0.0, p.w_una)
    A = on[:, None, None] * np.einsum("ni,nj->nij", x, x)
    b = (on * samples.inverse_depth)[:, None] * x
    return A, b


def plane_system(n, state, graph, moments, samples, p, cfg) -> tuple[np.ndarray, np.ndarray]:
    """Normal equations A theta = b for plane n with everything else held fixed."""
    x = design_vectors(samples)[n]
    A = cfg.mu * np.eye(3)
    b = cfg.mu * state.planes[n].copy()
    if not state.outlier[n]:
        A += p.w_una * np.outer(x, x)
        b += p.w_una * (1.0 / samples.z[n]) * x
    for k in np.flatnonzero((graph.src == n) | (graph.dst == n)):
        if not state.coplanar[k]:
            continue
        K = p.w_c * graph.weight[k] * moments.M[graph.src[k]]
        other = graph.dst[k] if graph.src[k] == n else graph.src[k]
        A += K
        b += K @ state.planes[other]
    return A, b


def _step(A, b, theta):
    """Solve A x = b as theta + A^-1 (b - A theta).

    With a tiny anchor A is badly conditioned along directions no data
    constrains; solving for the step keeps those directions at theta.
    """
    r = b - np.einsum("...ij,...j->...i", A, theta)
    return theta + np.linalg.solve(A, r[..., None])[..., 0]


def solve_plane(n, state, graph, moments, samples, p, cfg) -> Plane:
    A, b = plane_system(n, state, graph, moments, samples, p, cfg)
    return Plane(*_step(A, b, state.planes[n]).tolist())


def _normal_equations(state, graph, moments, samples, p, cfg, K=None):
    """Stacked (S, 3, 3) matrices and (S, 3) right-hand sides with neighbours frozen.

    The Tikhonov anchor is not included.
    """
    if K is None:
        K = _coupling(state, graph, moments, p)
    A, b = _unary_system(state, samples, p)
    if graph.n_pairs:
        np.add.at(A, graph.src, K)
        np.add.at(A, graph.dst, K)
        np.add.at(b, graph.src, np.einsum("kij,kj->ki", K, state.planes[graph.dst]))
        np.add.at(b, graph.dst, np.einsum("kij,kj->ki", K, state.planes[graph.src]))
    return A, b


def energy_gradient(state, graph, moments, samples, p, cfg) -> np.ndarray:
    """(S, 3) gradient of the flag-fixed energy with respect to every plane."""
    A, b = _normal_equations(state, graph, moments, samples, p, cfg)
    return 2.0 * (np.einsum("nij,nj->ni", A, state.planes) - b)


def plane_sweep(state: SolverState, graph: CellGraph, moments: CellMoments, samples: DepthSamples, p: EnergyParams, cfg: SolverConfig) -> SolverState:
    """One pass of plane solves under the configured schedule."""
    new = state.copy()
    new.prev_planes = state.planes.copy()
    S = len(samples)
    K = _coupling(state, graph, moments, p)
    if cfg.schedule == "jacobi":
        A, b = _normal_equations(state, graph, moments, samples, p, cfg, K)
        A = A + cfg.mu * np.eye(3)
        b = b + cfg.mu * state.planes
        new.planes = _step(A, b, state.planes)
    else:
        A, b_una = _unary_system(state, samples, p)
        A = A + cfg.mu * np.eye(3)
        if graph.n_pairs:
            np.add.at(A, graph.src, K)
            np.add.at(A, graph.dst, K)
        planes = new.planes
        inc = _incidence(graph, state.coplanar, S)
        for n in range(S):
            ks, others = inc[n]
            rhs = b_una[n] + cfg.mu * planes[n]
            if len(ks):
                rhs = rhs + np.einsum("kij,kj->i", K[ks], planes[others])
            planes[n] = _step(A[n], rhs, planes[n])
    new.energy = float("nan")
    return new


def _incidence(graph: CellGraph, coplanar: np.ndarray, S: int) -> list:
    """For each seed, the active pairs touching it and the seed at the other end."""
    k = np.flatnonzero(coplanar)
    ends = np.concatenate([graph.src[k], graph.dst[k]])
    other = np.concatenate([graph.dst[k], graph.src[k]])
    ks = np.concatenate([k, k])
    order = np.lexsort((ks, ends))
    ends, other, ks = ends[order], other[order], ks[order]
    bounds = np.searchsorted(ends, np.arange(S + 1))
    return [(ks[bounds[i] : bounds[i + 1]], other[bounds[i] : bounds[i + 1]]) for i in range(S)]


def augmented_energy(state: SolverState, graph, moments, samples, p, cfg) -> float:
    """Total energy plus the Tikhonov anchor relative to ``state.prev_planes``."""
    e = total_energy(state, graph, moments, samples, p)
    if state.prev_planes is not None:
        e += cfg.mu * float(np.sum((state.planes - state.prev_planes) ** 2))
    return e


def optimize(
    state: SolverState,
    graph: CellGraph,
    moments: CellMoments,
    samples: DepthSamples,
    p: EnergyParams,
    cfg: SolverConfig,
) -> SolverState:
    """Alternate coplanarity, outlier and plane updates until the energy stalls.

    ``trace`` collects ``(iteration, stage, energy, augmented_energy)`` rows.
    The ``residuals`` stage marks the refresh of the outlier deviations that
    precedes the outlier flag choice; it is not a minimisation step.
    """
    st = state.copy()
    st.energy = total_energy(st, graph, moments, samples, p)
    st.trace = [(0, "init", st.energy, st.energy)]
    for it in range(1, cfg.max_iters + 1):
        start = st.energy
        st = update_coplanarity(st, graph, moments, p)
        _record(st, it, "coplanarity", graph, moments, samples, p, cfg, anchor=False)
        gain = start - st.energy

        refreshed = st.copy()
        refreshed.residual = outlier_residuals(st.planes, st.coplanar, graph, samples)
        _record(refreshed, it, "residuals", graph, moments, samples, p, cfg, anchor=False)
        st = update_outliers(refreshed, graph, samples, p)
        st.trace = refreshed.trace
        _record(st, it, "outliers", graph, moments, samples, p, cfg, anchor=False)
        gain += refreshed.energy - st.energy

        before = st.energy
        st = plane_sweep(st, graph, moments, samples, p, cfg)
        _record(st, it, "planes", graph, moments, samples, p, cfg, anchor=True)
        gain += before - st.energy

        # progress made by the minimisation blocks; the residual refresh is excluded
        rel = gain / max(abs(st.energy), 1e-300)
        grad = float(np.abs(energy_gradient(st, graph, moments, samples, p, cfg)).max(initial=0.0))
        logger.debug("iter %d energy %.12g rel %.3g grad %.3g", it, st.energy, rel, grad)
        if rel < cfg.tol_energy and grad <= cfg.tol_grad * (1.0 + abs(st.energy)):
            break
    return st


def _record(st, it, stage, graph, moments, samples, p, cfg, anchor: bool) -> None:
    st.energy = total_energy(st, graph, moments, samples, p)
    aug = st.energy
    if anchor and st.prev_planes is not None:
        aug += cfg.mu * float(np.sum((st.planes - st.prev_planes) ** 2))
    st.trace.append((it, stage, st.energy, aug))


def iteration_count(state: SolverState) -> int:
    return max((row[0] for row in state.trace), default=0)


def render(state: SolverState, part: VoronoiPartition, cfg: SolverConfig) -> DenseDepthMap:
    """Evaluate each pixel's cell plane; values below 1/z_max are clamped and marked invalid."""
    un, vn = part.dims.normalized_grid()
    pl = state.planes[part.nearest_seed]
    inv = pl[..., 0] * un + pl[..., 1] * vn + pl[..., 2]
    floor = 1.0 / cfg.z_max
    valid = inv >= floor
    inv = np.where(valid, inv, floor)
    return DenseDepthMap(inv, valid, {"iterations": iteration_count(state), "energy": state.energy})


def with_schedule(cfg: SolverConfig, schedule: str) -> SolverConfig:
    return replace(cfg, schedule=schedule)
