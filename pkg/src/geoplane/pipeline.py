"""End-to-end densification: step costs, Voronoi cells, cell graph, solve, render."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional

from .energy import CellMoments, EnergyParams, SolverState, cell_moments
from .geodesic import (
    CellGraph,
    GeodesicWeights,
    StepCostField,
    VoronoiPartition,
    build_cell_graph,
    voronoi_partition,
)
from .scene_io import DenseDepthMap, DepthSamples, EdgeMap, SemanticMap
from .solver import SolverConfig, initialize, optimize, render

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphParams:
    N: int = 10
    D_max: float = 1.5
    eps: float = 1e-3

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.D_max > 0:
            raise ValueError("D_max must be > 0")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")


@dataclass
class UpsampleResult:
    field: StepCostField
    partition: VoronoiPartition
    graph: CellGraph
    moments: CellMoments
    initial: SolverState
    state: SolverState
    depth: DenseDepthMap
    timings: dict


def upsample(
    samples: DepthSamples,
    edges: EdgeMap,
    sem: Optional[SemanticMap] = None,
    gw: GeodesicWeights = GeodesicWeights(),
    graph_params: GraphParams = GraphParams(),
    energy_params: EnergyParams = EnergyParams(),
    cfg: SolverConfig = SolverConfig(),
) -> UpsampleResult:
    t = {}
    t0 = time.perf_counter()
    field = StepCostField.from_maps(edges, sem, gw)
    t["step_costs"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    part = voronoi_partition(field, samples)
    t["voronoi"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    graph = build_cell_graph(part, field, graph_params.N, graph_params.D_max, graph_params.eps)
    moments = cell_moments(part)
    t["cell_graph"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    init = initialize(samples, graph, sem, part, cfg, moments, energy_params)
    state = optimize(init, graph, moments, samples, energy_params, cfg)
    t["optimize"] = time.perf_counter() - t0

    depth = render(state, part, cfg)
    logger.info(
        "upsampled %d samples: %d pairs, %d outliers, energy %.6g",
        len(samples), graph.n_pairs, int(state.outlier.sum()), state.energy,
    )
    return UpsampleResult(field, part, graph, moments, init, state, depth, t)
