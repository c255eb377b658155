"""Edge- and label-aware geodesic Voronoi partition and the pruned cell graph.

Pixel-to-pixel steps follow 8-connectivity. A step cost mixes the mean edge
score of both endpoints, a label-agreement term and a constant length term,
so shortest paths can be found exactly with Dijkstra.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene_io import DepthSamples, EdgeMap, GridDims, SemanticMap, write_pgm

# (du, dv) for the four "forward" neighbours; the other four are their reverses.
DIRECTIONS = ((1, 0), (0, 1), (1, 1), (-1, 1))
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class GeodesicWeights:
    w_I: float = 20.0
    w_S: float = 20.0
    w_D: float = 1.0

    def __post_init__(self):
        if self.w_I < 0 or self.w_S < 0:
            raise ValueError("w_I and w_S must be >= 0")
        if not self.w_D > 0:
            raise ValueError("w_D must be > 0")


def _semantic_disagreement(pp: np.ndarray, pq: np.ndarray) -> np.ndarray:
    """1 - max_l sqrt(P_l(p) P_l(q)) along the label axis (axis 0)."""
    return 1.0 - np.sqrt(pp * pq).max(axis=0)


def step_cost(p, q, edges: EdgeMap, sem: Optional[SemanticMap], gw: GeodesicWeights) -> float:
    """Cost of the single 8-connected step between pixels ``p`` and ``q`` ((u, v) pairs)."""
    du, dv = q[0] - p[0], q[1] - p[1]
    if max(abs(du), abs(dv)) != 1:
        raise ValueError(f"pixels {tuple(p)} and {tuple(q)} are not 8-neighbours")
    length = SQRT2 if du and dv else 1.0
    e = edges.scores
    num = gw.w_I * (e[p[1], p[0]] + e[q[1], q[0]]) / 2.0 + gw.w_D
    den = gw.w_I + gw.w_D
    if sem is not None:
        s = _semantic_disagreement(sem.probs[:, p[1], p[0]], sem.probs[:, q[1], q[0]])
        num += gw.w_S * float(s)
        den += gw.w_S
    return float(length * num / den)


class StepCostField:
    """Symmetric per-step costs on the 8-connected grid.

    ``costs[k][v, u]`` is the cost of stepping from (u, v) to
    (u + du_k, v + dv_k) for the k-th entry of ``DIRECTIONS``; out-of-grid
    steps hold ``inf``.
    """

    def __init__(self, dims: GridDims, costs: np.ndarray):
        costs = np.asarray(costs, dtype=np.float64)
        if costs.shape != (4,) + dims.shape:
            raise ValueError("cost array must have shape (4, H, W)")
        self.dims = dims
        self.costs = costs
        self.costs.setflags(write=False)
        self._adjacency = None

    @classmethod
    def from_maps(cls, edges: EdgeMap, sem: Optional[SemanticMap], gw: GeodesicWeights) -> "StepCostField":
        dims = edges.dims
        if sem is not None and sem.dims != dims:
            raise ValueError("edge map and semantic map dimensions differ")
        h, w = dims.shape
        e = edges.scores
        costs = np.full((4, h, w), np.inf)
        for k, (du, dv) in enumerate(DIRECTIONS):
            ps, qs = _shifted_slices(du, dv, h, w)
            if ps is None:
                continue
            num = gw.w_I * (e[ps] + e[qs]) / 2.0 + gw.w_D
            den = gw.w_I + gw.w_D
            if sem is not None:
                num = num + gw.w_S * _semantic_disagreement(sem.probs[(slice(None),) + ps], sem.probs[(slice(None),) + qs])
                den += gw.w_S
            length = SQRT2 if du and dv else 1.0
            costs[k][ps] = length * num / den
        return cls(dims, costs)

    @classmethod
    def uniform(cls, dims: GridDims, axis_cost: float = 1.0) -> "StepCostField":
        h, w = dims.shape
        costs = np.full((4, h, w), np.inf)
        for k, (du, dv) in enumerate(DIRECTIONS):
            ps, _ = _shifted_slices(du, dv, h, w)
            if ps is not None:
                costs[k][ps] = axis_cost * (SQRT2 if du and dv else 1.0)
        return cls(dims, costs)

    def cost(self, p, q) -> float:
        du, dv = q[0] - p[0], q[1] - p[1]
        for k, (a, b) in enumerate(DIRECTIONS):
            if (du, dv) == (a, b):
                return float(self.costs[k, p[1], p[0]])
            if (du, dv) == (-a, -b):
                return float(self.costs[k, q[1], q[0]])
        raise ValueError(f"pixels {tuple(p)} and {tuple(q)} are not 8-neighbours")

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All unordered neighbour pairs as flat indices (p, q) with their cost."""
        h, w = self.dims.shape
        idx = np.arange(h * w).reshape(h, w)
        ps_all, qs_all, cs_all = [], [], []
        for k, (du, dv) in enumerate(DIRECTIONS):
            ps, qs = _shifted_slices(du, dv, h, w)
            if ps is None:
                continue
            ps_all.append(idx[ps].ravel())
            qs_all.append(idx[qs].ravel())
            cs_all.append(self.costs[k][ps].ravel())
        if not ps_all:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        return np.concatenate(ps_all), np.concatenate(qs_all), np.concatenate(cs_all)

    def adjacency(self) -> list:
        """Per-pixel lists of (neighbour, cost), cached."""
        if self._adjacency is None:
            p, q, c = self.edge_list()
            src = np.concatenate([p, q])
            dst = np.concatenate([q, p])
            cost = np.concatenate([c, c])
            order = np.argsort(src, kind="stable")
            src, dst, cost = src[order], dst[order], cost[order]
            bounds = np.searchsorted(src, np.arange(self.dims.size + 1))
            pairs = list(zip(dst.tolist(), cost.tolist()))
            self._adjacency = [pairs[bounds[i] : bounds[i + 1]] for i in range(self.dims.size)]
        return self._adjacency


def _shifted_slices(du: int, dv: int, h: int, w: int):
    """Slices selecting p and q = p + (du, dv) where both lie on the grid."""
    if abs(du) >= w or abs(dv) >= h:
        return None, None
    if du >= 0:
        pu, qu = slice(0, w - du), slice(du, w)
    else:
        pu, qu = slice(-du, w), slice(0, w + du)
    pv, qv = slice(0, h - dv), slice(dv, h)
    return (pv, pu), (qv, qu)


@dataclass(frozen=True)
class VoronoiPartition:
    dims: GridDims
    nearest_seed: np.ndarray  # (H, W) int
    seed_dist: np.ndarray  # (H, W) float
    seed_pixels: np.ndarray  # (S,) flat pixel index of each seed

    @property
    def n_seeds(self) -> int:
        return len(self.seed_pixels)

    def cell_sizes(self) -> np.ndarray:
        return np.bincount(self.nearest_seed.ravel(), minlength=self.n_seeds)

    def cell_pixels(self, n: int) -> np.ndarray:
        return np.flatnonzero(self.nearest_seed.ravel() == n)


def voronoi_partition(field: StepCostField, seeds: DepthSamples) -> VoronoiPartition:
    """Multi-source Dijkstra; equal distances go to the lower seed id."""
    if len(seeds) == 0:
        raise ValueError("voronoi_partition needs at least one seed")
    dims = field.dims
    if seeds.dims != dims:
        raise ValueError("seed grid does not match cost field grid")
    adj = field.adjacency()
    n_pix = dims.size
    dist = [math.inf] * n_pix
    label = [-1] * n_pix
    seed_pix = seeds.flat_index.tolist()
    heap = []
    for sid, pix in enumerate(seed_pix):
        dist[pix] = 0.0
        label[pix] = sid
        heap.append((0.0, sid, pix))
    heapq.heapify(heap)
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        d, s, p = pop(heap)
        if d != dist[p] or s != label[p]:
            continue
        for q, c in adj[p]:
            nd = d + c
            dq = dist[q]
            if nd < dq or (nd == dq and s < label[q]):
                dist[q] = nd
                label[q] = s
                push(heap, (nd, s, q))
    nearest = np.array(label, dtype=np.int64).reshape(dims.shape)
    sdist = np.array(dist, dtype=np.float64).reshape(dims.shape)
    for a in (nearest, sdist):
        a.setflags(write=False)
    return VoronoiPartition(dims, nearest, sdist, np.asarray(seed_pix, dtype=np.int64))


@dataclass(frozen=True)
class CellGraph:
    """Pruned seed graph stored as ordered pairs grouped by source seed.

    Pair k links ``src[k] -> dst[k]`` with approximated distance ``dist[k]``
    and pairwise weight ``weight[k]``. Pairs of seed n occupy
    ``indptr[n]:indptr[n + 1]``, sorted by ascending distance.
    """

    n_seeds: int
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    weight: np.ndarray
    indptr: np.ndarray
    N: int
    D_max: float
    eps: float
    boundary: dict  # (n, m) with n < m -> boundary weight B(n, m)

    @property
    def n_pairs(self) -> int:
        return len(self.src)

    def neighbors(self, n: int) -> list[tuple[int, float, float]]:
        sl = slice(self.indptr[n], self.indptr[n + 1])
        return list(zip(self.dst[sl].tolist(), self.dist[sl].tolist(), self.weight[sl].tolist()))

    def distance(self, n: int, m: int) -> Optional[float]:
        sl = slice(self.indptr[n], self.indptr[n + 1])
        hit = np.flatnonzero(self.dst[sl] == m)
        return float(self.dist[sl][hit[0]]) if len(hit) else None

    def incoming(self) -> list[np.ndarray]:
        """For each seed, the pair indices k with ``dst[k] == seed``."""
        order = np.argsort(self.dst, kind="stable")
        bounds = np.searchsorted(self.dst[order], np.arange(self.n_seeds + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.n_seeds)]


def distance_weight(d, D_max: float, eps: float):
    """-log of the distance normalised by ``D_max`` and clamped to [eps, 1]."""
    return -np.log(np.clip(np.asarray(d, dtype=np.float64) / D_max, eps, 1.0))


def boundary_weights(part: VoronoiPartition, field: StepCostField) -> dict:
    """B(n, m): cheapest seed-to-seed path that crosses straight from cell n into cell m."""
    p, q, c = field.edge_list()
    lab = part.nearest_seed.ravel()
    dist = part.seed_dist.ravel()
    n, m = lab[p], lab[q]
    cross = n != m
    if not np.any(cross):
        return {}
    val = dist[p[cross]] + c[cross] + dist[q[cross]]
    lo = np.minimum(n[cross], m[cross])
    hi = np.maximum(n[cross], m[cross])
    order = np.lexsort((val, hi, lo))
    lo, hi, val = lo[order], hi[order], val[order]
    first = np.ones(len(lo), dtype=bool)
    first[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
    return {(int(a), int(b)): float(x) for a, b, x in zip(lo[first], hi[first], val[first])}


def _seed_graph_dijkstra(adj: list, source: int, limit: float) -> dict:
    dist = {source: 0.0}
    done = set()
    heap = [(0.0, source)]
    while heap:
        d, n = heapq.heappop(heap)
        if n in done:
            continue
        done.add(n)
        for m, b in adj[n]:
            nd = d + b
            if nd < limit and nd < dist.get(m, math.inf):
                dist[m] = nd
                heapq.heappush(heap, (nd, m))
    del dist[source]
    return dist


def build_cell_graph(
    part: VoronoiPartition,
    field: StepCostField,
    N: int = 10,
    D_max: float = 1.5,
    eps: float = 1e-3,
) -> CellGraph:
    """Seed-restricted geodesic distances between cells, pruned to N neighbours below D_max."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not D_max > 0:
        raise ValueError("D_max must be > 0")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    S = part.n_seeds
    bound = boundary_weights(part, field)
    adj: list[list] = [[] for _ in range(S)]
    for (a, b), x in sorted(bound.items()):
        adj[a].append((b, x))
        adj[b].append((a, x))

    reach = [_seed_graph_dijkstra(adj, n, D_max) for n in range(S)]
    # Sums along a path differ by rounding in the two directions; keep the smaller.
    for n in range(S):
        for m, d in reach[n].items():
            if m > n:
                other = reach[m].get(n, math.inf)
                sym = min(d, other)
                reach[n][m] = sym
                reach[m][n] = sym

    src, dst, dd = [], [], []
    indptr = [0]
    for n in range(S):
        items = sorted(reach[n].items(), key=lambda kv: (kv[1], kv[0]))[:N]
        for m, d in items:
            src.append(n)
            dst.append(m)
            dd.append(d)
        indptr.append(len(src))
    dd_arr = np.asarray(dd, dtype=np.float64)
    weight = distance_weight(dd_arr, D_max, eps) if len(dd_arr) else np.zeros(0)
    arrays = [np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), dd_arr, weight]
    for a in arrays:
        a.setflags(write=False)
    return CellGraph(
        S, *arrays, np.asarray(indptr, dtype=np.int64), int(N), float(D_max), float(eps), bound
    )


def write_debug_dumps(part: VoronoiPartition, graph: CellGraph, out_dir) -> None:
    """voronoi.pgm (seed id mod 256) and celldist.csv rows ``n,m,dist,weight``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "voronoi.pgm", (part.nearest_seed % 256).astype(np.uint8))
    with open(out / "celldist.csv", "w") as fh:
        fh.write("n,m,dist,weight\n")
        for n, m, d, w in zip(graph.src, graph.dst, graph.dist, graph.weight):
            fh.write(f"{int(n)},{int(m)},{float(d)!r},{float(w)!r}\n")
