"""Samplers, error metrics, simple baselines, synthetic scenes and the geodesic oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .energy import Plane
from .geodesic import StepCostField
from .scene_io import (
    DenseDepthMap,
    DepthSamples,
    EdgeMap,
    FormatError,
    GridDims,
    SemanticMap,
    write_pfm,
    write_pgm,
    write_samples,
    write_semantic_map,
)

UNITS = ("depth", "inverse-depth", "disparity")
ORACLE_MAX_SIDE = 64


# ---------------------------------------------------------------- sampling


def stride_sample(gt: np.ndarray, stride: int, offset: int = 0, units: str = "depth") -> DepthSamples:
    """Samples on the lattice u, v = offset (mod stride) wherever ``gt`` is finite and positive.

    ``units`` names what ``gt`` holds; inverse depth and disparity are inverted
    so the returned samples always carry depth.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0 <= offset < stride:
        raise ValueError("offset must satisfy 0 <= offset < stride")
    gt = np.asarray(gt, dtype=np.float64)
    dims = GridDims(gt.shape[1], gt.shape[0])
    vv, uu = np.meshgrid(np.arange(offset, dims.height, stride), np.arange(offset, dims.width, stride), indexing="ij")
    u, v = uu.ravel(), vv.ravel()
    vals = gt[v, u]
    ok = np.isfinite(vals) & (vals > 0)
    if not np.any(ok):
        raise ValueError("no valid ground-truth pixel on the sampling lattice")
    # row-major order: ids increase along rows, then down the image
    order = np.lexsort((u[ok], v[ok]))
    u, v, vals = u[ok][order], v[ok][order], vals[ok][order]
    z = vals if units == "depth" else 1.0 / vals
    return DepthSamples(u, v, z, dims)


def decimate_scanlines(samples: DepthSamples, keep_rows: int = 1, keep_cols: int = 1) -> DepthSamples:
    """Keep every ``keep_rows``-th distinct row and, within kept rows, every ``keep_cols``-th distinct column."""
    if keep_rows < 1 or keep_cols < 1:
        raise ValueError("decimation factors must be >= 1")
    rows = np.unique(samples.v)
    kept_rows = rows[::keep_rows]
    keep = np.isin(samples.v, kept_rows)
    cols = np.unique(samples.u[keep])
    keep &= np.isin(samples.u, cols[::keep_cols])
    return samples.subset(np.flatnonzero(keep))


# ---------------------------------------------------------------- metrics


def to_unit(inverse_depth: np.ndarray, unit: str) -> np.ndarray:
    """Express an inverse-depth map in ``unit``; disparity is numerically inverse depth here."""
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r}")
    return 1.0 / inverse_depth if unit == "depth" else inverse_depth


def mae(pred: DenseDepthMap, gt: np.ndarray, mask: Optional[np.ndarray] = None, unit: str = "inverse-depth") -> dict:
    """Mean absolute and RMS error of ``pred`` against ``gt`` (already in ``unit``)."""
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pred.inverse_depth.shape:
        raise ValueError("prediction and ground truth shapes differ")
    dom = pred.valid & np.isfinite(gt)
    if mask is not None:
        dom &= np.asarray(mask, dtype=bool)
    n = int(dom.sum())
    if n == 0:
        raise ValueError("empty evaluation domain")
    err = to_unit(pred.inverse_depth, unit)[dom] - gt[dom]
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "unit": unit,
        "n_pixels": n,
    }


# ---------------------------------------------------------------- baselines


def baseline_nearest(samples: DepthSamples, dims: GridDims) -> DenseDepthMap:
    """Depth of the Euclidean-nearest sample; equal distances go to the lower id."""
    from scipy.spatial import cKDTree

    if len(samples) == 0:
        raise ValueError("need at least one sample")
    pts = np.stack([samples.u, samples.v], axis=1).astype(np.float64)
    vv, uu = np.mgrid[0 : dims.height, 0 : dims.width]
    q = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    k = min(len(samples), 16)
    tree = cKDTree(pts)
    _, idx = tree.query(q, k=k)
    idx = idx.reshape(len(q), k)
    # squared distances are integers, so ties compare exactly
    d2 = ((pts[idx] - q[:, None, :]) ** 2).sum(axis=2)
    best = d2.min(axis=1, keepdims=True)
    cand = np.where(d2 == best, idx, np.iinfo(np.int64).max)
    choice = cand.min(axis=1)
    crowded = np.all(d2 == best, axis=1) & (k < len(samples))
    for i in np.flatnonzero(crowded):
        full = ((pts - q[i]) ** 2).sum(axis=1)
        choice[i] = int(np.flatnonzero(full == full.min())[0])
    z = samples.z[choice].reshape(dims.shape)
    return DenseDepthMap(1.0 / z, np.ones(dims.shape, dtype=bool), {"method": "nearest"})


def baseline_bilinear(samples: DepthSamples, dims: GridDims, stride: int, unit: str = "depth") -> DenseDepthMap:
    """Bilinear interpolation over a complete stride lattice, clamped to the lattice hull.

    ``unit`` selects the quantity interpolated: depth or inverse depth.
    """
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    u0, v0 = int(samples.u.min()), int(samples.v.min())
    cols = np.arange(u0, dims.width, stride)
    rows = np.arange(v0, dims.height, stride)
    grid = np.full((len(rows), len(cols)), np.nan)
    du, dv = samples.u - u0, samples.v - v0
    if np.any(du % stride) or np.any(dv % stride):
        raise ValueError("samples are not on a single stride lattice")
    vals = samples.z if unit == "depth" else 1.0 / samples.z
    grid[dv // stride, du // stride] = vals
    if np.isnan(grid).any() or len(samples) != grid.size:
        raise ValueError("incomplete lattice")

    def axis_weights(coord, origin, n):
        t = np.clip((coord - origin) / stride, 0, n - 1)
        i0 = np.minimum(np.floor(t).astype(np.int64), max(n - 2, 0))
        return i0, np.minimum(i0 + 1, n - 1), t - i0

    i0, i1, tx = axis_weights(np.arange(dims.width, dtype=np.float64), u0, len(cols))
    j0, j1, ty = axis_weights(np.arange(dims.height, dtype=np.float64), v0, len(rows))
    top = grid[j0][:, i0] * (1 - tx) + grid[j0][:, i1] * tx
    bot = grid[j1][:, i0] * (1 - tx) + grid[j1][:, i1] * tx
    out = top * (1 - ty)[:, None] + bot * ty[:, None]
    inv = 1.0 / out if unit == "depth" else out
    return DenseDepthMap(inv, np.ones(dims.shape, dtype=bool), {"method": "bilinear", "unit": unit})


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class Region:
    name: str
    plane: Plane
    polygon: Optional[tuple] = None  # ((u, v), ...) in pixel units; None covers the grid


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    regions: tuple
    stride: int = 16
    offset: int = 0
    noise: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 0.0
    seed: int = 0


@dataclass
class SyntheticScene:
    dims: GridDims
    regions: tuple
    region_map: np.ndarray  # (H, W) region index
    gt_inverse_depth: np.ndarray
    edges: EdgeMap
    semantics: SemanticMap
    samples: DepthSamples
    outlier_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def points_in_polygon(x: np.ndarray, y: np.ndarray, polygon) -> np.ndarray:
    """Even-odd rule containment of points (x, y) in a closed polygon."""
    poly = np.asarray(polygon, dtype=np.float64)
    inside = np.zeros(np.shape(x), dtype=bool)
    j = len(poly) - 1
    for i in range(len(poly)):
        xi, yi = poly[i]
        xj, yj = poly[j]
        straddle = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = (xj - xi) * (y - yi) / (yj - yi) + xi
        inside ^= straddle & (x < xc)
        j = i
    return inside


def region_edges(region_map: np.ndarray) -> np.ndarray:
    """1 on pixels with a 4-neighbour in another region, else 0."""
    e = np.zeros(region_map.shape, dtype=bool)
    dh = region_map[:, 1:] != region_map[:, :-1]
    dv = region_map[1:, :] != region_map[:-1, :]
    e[:, 1:] |= dh
    e[:, :-1] |= dh
    e[1:, :] |= dv
    e[:-1, :] |= dv
    return e.astype(np.float64)


def make_scene(spec: SceneSpec) -> SyntheticScene:
    """Piecewise-planar scene with aligned edges, one-hot labels and stride samples.

    Noise is Gaussian in inverse depth. Outliers are a fixed-size random
    subset displaced by a random sign times U[magnitude, 2 * magnitude].
    """
    dims = GridDims(spec.width, spec.height)
    vv, uu = np.mgrid[0 : dims.height, 0 : dims.width]
    region_map = np.full(dims.shape, -1, dtype=np.int64)
    for i, reg in enumerate(spec.regions):
        if reg.polygon is None:
            region_map[:] = i
        else:
            region_map[points_in_polygon(uu, vv, reg.polygon)] = i
    if np.any(region_map < 0):
        raise ValueError("regions do not cover the grid")
    un, vn = dims.normalized_grid()
    gt = np.zeros(dims.shape)
    for i, reg in enumerate(spec.regions):
        sel = region_map == i
        vals = Plane(*reg.plane).at(un[sel], vn[sel])
        if np.any(vals <= 0):
            raise ValueError(f"plane of region {reg.name!r} is not positive over its region")
        gt[sel] = vals
    labels = tuple(r.name for r in spec.regions)
    onehot = np.stack([(region_map == i).astype(np.float64) for i in range(len(labels))])
    sem = SemanticMap(labels, onehot)
    edges = EdgeMap(region_edges(region_map))

    base = stride_sample(gt, spec.stride, spec.offset, units="inverse-depth")
    rng = np.random.default_rng(spec.seed)
    inv = 1.0 / base.z
    if spec.noise > 0:
        inv = inv + rng.normal(0.0, spec.noise, size=len(inv))
    n_out = int(round(spec.outlier_fraction * len(inv)))
    ids = np.sort(rng.choice(len(inv), size=n_out, replace=False)) if n_out else np.zeros(0, dtype=np.int64)
    if n_out:
        sign = rng.choice([-1.0, 1.0], size=n_out)
        mag = rng.uniform(spec.outlier_magnitude, 2.0 * spec.outlier_magnitude, size=n_out)
        down = inv[ids] - mag
        inv[ids] = np.where((sign < 0) & (down > 0), down, inv[ids] + mag)
    if np.any(inv <= 0):
        raise ValueError("noise drove a sample to non-positive inverse depth")
    samples = DepthSamples(base.u, base.v, 1.0 / inv, dims)
    return SyntheticScene(dims, tuple(spec.regions), region_map, gt, edges, sem, samples, ids.astype(np.int64))


def parse_scene_spec(text: str, source: str = "<scene>") -> SceneSpec:
    """Plain ``key = value`` scene description.

    ``region = name | a b c`` covers the grid; ``region = name | a b c | u v, u v, ...``
    covers a polygon. Later regions paint over earlier ones.
    """
    scalars: dict = {}
    regions = []
    known = {"width": int, "height": int, "stride": int, "offset": int, "seed": int,
             "noise": float, "outlier_fraction": float, "outlier_magnitude": float}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(source, f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "region":
                parts = [s.strip() for s in value.split("|")]
                plane = Plane(*(float(x) for x in parts[1].split()))
                poly = None
                if len(parts) > 2 and parts[2]:
                    poly = tuple(tuple(float(c) for c in pt.split()) for pt in parts[2].split(","))
                    if len(poly) < 3 or any(len(pt) != 2 for pt in poly):
                        raise ValueError("polygon needs >= 3 'u v' vertices")
                regions.append(Region(parts[0], plane, poly))
            elif key in known:
                scalars[key] = known[key](value)
            else:
                raise FormatError(source, f"line {lineno}", f"unknown key {key!r}")
        except (ValueError, IndexError, TypeError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(source, f"line {lineno}", f"bad value for {key!r}: {exc}") from None
    for key in ("width", "height"):
        if key not in scalars:
            raise FormatError(source, "end", f"missing key {key!r}")
    if not regions:
        raise FormatError(source, "end", "at least one region is required")
    return SceneSpec(regions=tuple(regions), **scalars)


def write_scene(scene: SyntheticScene, out_dir, spec: Optional[SceneSpec] = None) -> Path:
    """Write the scene files plus an ``upsample.cfg`` pointing at them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "gt_inverse_depth.pfm", scene.gt_inverse_depth)
    write_pgm(out / "edges.pgm", np.round(scene.edges.scores * 255).astype(np.uint8))
    write_semantic_map(out / "semantics.bin", scene.semantics)
    write_samples(out / "samples.csv", scene.samples)
    write_pgm(out / "regions.pgm", (scene.region_map % 256).astype(np.uint8))
    write_pgm(out / "mask.pgm", np.full(scene.dims.shape, 255, dtype=np.uint8))
    meta = {
        "width": scene.dims.width,
        "height": scene.dims.height,
        "n_samples": len(scene.samples),
        "outlier_ids": scene.outlier_ids.tolist(),
        "regions": [{"name": r.name, "plane": list(r.plane)} for r in scene.regions],
    }
    if spec is not None:
        meta["stride"] = spec.stride
    (out / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    (out / "upsample.cfg").write_text(
        "\n".join(
            [
                f"width = {scene.dims.width}",
                f"height = {scene.dims.height}",
                f'samples = "{(out / "samples.csv").resolve()}"',
                f'edges = "{(out / "edges.pgm").resolve()}"',
                f'semantics = "{(out / "semantics.bin").resolve()}"',
                f'gt = "{(out / "gt_inverse_depth.pfm").resolve()}"',
                "",
            ]
        )
    )
    return out


# ---------------------------------------------------------------- oracle


def oracle_geodesic(field: StepCostField, seeds: DepthSamples) -> np.ndarray:
    """Exact pairwise seed distances by full-grid Dijkstra from every seed.

    Returns an (S, S) matrix. Grids are capped at 64 x 64.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    dims = field.dims
    if dims.width > ORACLE_MAX_SIDE or dims.height > ORACLE_MAX_SIDE:
        raise ValueError(f"oracle grid limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE}")
    p, q, c = field.edge_list()
    graph = coo_matrix((c, (p, q)), shape=(dims.size, dims.size)).tocsr()
    full = dijkstra(graph, directed=False, indices=seeds.flat_index)
    return full[:, seeds.flat_index]


def oracle_voronoi(field: StepCostField, seeds: DepthSamples) -> tuple[np.ndarray, np.ndarray]:
    """Per-seed Dijkstra followed by argmin (lowest id on ties): labels and distances."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    dims = field.dims
    p, q, c = field.edge_list()
    graph = coo_matrix((c, (p, q)), shape=(dims.size, dims.size)).tocsr()
    full = np.atleast_2d(dijkstra(graph, directed=False, indices=seeds.flat_index))
    return full.argmin(axis=0).reshape(dims.shape), full.min(axis=0).reshape(dims.shape)
