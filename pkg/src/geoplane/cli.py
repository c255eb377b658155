"""Command-line front end: ``geoplane {upsample,eval,synth,oracle-geodesic,baseline}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import evaluate, scene_io
from .config import ConfigError, RunConfig, load_config
from .geodesic import StepCostField, build_cell_graph, voronoi_partition, write_debug_dumps
from .pipeline import upsample
from .scene_io import DenseDepthMap, EdgeMap, GridDims

logger = logging.getLogger("geoplane")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


def _grid_dims(cfg: RunConfig) -> GridDims:
    if cfg.width is not None and cfg.height is not None:
        return GridDims(cfg.width, cfg.height)
    for key in ("edges", "image", "gt"):
        path = cfg.values.get(key)
        if not path:
            continue
        if path.lower().endswith(".pfm"):
            arr = scene_io.read_pfm(path)
        else:
            arr = scene_io.read_gray8(path)
        return GridDims(arr.shape[1], arr.shape[0])
    if cfg.semantics:
        return scene_io.load_semantic_map(cfg.semantics).dims
    raise CliError("grid size unknown: set width/height or provide an edge map, image or gt")


def _require(cfg: RunConfig, key: str) -> str:
    value = cfg.values.get(key)
    if not value:
        raise CliError(f"missing input: {key}")
    if key != "out_dir" and not Path(value).exists():
        raise CliError(f"missing input: {key} = {value} does not exist")
    return value


def _load_inputs(cfg: RunConfig):
    dims = _grid_dims(cfg)
    samples = scene_io.load_samples(_require(cfg, "samples"), dims, cfg.units)
    sem = scene_io.load_semantic_map(_require(cfg, "semantics"), dims) if cfg.semantics else None
    if cfg.edges:
        edges = scene_io.load_edge_map(_require(cfg, "edges"), dims)
    elif cfg.image:
        img = scene_io.read_gray8(_require(cfg, "image"))
        if img.shape != dims.shape:
            raise CliError(f"image {cfg.image} does not match grid {dims.width}x{dims.height}")
        edges = scene_io.fallback_edges(img)
    else:
        edges = EdgeMap(np.zeros(dims.shape))
    return dims, samples, edges, sem


def _load_gt(path: str) -> np.ndarray:
    """Ground truth PFM, already expressed in the metric unit."""
    return scene_io.read_pfm(path).astype(np.float64)


def _load_mask(path: Optional[str], shape) -> Optional[np.ndarray]:
    if not path:
        return None
    m = scene_io.read_pgm(path)
    if m.shape != shape:
        raise CliError(f"mask {path} does not match the prediction size")
    return m > 0


def write_trace(state, path) -> None:
    with open(path, "w") as fh:
        fh.write("iter,stage,energy\n")
        for it, stage, energy, _aug in state.trace:
            fh.write(f"{it},{stage},{energy!r}\n")


def cmd_upsample(cfg: RunConfig) -> int:
    dims, samples, edges, sem = _load_inputs(cfg)
    res = upsample(
        samples, edges, sem, cfg.geodesic_weights, cfg.graph_params, cfg.energy_params, cfg.solver_config
    )
    out = Path(cfg.out_dir)
    stats = {
        "n_samples": len(samples),
        "n_pairs": res.graph.n_pairs,
        "n_outliers": int(res.state.outlier.sum()),
        "n_coplanar": int(res.state.coplanar.sum()),
        "schedule": cfg.schedule,
    }
    if cfg.gt:
        gt = _load_gt(_require(cfg, "gt"))
        stats["metrics"] = evaluate.mae(res.depth, gt, _load_mask(cfg.mask, dims.shape), cfg.metric_unit)
    scene_io.write_outputs(res.depth, out, stats)
    if cfg.trace:
        write_trace(res.state, out / "energy_trace.csv")
    if cfg.debug_dumps:
        write_debug_dumps(res.partition, res.graph, out)
    logger.info("wrote %s", out)
    return 0


def cmd_eval(args) -> int:
    pred_inv = scene_io.read_pfm(args.pred).astype(np.float64)
    valid = np.isfinite(pred_inv) & (pred_inv > 0)
    if args.validity:
        valid &= _load_mask(args.validity, pred_inv.shape)
    pred = DenseDepthMap(np.where(valid, pred_inv, 1.0), valid)
    gt = _load_gt(args.gt)
    if gt.shape != pred_inv.shape:
        raise CliError("prediction and ground truth sizes differ")
    metrics = evaluate.mae(pred, gt, _load_mask(args.mask, gt.shape), args.unit)
    text = json.dumps(metrics, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise CliError(f"missing input: {spec_path} does not exist")
    spec = evaluate.parse_scene_spec(spec_path.read_text(), str(spec_path))
    scene = evaluate.make_scene(spec)
    evaluate.write_scene(scene, args.out, spec)
    return 0


def cmd_oracle(cfg: RunConfig, out_csv: str) -> int:
    dims, samples, edges, sem = _load_inputs(cfg)
    field = StepCostField.from_maps(edges, sem, cfg.geodesic_weights)
    part = voronoi_partition(field, samples)
    gp = cfg.graph_params
    graph = build_cell_graph(part, field, gp.N, gp.D_max, gp.eps)
    exact = evaluate.oracle_geodesic(field, samples)
    with open(out_csv, "w") as fh:
        fh.write("n,m,approx,oracle\n")
        for n, m, d in zip(graph.src, graph.dst, graph.dist):
            fh.write(f"{int(n)},{int(m)},{float(d)!r},{float(exact[n, m])!r}\n")
    return 0


def cmd_baseline(cfg: RunConfig, method: str) -> int:
    dims = _grid_dims(cfg)
    samples = scene_io.load_samples(_require(cfg, "samples"), dims, cfg.units)
    if method == "nearest":
        dmap = evaluate.baseline_nearest(samples, dims)
    else:
        unit = "depth" if cfg.units == "depth" else "inverse-depth"
        dmap = evaluate.baseline_bilinear(samples, dims, cfg.stride, unit)
    stats = {"method": method}
    if cfg.gt:
        gt = _load_gt(_require(cfg, "gt"))
        stats["metrics"] = evaluate.mae(dmap, gt, _load_mask(cfg.mask, dims.shape), cfg.metric_unit)
    scene_io.write_outputs(dmap, cfg.out_dir, stats)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geoplane", description="Geodesic piecewise-planar depth densification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--samples")
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    up = sub.add_parser("upsample", help="densify sparse samples")
    config_args(up)
    up.add_argument("--edges")
    up.add_argument("--semantics")
    up.add_argument("--image")

    ev = sub.add_parser("eval", help="score a prediction against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mask")
    ev.add_argument("--validity")
    ev.add_argument("--unit", choices=evaluate.UNITS, default="inverse-depth", help="unit of --gt and of the metrics")
    ev.add_argument("--out")

    sy = sub.add_parser("synth", help="generate a synthetic scene directory")
    sy.add_argument("--spec", required=True)
    sy.add_argument("--out", required=True)

    og = sub.add_parser("oracle-geodesic", help="compare cell-graph distances with full-grid Dijkstra")
    og.add_argument("--config", required=True)
    og.add_argument("--samples")
    og.add_argument("--edges")
    og.add_argument("--semantics")
    og.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    og.add_argument("--out", dest="csv", required=True)

    bl = sub.add_parser("baseline", help="nearest or bilinear baseline")
    config_args(bl)
    bl.add_argument("--method", choices=("nearest", "bilinear"), required=True)
    bl.add_argument("--stride", type=int)
    return parser


def _run_config(args, keys) -> RunConfig:
    overrides = list(args.set)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "upsample":
        return cmd_upsample(_run_config(args, ("samples", "edges", "semantics", "image", "out_dir")))
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "oracle-geodesic":
        return cmd_oracle(_run_config(args, ("samples", "edges", "semantics")), args.csv)
    return cmd_baseline(_run_config(args, ("samples", "out_dir", "stride")), args.method)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"geoplane: error: config: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"geoplane: error: {exc}", file=sys.stderr)
        return 2
    except scene_io.FormatError as exc:
        print(f"geoplane: error: format: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"geoplane: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
