import numpy as np
import pytest

from geoplane.energy import EnergyParams, cell_moments
from geoplane.evaluate import Region, SceneSpec, make_scene
from geoplane.geodesic import GeodesicWeights, StepCostField, build_cell_graph, voronoi_partition
from geoplane.pipeline import GraphParams
from geoplane.scene_io import DepthSamples, GridDims

WALL = Region("wall", (0.1, -0.2, 0.45))
GROUND = Region("ground", (0.0, 0.8, 0.4), ((-1, 87.5), (128, 87.5), (128, 128), (-1, 128)))
BOX = Region("box", (-0.3, 0.1, 0.9), ((30, 20), (95, 25), (90, 70), (35, 75)))

# Both Dijkstras add the same step costs in different orders, so equal
# path lengths can differ in the last few ulps.
ROUNDING = 1e-12

GW = GeodesicWeights(20.0, 20.0, 1.0)
GP = GraphParams(10, 1.5, 1e-3)
EP = EnergyParams(w_una=1e4, lambda_c=1.0)


def three_region_spec(**kw) -> SceneSpec:
    return SceneSpec(128, 128, (WALL, GROUND, BOX), stride=16, **kw)


def random_seeds(rng, dims: GridDims, k: int) -> DepthSamples:
    flat = rng.choice(dims.size, size=k, replace=False)
    v, u = np.divmod(flat, dims.width)
    return DepthSamples(u, v, rng.uniform(1.0, 5.0, size=k), dims)


def random_field(rng, dims: GridDims) -> StepCostField:
    inside = np.isfinite(StepCostField.uniform(dims).costs)
    costs = np.where(inside, rng.uniform(0.1, 2.0, size=(4, dims.height, dims.width)), np.inf)
    return StepCostField(dims, costs)


def build(scene, gw=GW, gp=GP, use_sem=True):
    """Step costs, partition, graph and moments for a synthetic scene."""
    field = StepCostField.from_maps(scene.edges, scene.semantics if use_sem else None, gw)
    part = voronoi_partition(field, scene.samples)
    graph = build_cell_graph(part, field, gp.N, gp.D_max, gp.eps)
    return field, part, graph, cell_moments(part)


@pytest.fixture(scope="session")
def clean_scene():
    return make_scene(three_region_spec())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    lines = list(mod.RESULTS)
    if not any(" criterion 9:" in ln for ln in lines):
        lines.append(f"[SKIP] criterion 9: dataset not supplied (set {mod.DATASET_ENV})")
    terminalreporter.section("acceptance criteria")
    for ln in lines:
        terminalreporter.write_line(ln)
