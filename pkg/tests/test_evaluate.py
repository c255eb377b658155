import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoplane import evaluate as ev
from geoplane.energy import Plane
from geoplane.evaluate import Region, SceneSpec
from geoplane.geodesic import StepCostField
from geoplane.scene_io import DenseDepthMap, DepthSamples, FormatError, GridDims


def dense(inv):
    inv = np.asarray(inv, dtype=float)
    return DenseDepthMap(inv, np.ones(inv.shape, dtype=bool))


def pixels(samples):
    return sorted(zip(samples.v.tolist(), samples.u.tolist()))


# ---- sampling


def test_stride_sample_lattice():
    gt = np.ones((8, 8))
    assert pixels(ev.stride_sample(gt, 4)) == [(0, 0), (0, 4), (4, 0), (4, 4)]
    assert pixels(ev.stride_sample(gt, 4, 1)) == [(1, 1), (1, 5), (5, 1), (5, 5)]
    assert len(ev.stride_sample(gt, 1)) == 64


def test_stride_sample_units_and_invalid():
    gt = np.full((4, 4), 0.5)
    gt[0, 0] = np.nan
    gt[0, 2] = 0.0
    s = ev.stride_sample(gt, 2, units="inverse-depth")
    assert pixels(s) == [(2, 0), (2, 2)]
    assert np.all(s.z == 2.0)
    assert np.all(ev.stride_sample(gt, 2, units="depth").z == 0.5)


def test_stride_sample_ids_row_major():
    s = ev.stride_sample(np.ones((6, 6)), 3)
    assert list(zip(s.v.tolist(), s.u.tolist())) == [(0, 0), (0, 3), (3, 0), (3, 3)]


def scanline_samples(rows, cols):
    dims = GridDims(max(cols) + 1, max(rows) + 1)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    return DepthSamples(uu.ravel(), vv.ravel(), np.ones(vv.size), dims)


def test_decimate_identity():
    s = scanline_samples([1, 3, 5], [0, 2])
    t = ev.decimate_scanlines(s)
    assert pixels(t) == pixels(s)


def test_decimate_rows():
    s = scanline_samples([10, 20, 30, 40], [0, 1])
    assert sorted(set(ev.decimate_scanlines(s, 2).v.tolist())) == [10, 30]
    s = scanline_samples(list(range(0, 128, 2)), [0])
    kept = sorted(set(ev.decimate_scanlines(s, 12).v.tolist()))
    assert kept == [0, 24, 48, 72, 96, 120]


def test_decimate_cols():
    s = scanline_samples([0, 1], [0, 1, 2, 3, 4])
    assert sorted(set(ev.decimate_scanlines(s, 1, 2).u.tolist())) == [0, 2, 4]


# ---- metrics


def test_mae_examples():
    gt = np.random.default_rng(0).uniform(0.2, 1.0, size=(5, 6))
    assert ev.mae(dense(gt), gt)["mae"] == 0.0
    m = ev.mae(dense(gt + 1), gt)
    assert m["mae"] == pytest.approx(1.0) and m["rmse"] == pytest.approx(1.0)
    bad = gt.copy()
    bad[0, :] += 100
    mask = np.ones(gt.shape, dtype=bool)
    mask[0, :] = False
    out = ev.mae(dense(bad), gt, mask)
    assert out["mae"] == 0.0 and out["n_pixels"] == 24


def test_mae_depth_unit():
    inv = np.full((2, 2), 0.5)
    m = ev.mae(dense(inv), np.full((2, 2), 2.5), unit="depth")
    assert m["mae"] == pytest.approx(0.5) and m["unit"] == "depth"
    assert set(json.loads(json.dumps(m))) == {"mae", "rmse", "unit", "n_pixels"}


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.1, 0.1), st.integers(0, 2**31))
def test_mae_detects_translation(delta, seed):
    gt = np.random.default_rng(seed).uniform(0.2, 1.0, size=(4, 7))
    assert ev.mae(dense(gt + delta), gt)["mae"] == pytest.approx(abs(delta), abs=1e-12)


def test_mae_empty_domain():
    with pytest.raises(ValueError):
        ev.mae(dense(np.ones((2, 2))), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


# ---- baselines


def test_nearest_single_sample():
    dims = GridDims(5, 4)
    d = ev.baseline_nearest(DepthSamples([1], [2], [4.0], dims), dims)
    assert np.all(d.inverse_depth == 0.25)


def exhaustive_nearest(samples, dims):
    out = np.empty(dims.shape, dtype=np.int64)
    for v in range(dims.height):
        for u in range(dims.width):
            d2 = [(int(su) - u) ** 2 + (int(sv) - v) ** 2 for su, sv in zip(samples.u, samples.v)]
            out[v, u] = d2.index(min(d2))
    return out


@pytest.mark.parametrize("k", [2, 7, 40])
def test_nearest_matches_exhaustive(k):
    rng = np.random.default_rng(k)
    dims = GridDims(17, 13)
    flat = rng.choice(dims.size, size=k, replace=False)
    s = DepthSamples(flat % 17, flat // 17, np.arange(1.0, k + 1), dims)
    d = ev.baseline_nearest(s, dims)
    want = s.z[exhaustive_nearest(s, dims)]
    assert np.array_equal(1.0 / d.inverse_depth, want)


def test_nearest_bisector_tie():
    dims = GridDims(5, 1)
    d = ev.baseline_nearest(DepthSamples([4, 0], [0, 0], [1.0, 2.0], dims), dims)
    assert (1.0 / d.inverse_depth[0]).tolist() == [2.0, 2.0, 1.0, 1.0, 1.0]


def test_nearest_crowded_ties():
    # 20 samples on a circle of radius 5 around the centre pixel: all tie there
    dims = GridDims(11, 11)
    pts = {(5 + du, 5 + dv) for du in range(-5, 6) for dv in range(-5, 6) if du * du + dv * dv == 25}
    pts = sorted(pts, key=lambda p: (-p[1], -p[0]))
    s = DepthSamples([p[0] for p in pts], [p[1] for p in pts], np.arange(1.0, len(pts) + 1), dims)
    assert len(pts) == 12
    d = ev.baseline_nearest(s, dims)
    assert 1.0 / d.inverse_depth[5, 5] == 1.0


def lattice(dims, stride, f, offset=0):
    vv, uu = np.mgrid[offset : dims.height : stride, offset : dims.width : stride]
    return DepthSamples(uu.ravel(), vv.ravel(), f(uu.ravel(), vv.ravel()), dims)


def test_bilinear_constant_and_midpoint():
    dims = GridDims(9, 5)
    d = ev.baseline_bilinear(lattice(dims, 4, lambda u, v: np.full(u.shape, 2.0)), dims, 4)
    assert np.allclose(1.0 / d.inverse_depth, 2.0)
    s = lattice(dims, 4, lambda u, v: 1.0 + u / 4.0)  # 1, 2, 3 along the columns
    z = 1.0 / ev.baseline_bilinear(s, dims, 4).inverse_depth
    assert z[0, 2] == pytest.approx(1.5) and z[0, 6] == pytest.approx(2.5)


def test_bilinear_extends_edge_columns():
    dims = GridDims(10, 6)
    s = lattice(dims, 4, lambda u, v: 1.0 + u + 10 * v, offset=1)
    z = 1.0 / ev.baseline_bilinear(s, dims, 4).inverse_depth
    assert z[1, 0] == pytest.approx(z[1, 1])
    assert z[5, 9] == pytest.approx(z[5, 9 - 9 % 4 + 1 - 4 if False else 9])


@pytest.mark.parametrize("unit", ["depth", "inverse-depth"])
def test_bilinear_exact_on_affine(unit):
    dims = GridDims(33, 25)
    f = lambda u, v: 0.5 + 0.01 * u + 0.02 * v
    if unit == "depth":
        s = lattice(dims, 8, f)
    else:
        s = lattice(dims, 8, lambda u, v: 1.0 / f(u, v))
    d = ev.baseline_bilinear(s, dims, 8, unit)
    vv, uu = np.mgrid[0:25, 0:33]
    got = 1.0 / d.inverse_depth if unit == "depth" else d.inverse_depth
    assert np.allclose(got, f(uu, vv), rtol=0, atol=1e-12)


def test_bilinear_rejects_partial_lattice():
    dims = GridDims(9, 9)
    s = lattice(dims, 4, lambda u, v: np.ones(u.shape)).subset(np.arange(8))
    with pytest.raises(ValueError):
        ev.baseline_bilinear(s, dims, 4)


# ---- synthetic scenes


def test_scene_noise_free_samples_on_planes():
    spec = SceneSpec(64, 48, (Region("a", (0.1, 0.2, 0.6)), Region("b", (0.0, -0.1, 0.9), ((10, 5), (50, 5), (30, 40)))), stride=4)
    sc = ev.make_scene(spec)
    s = sc.samples
    reg = sc.region_map[s.v, s.u]
    un, vn = s.normalized()
    for i, r in enumerate(spec.regions):
        sel = reg == i
        assert np.allclose(s.inverse_depth[sel], Plane(*r.plane).at(un[sel], vn[sel]), rtol=1e-14)
    assert np.array_equal(sc.semantics.argmax(), sc.region_map)
    assert sc.edges.scores.any()


def test_scene_outlier_count_and_determinism():
    spec = SceneSpec(40, 40, (Region("a", (0.0, 0.0, 0.5)),), stride=4, outlier_fraction=0.1, outlier_magnitude=0.2, seed=5)
    a, b = ev.make_scene(spec), ev.make_scene(spec)
    assert len(a.samples) == 100 and len(a.outlier_ids) == 10
    dev = np.abs(a.samples.inverse_depth - 0.5)
    assert np.all(dev[a.outlier_ids] >= 0.2 - 1e-12)
    others = np.setdiff1d(np.arange(100), a.outlier_ids)
    assert np.all(dev[others] < 1e-12)
    assert a.samples.z.tobytes() == b.samples.z.tobytes()
    assert np.array_equal(a.outlier_ids, b.outlier_ids)


def test_scene_noise_level():
    sigma = 0.01
    spec = SceneSpec(256, 256, (Region("a", (0.1, 0.1, 1.0)),), stride=2, noise=sigma, seed=2)
    sc = ev.make_scene(spec)
    un, vn = sc.samples.normalized()
    err = sc.samples.inverse_depth - Plane(0.1, 0.1, 1.0).at(un, vn)
    assert len(err) >= 10_000
    assert abs(err.std() - sigma) < 0.1 * sigma


def test_parse_scene_spec(tmp_path):
    text = "width = 32\nheight = 16 # comment\nstride=4\nseed = 3\nregion = wall | 0.1 0.2 0.5\nregion = box | 0 0 0.9 | 2 2, 10 2, 10 10\n"
    spec = ev.parse_scene_spec(text)
    assert (spec.width, spec.height, spec.stride, spec.seed) == (32, 16, 4, 3)
    assert spec.regions[1].polygon == ((2, 2), (10, 2), (10, 10))
    with pytest.raises(FormatError, match="line 2"):
        ev.parse_scene_spec("width = 3\nbogus = 1\n")
    with pytest.raises(FormatError, match="line 1"):
        ev.parse_scene_spec("region = a | 1 2\n")
    with pytest.raises(FormatError):
        ev.parse_scene_spec("width = 3\nheight = 3\n")


def test_write_scene(tmp_path):
    spec = SceneSpec(16, 16, (Region("a", (0.0, 0.0, 0.5)),), stride=4)
    ev.write_scene(ev.make_scene(spec), tmp_path, spec)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"gt_inverse_depth.pfm", "edges.pgm", "semantics.bin", "samples.csv", "upsample.cfg", "scene.json"} <= names


# ---- oracle


def test_oracle_strip():
    dims = GridDims(5, 1)
    d = ev.oracle_geodesic(StepCostField.uniform(dims, 0.5), DepthSamples([0, 4], [0, 0], [1.0, 1.0], dims))
    assert d[0, 1] == 2.0 and d[1, 0] == 2.0 and d[0, 0] == 0.0


def test_oracle_symmetric():
    rng = np.random.default_rng(0)
    dims = GridDims(12, 12)
    inside = np.isfinite(StepCostField.uniform(dims).costs)
    field = StepCostField(dims, np.where(inside, rng.uniform(0.1, 1, size=(4, 12, 12)), np.inf))
    flat = rng.choice(144, size=6, replace=False)
    d = ev.oracle_geodesic(field, DepthSamples(flat % 12, flat // 12, np.ones(6), dims))
    assert np.allclose(d, d.T, rtol=1e-14)


def test_oracle_size_cap():
    dims = GridDims(65, 2)
    with pytest.raises(ValueError):
        ev.oracle_geodesic(StepCostField.uniform(dims), DepthSamples([0], [0], [1.0], dims))
