import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoplane.energy import (
    CellMoments,
    EnergyParams,
    Plane,
    SolverState,
    cell_moments,
    energy_terms,
    moment_quadratic,
    outlier_energies,
    outlier_probability,
    pairwise_energy,
    total_energy,
    unary_energy,
)
from geoplane.geodesic import StepCostField, build_cell_graph, voronoi_partition
from geoplane.scene_io import DepthSample, DepthSamples, GridDims, PixelCoord

from conftest import random_field, random_seeds
from oracles import brute_force_energy, outlier_cost, posterior, random_problem


# ---- single terms


def test_unary_examples():
    dims = GridDims(8, 8)
    s = DepthSample(PixelCoord(2, 5), 2.0, 0)
    p = EnergyParams(w_una=2.0)
    assert unary_energy(Plane(1, 1, 1), s, True, p, dims) == 0.0
    assert unary_energy(Plane(0, 0, 0.5), s, False, p, dims) == 0.0
    assert unary_energy(Plane(0, 0, 0.6), s, False, p, dims) == pytest.approx(0.02, rel=1e-12)


def test_pairwise_examples():
    M = np.diag([1.0, 2.0, 7.0])
    p = EnergyParams(lambda_c=0.5)
    assert pairwise_energy((1, 2, 3), (1, 2, 3), True, M, p) == 0.0
    assert pairwise_energy((1, 2, 3), (0, 0, 0), False, M, p) == 3.5
    M4 = np.array([[0.3, 0.1, 0.2], [0.1, 0.5, -0.4], [0.2, -0.4, 4.0]])
    assert pairwise_energy((0, 0, 0.1), (0, 0, 0), True, CellMoments(M4[None], np.array([4])), EnergyParams()) == pytest.approx(0.04)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10_000), st.integers(0, 2**31))
def test_moment_quadratic_matches_pixel_sum(n_pix, seed):
    rng = np.random.default_rng(seed)
    dims = GridDims(128, 96)
    flat = rng.choice(dims.size, size=n_pix, replace=False)
    un, vn = dims.normalize(flat % dims.width, flat // dims.width)
    x = np.stack([un, vn, np.ones(n_pix)], axis=1)
    M = x.T @ x
    tn, tm = rng.normal(size=3), rng.normal(size=3)
    want = math.fsum(((x @ tn) - (x @ tm)) ** 2)
    got = pairwise_energy(tn, tm, True, M, EnergyParams())
    assert got == pytest.approx(want, rel=1e-10)


def test_cell_moments_by_pixels():
    rng = np.random.default_rng(0)
    dims = GridDims(13, 11)
    seeds = random_seeds(rng, dims, 6)
    part = voronoi_partition(random_field(rng, dims), seeds)
    mom = cell_moments(part)
    un, vn = dims.normalized_grid()
    for n in range(6):
        sel = part.nearest_seed == n
        x = np.stack([un[sel], vn[sel], np.ones(sel.sum())], axis=1)
        assert np.allclose(mom.M[n], x.T @ x, rtol=1e-13, atol=1e-13)
        assert mom.count[n] == sel.sum() == mom.M[n, 2, 2]


# ---- outlier model


def test_outlier_probability_examples():
    p = EnergyParams(p_prior=0.2, tau_o=0.05, s_o=0.01)
    e0, e1 = outlier_energies(0.08, p)
    # 0.2 s / (0.2 s + 0.8 (1 - s)) with s = sigmoid(3) = 0.952574...
    assert math.exp(-e1) == pytest.approx(float(posterior(0.08, p)), rel=1e-12)
    assert math.exp(-e1) == pytest.approx(0.833925, abs=1e-6)
    assert math.exp(-e0) == pytest.approx(1 - 0.833925, abs=1e-6)
    p = EnergyParams(p_prior=0.5)
    _, e1 = outlier_energies(p.tau_o, p)
    assert math.exp(-e1) == pytest.approx(0.5, rel=1e-15)


def test_outlier_probability_uses_closest_connected_plane():
    samples, part, graph, mom, state, p = random_problem(2, GridDims(24, 24), 6)
    for n in range(len(samples)):
        got = outlier_probability(n, state, graph, samples, p)
        assert got == pytest.approx(float(posterior(state.residual[n], p)), rel=1e-12, abs=1e-300)


def test_outlier_energy_limits():
    p = EnergyParams()
    e0, e1 = outlier_energies(np.array([1e3, 1e6]), p)
    assert np.all(e0 > 1e4) and np.all(np.isfinite(e0))
    assert np.all(e1 < 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_outlier_probability_monotone(r1, r2):
    p = EnergyParams()
    lo, hi = sorted((r1, r2))
    assert outlier_energies(lo, p)[1] >= outlier_energies(hi, p)[1]
    assert outlier_energies(lo, p)[0] <= outlier_energies(hi, p)[0]


# ---- totals


@pytest.mark.parametrize("seed", range(3))
def test_total_energy_matches_brute_force(seed):
    samples, part, graph, mom, state, p = random_problem(seed, GridDims(32, 32), 8)
    got = total_energy(state, graph, mom, samples, p)
    want = brute_force_energy(state, samples, part, graph, p)
    assert got == pytest.approx(want, rel=1e-12)


def test_single_seed_energy_is_outlier_prior_only():
    dims = GridDims(5, 5)
    samples = DepthSamples([2], [2], [4.0], dims)
    field = StepCostField.uniform(dims)
    part = voronoi_partition(field, samples)
    graph = build_cell_graph(part, field)
    planes = np.array([[0.0, 0.0, 0.25]])
    state = SolverState(planes, np.zeros(1, dtype=bool), np.zeros(0, dtype=bool), np.zeros(1))
    p = EnergyParams()
    una, pair, out = energy_terms(state, graph, cell_moments(part), samples, p)
    assert una == 0.0 and pair == 0.0
    assert out == pytest.approx(outlier_cost(0.0, False, p), rel=1e-12)
    assert out > 0


def test_flipping_coplanarity_changes_one_term():
    samples, part, graph, mom, state, p = random_problem(11)
    k = int(np.flatnonzero(state.coplanar)[0])
    n, m = graph.src[k], graph.dst[k]
    before = total_energy(state, graph, mom, samples, p)
    flipped = state.copy()
    flipped.coplanar[k] = False
    after = total_energy(flipped, graph, mom, samples, p)
    d = state.planes[n] - state.planes[m]
    want = graph.weight[k] * (mom.count[n] * p.lambda_c - p.w_c * moment_quadratic(d, mom.M[n]))
    assert after - before == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_energy_invariant_under_seed_relabeling():
    samples, part, graph, mom, state, p = random_problem(5, GridDims(32, 32), 10)
    rng = np.random.default_rng(9)
    perm = rng.permutation(len(samples))  # new id i is old id perm[i]
    s2 = DepthSamples(samples.u[perm], samples.v[perm], samples.z[perm], samples.dims)
    # rebuild the field the problem used
    rng0 = np.random.default_rng(5)
    random_seeds(rng0, part.dims, 10)
    field = random_field(rng0, part.dims)
    part2 = voronoi_partition(field, s2)
    g2 = build_cell_graph(part2, field, N=5, D_max=40.0, eps=1e-2)
    # same pairs under the relabeling, with matching flags
    key = {(int(perm[a]), int(perm[b])): k for k, (a, b) in enumerate(zip(g2.src, g2.dst))}
    assert len(key) == graph.n_pairs
    cop2 = np.zeros(g2.n_pairs, dtype=bool)
    for k, (a, b) in enumerate(zip(graph.src, graph.dst)):
        cop2[key[(int(a), int(b))]] = state.coplanar[k]
    st2 = SolverState(state.planes[perm], state.outlier[perm], cop2, state.residual[perm])
    e1 = total_energy(state, graph, mom, samples, p)
    e2 = total_energy(st2, g2, cell_moments(part2), s2, p)
    assert e2 == pytest.approx(e1, rel=1e-12)


def test_terms_nonnegative():
    for seed in range(5):
        samples, part, graph, mom, state, p = random_problem(seed, GridDims(24, 24), 6)
        assert all(t >= 0 for t in energy_terms(state, graph, mom, samples, p))
