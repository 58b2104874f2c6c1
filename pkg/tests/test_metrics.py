"""Tests for reconstruction metrics."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

from imre.cardiac import APParams, HeartPotential, PacingSite, simulate_ap
from imre.errors import ShapeError
from imre.forge import ForwardOperator
from imre.metrics import (
    Metrics,
    activation_time,
    earliest_node,
    evaluate_solution,
    localization_distance,
    rmse,
    spatial_cc,
    temporal_cc,
)


def potential(matrix, dt=0.5):
    return HeartPotential(np.asarray(matrix, dtype=float), dt=dt)


def step_potential(onsets, n_samples=12, dt=0.5):
    """One node per onset; each jumps from 0 to 1 at its onset sample."""
    u = np.zeros((len(onsets), n_samples))
    for node, onset in enumerate(onsets):
        u[node, onset:] = 1.0
    return potential(u, dt)


class TestRmse:
    def test_zero_on_self(self, rng):
        a = rng.normal(size=(4, 5))
        assert rmse(a, a) == 0.0

    def test_constant_offset(self, rng):
        a = rng.normal(size=(4, 5))
        assert rmse(a, a - 0.3) == pytest.approx(0.3)

    def test_matches_two_pass(self, rng):
        a, b = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
        total = 0.0
        for x, y in zip(a.ravel(), b.ravel()):
            total += (x - y) ** 2
        assert rmse(a, b) == pytest.approx(np.sqrt(total / a.size), abs=1e-12)

    @given(st.integers(min_value=0, max_value=10**6))
    def test_symmetric_and_triangle(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.normal(size=(3, 4)) for _ in range(3))
        assert rmse(a, b) == pytest.approx(rmse(b, a))
        assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rmse(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_accepts_wrapped_matrices(self, rng):
        u = potential(rng.normal(size=(3, 4)))
        assert rmse(u, u.matrix) == 0.0

    def test_accepts_operators(self, rng):
        h = rng.normal(size=(3, 4))
        assert rmse(ForwardOperator(h, "h"), h + 1.0) == pytest.approx(1.0)


class TestCorrelation:
    @pytest.mark.parametrize("cc", [spatial_cc, temporal_cc])
    def test_identity_negation_affine(self, cc, rng):
        u = potential(rng.normal(size=(6, 8)))
        assert cc(u, u) == pytest.approx(1.0)
        assert cc(potential(-u.matrix), u) == pytest.approx(-1.0)
        assert cc(potential(2.0 * u.matrix + 5.0), u) == pytest.approx(1.0)

    @given(
        st.integers(min_value=0, max_value=10**6),
        st.floats(min_value=0.1, max_value=10.0),
        st.floats(min_value=-5.0, max_value=5.0),
    )
    def test_positive_affine_invariance(self, seed, scale, offset):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        assert spatial_cc(scale * a + offset, b) == pytest.approx(spatial_cc(a, b), abs=1e-9)
        assert temporal_cc(a, scale * b + offset) == pytest.approx(temporal_cc(a, b), abs=1e-9)
        assert spatial_cc(-a, b) == pytest.approx(-spatial_cc(a, b), abs=1e-12)

    def test_constant_frames_skipped(self, rng):
        u = rng.normal(size=(5, 4))
        u[:, 0] = 0.0
        assert spatial_cc(u, u) == pytest.approx(1.0)

    def test_constant_nodes_skipped(self, rng):
        u = rng.normal(size=(5, 4))
        u[2, :] = 1.0
        assert temporal_cc(u, u) == pytest.approx(1.0)

    def test_all_degenerate(self):
        with pytest.raises(ValueError):
            spatial_cc(np.ones((3, 4)), np.ones((3, 4)))
        with pytest.raises(ValueError):
            temporal_cc(np.zeros((3, 4)), np.zeros((3, 4)))

    def test_range(self, rng):
        value = spatial_cc(rng.normal(size=(6, 9)), rng.normal(size=(6, 9)))
        assert -1.0 <= value <= 1.0


class TestActivation:
    def test_step_onset(self):
        at = activation_time(step_potential([4, 7]))
        np.testing.assert_allclose(at.times, [4 * 0.5, 7 * 0.5])
        assert not at.degenerate.any()

    def test_flat_trace_is_degenerate(self):
        u = step_potential([3, 5])
        matrix = np.vstack([u.matrix, np.full(12, 0.2)])
        at = activation_time(potential(matrix))
        assert at.times[2] == 0.0 and at.degenerate[2]

    def test_needs_three_samples(self):
        with pytest.raises(ValueError):
            activation_time(potential(np.zeros((2, 2))))

    def test_earliest_node(self):
        assert earliest_node(step_potential([5, 2, 9])) == 1

    def test_earliest_tie_takes_steepest(self):
        u = step_potential([3, 3]).matrix
        u[0] *= 0.5
        assert earliest_node(potential(u)) == 1

    def test_paced_node_activates_first(self, small_geometry):
        u = simulate_ap(small_geometry[0], PacingSite(node=5), APParams(steps=300))
        assert earliest_node(u) == 5


class TestLocalization:
    def test_exact_estimate(self, small_geometry):
        mesh = small_geometry[0]
        onsets = [6] * mesh.n_nodes
        onsets[4] = 2
        assert localization_distance(step_potential(onsets), mesh, PacingSite(4)) == 0.0

    def test_neighbor_estimate_is_edge_length(self, small_geometry):
        mesh = small_geometry[0]
        i, j = (int(v) for v in mesh.edges[0])
        onsets = [6] * mesh.n_nodes
        onsets[j] = 2
        distance = localization_distance(step_potential(onsets), mesh, PacingSite(i))
        assert distance == pytest.approx(np.linalg.norm(mesh.nodes[i] - mesh.nodes[j]))

    def test_bounded_by_diameter(self, small_geometry, rng):
        mesh = small_geometry[0]
        diameter = max(np.linalg.norm(a - b) for a in mesh.nodes for b in mesh.nodes)
        for _ in range(5):
            u = potential(rng.normal(size=(mesh.n_nodes, 6)))
            assert localization_distance(u, mesh, PacingSite(0)) <= diameter + 1e-9

    def test_invalid_site(self, small_geometry):
        mesh = small_geometry[0]
        with pytest.raises(ValueError):
            localization_distance(step_potential([2] * mesh.n_nodes), mesh,
                                  PacingSite(mesh.n_nodes))


class TestEvaluateSolution:
    def test_perfect_estimate(self, small_geometry):
        mesh = small_geometry[0]
        onsets = [2 + i % 5 for i in range(mesh.n_nodes)]
        u = step_potential(onsets)
        m = evaluate_solution(u, u, mesh, PacingSite(0))
        assert m.rmse == 0.0 and m.loc_dist_mm == 0.0
        assert m.scc == pytest.approx(1.0) and m.tcc == pytest.approx(1.0)

    def test_metric_ranges(self):
        with pytest.raises(ValidationError):
            Metrics(rmse=-1.0, scc=0.0, tcc=0.0, loc_dist_mm=0.0)
        with pytest.raises(ValidationError):
            Metrics(rmse=0.0, scc=1.5, tcc=0.0, loc_dist_mm=0.0)
