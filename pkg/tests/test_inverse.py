"""Tests for the Tikhonov solver, the L-curve and the alternating estimate."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imre.cardiac import APParams, BodyRecording, PacingSite, forward_project, simulate_ap
from imre.dfo import DfoConfig
from imre.errors import GeometryError, ShapeError
from imre.forge import ErrorLabel, ForwardOperator
from imre.generator import GeneratorConfig, GeneratorModel, encode, generate
from imre.inverse import (
    Convergence,
    InverseProblem,
    LaplacianOperator,
    alternate_optimize,
    build_laplacian,
    detect_error_source,
    laplacian_from_adjacency,
    lcurve_lambda,
    tikhonov_solve,
)
from imre.som import LabelMap, SomGrid

PATH3 = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)


def random_adjacency(n: int, seed: int) -> np.ndarray:
    """A path (so the graph is connected) plus random chords."""
    rng = np.random.default_rng(seed)
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    for i, j in rng.integers(0, n, size=(n, 2)):
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return a


@pytest.fixture(scope="module")
def paced_case(small_geometry, small_operator):
    source, _ = small_geometry
    u = simulate_ap(source, PacingSite(node=0), APParams(steps=200))
    return u, forward_project(small_operator, u)


class TestLaplacian:
    def test_path_graph(self):
        np.testing.assert_array_equal(
            laplacian_from_adjacency(PATH3).matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
        )

    def test_mesh_laplacian(self, small_geometry):
        lap = build_laplacian(small_geometry[0])
        np.testing.assert_array_equal(lap.matrix, lap.matrix.T)
        np.testing.assert_allclose(lap.matrix @ np.ones(lap.n_nodes), 0.0, atol=1e-12)

    @given(st.integers(min_value=3, max_value=12), st.integers(min_value=0, max_value=10**6))
    def test_positive_semidefinite(self, n, seed):
        lap = laplacian_from_adjacency(random_adjacency(n, seed))
        assert np.linalg.eigvalsh(lap.matrix).min() >= -1e-10

    def test_disconnected(self):
        a = np.zeros((4, 4))
        a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1.0
        with pytest.raises(GeometryError):
            laplacian_from_adjacency(a)


class TestTikhonov:
    def test_identity_system(self, rng):
        y = rng.normal(size=(5, 3))
        u = tikhonov_solve(np.eye(5), y, 0.25, np.eye(5))
        np.testing.assert_allclose(u.matrix, y / 1.25, atol=1e-9)

    def test_unregularized_limit(self, rng):
        h = np.eye(4) + 0.1 * rng.normal(size=(4, 4))
        y = rng.normal(size=(4, 6))
        u = tikhonov_solve(h, y, 0.0, laplacian_from_adjacency(random_adjacency(4, 1)))
        np.testing.assert_allclose(u.matrix, np.linalg.solve(h, y), atol=1e-8)

    @given(st.integers(min_value=0, max_value=10**6), st.floats(min_value=1e-4, max_value=10.0))
    def test_normal_equations(self, seed, lam):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(12, 8))
        y = rng.normal(size=(12, 3))
        lap = laplacian_from_adjacency(random_adjacency(8, seed))
        u = tikhonov_solve(h, y, lam, lap).matrix
        lhs = (h.T @ h + lam * lap.gram) @ u
        rhs = h.T @ y
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-8

    def test_scales_with_recording(self, small_operator, small_geometry, paced_case):
        _, y = paced_case
        lap = build_laplacian(small_geometry[0])
        u1 = tikhonov_solve(small_operator, y, 0.02, lap)
        u4 = tikhonov_solve(small_operator, BodyRecording(4.0 * y.matrix, y.dt), 0.02, lap)
        np.testing.assert_allclose(u4.matrix, 4.0 * u1.matrix, atol=1e-10)
        assert u1.dt == y.dt

    def test_shape_and_lambda_checks(self, rng):
        lap = np.eye(3)
        with pytest.raises(ShapeError):
            tikhonov_solve(rng.normal(size=(4, 3)), rng.normal(size=(5, 2)), 0.1, lap)
        with pytest.raises(ValueError):
            tikhonov_solve(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), -1.0, lap)

    def test_lcurve_picks_interior_grid_value(self, small_operator, small_geometry, paced_case):
        _, y = paced_case
        grid = np.logspace(-5, 1, 13)
        lam = lcurve_lambda(small_operator, y, build_laplacian(small_geometry[0]), grid)
        assert lam in grid[1:-1]

    def test_lcurve_needs_three_values(self, small_operator, small_geometry, paced_case):
        with pytest.raises(ValueError):
            lcurve_lambda(small_operator, paced_case[1], build_laplacian(small_geometry[0]),
                          [0.1, 1.0])


class TestAlternateOptimize:
    @pytest.fixture(scope="class")
    def problem(self, small_geometry, small_operator, paced_case):
        model = GeneratorModel.initialize(
            small_operator.shape, GeneratorConfig(latent_dim=2, hidden_widths=[4], seed=2)
        )
        return InverseProblem(
            y=paced_case[1],
            h_i=small_operator,
            model=model,
            lam=0.02,
            laplacian=build_laplacian(small_geometry[0]),
        )

    def test_residual_trace_non_increasing(self, problem):
        result = alternate_optimize(problem, DfoConfig.box(2, 3.0, budget=30),
                                    Convergence(max_outer=3))
        residuals = [row.residual for row in result.trace]
        assert all(b <= a + 1e-9 for a, b in zip(residuals, residuals[1:]))
        assert 1 <= len(result.trace) <= 3
        assert result.dfo_evaluations == sum(row.dfo_evals for row in result.trace)
        assert result.h_f.shape == problem.h_i.shape
        assert np.all(np.abs(result.z.z) <= 3.0)

    def test_callback_sees_every_iteration(self, problem):
        seen = []
        result = alternate_optimize(
            problem, DfoConfig.box(2, 3.0, budget=20), Convergence(max_outer=2),
            on_iteration=lambda row, u, h: seen.append((row.outer_iter, u.n_nodes, h.shape)),
        )
        assert [s[0] for s in seen] == [row.outer_iter for row in result.trace]
        assert all(s[1] == problem.h_i.shape[1] and s[2] == problem.h_i.shape for s in seen)

    def test_loose_tolerance_converges(self, problem):
        result = alternate_optimize(problem, DfoConfig.box(2, 3.0, budget=20),
                                    Convergence(tol_u=1e6, tol_h=1e6, max_outer=5))
        assert result.converged and len(result.trace) == 1

    def test_deterministic(self, problem):
        args = (DfoConfig.box(2, 3.0, budget=20), Convergence(max_outer=2))
        a, b = alternate_optimize(problem, *args), alternate_optimize(problem, *args)
        np.testing.assert_array_equal(a.u.matrix, b.u.matrix)
        np.testing.assert_array_equal(a.z.z, b.z.z)

    def test_dimension_mismatch(self, problem):
        with pytest.raises(ShapeError):
            alternate_optimize(problem, DfoConfig.box(3, 3.0, budget=20), Convergence())

    def test_inconsistent_problem(self, problem, rng):
        with pytest.raises(ShapeError):
            InverseProblem(y=BodyRecording(rng.normal(size=(3, 5)), 1.0), h_i=problem.h_i,
                           model=problem.model, lam=0.02, laplacian=problem.laplacian)
        with pytest.raises(ValueError):
            InverseProblem(y=problem.y, h_i=problem.h_i, model=problem.model, lam=-1.0,
                           laplacian=problem.laplacian)


class TestDetectErrorSource:
    def test_delegates_to_atlas(self):
        g = SomGrid(2, 1, [[0.0, 0.0], [5.0, 5.0]])
        lm = LabelMap.empty(2)
        lm.add(0, ErrorLabel.ROT_Z)
        lm.add(1, ErrorLabel.SCALE)
        assert detect_error_source(np.array([4.0, 4.5]), g, lm) == ErrorLabel.SCALE
        assert detect_error_source(np.array([0.1, 0.0]), g, lm) == ErrorLabel.ROT_Z

    def test_empty_bmu_falls_through(self):
        g = SomGrid(2, 1, [[0.0, 0.0], [5.0, 5.0]])
        lm = LabelMap.empty(2)
        lm.add(1, ErrorLabel.TRANS_Z)
        assert detect_error_source(np.zeros(2), g, lm) == ErrorLabel.TRANS_Z


def error_direction_model(directions: np.ndarray, gain: float = 0.1) -> GeneratorModel:
    """Generator with G(H_i, z) = H_i + sum_k tanh(gain z_k) / gain * E_k."""
    k = directions.shape[0]
    shape = directions.shape[1:]
    model = GeneratorModel.initialize(shape, GeneratorConfig(latent_dim=k, hidden_widths=[k]))
    model.params = {name: np.zeros_like(value) for name, value in model.params.items()}
    model.params["decoder.latent.w"] = gain * np.eye(k)
    model.params["decoder.out.w"][:k] = directions.reshape(k, -1) / gain
    return model


def rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(a**2)))


class TestRecoverableErrors:
    """Alternation on operators whose errors lie in the generator's range."""

    N_LEADS, N_NODES, N_STEPS = 12, 8, 6

    @pytest.fixture(scope="class")
    def setting(self):
        rng = np.random.default_rng(77)
        h_i = rng.normal(size=(self.N_LEADS, self.N_NODES))
        directions = 0.3 * rng.normal(size=(2, self.N_LEADS, self.N_NODES))
        lap = laplacian_from_adjacency(random_adjacency(self.N_NODES, 4))
        return h_i, error_direction_model(directions), lap, directions

    def test_direction_model_shape(self, setting):
        h_i, model, _, directions = setting
        out = generate(model, ForwardOperator(h_i, "h"), np.array([1.0, 0.0])).matrix
        np.testing.assert_allclose(out - h_i, np.tanh(0.1) / 0.1 * directions[0], atol=1e-12)

    def test_zero_error_stays_at_origin(self, setting):
        h_i, model, lap, directions = setting
        u_true = np.random.default_rng(3).normal(size=(self.N_NODES, self.N_STEPS))
        prior = ForwardOperator(h_i, "prior")
        problem = InverseProblem(y=BodyRecording(h_i @ u_true, 1.0), h_i=prior, model=model,
                                 lam=0.0, laplacian=lap)
        result = alternate_optimize(problem, DfoConfig.box(2, 3.0, budget=200),
                                    Convergence(max_outer=3))
        identity = rms(generate(model, prior, encode(model, prior, prior).mean).matrix - h_i)
        assert np.linalg.norm(result.z.z) < 1e-3
        assert rms(result.h_f.matrix - h_i) <= 1.5 * identity + 1e-3 * rms(directions[0])
        assert result.trace[0].residual <= result.initial_residual * (1 + 1e-9)

    def test_controlled_errors_improve_reconstruction(self, setting):
        h_i, model, lap, _ = setting
        prior = ForwardOperator(h_i, "prior")
        improved, cases = 0, 20
        for case in range(cases):
            rng = np.random.default_rng([11, case])
            z_true = rng.uniform(0.8, 2.0, size=2) * rng.choice([-1.0, 1.0], size=2)
            h_true = generate(model, prior, z_true).matrix
            u_true = rng.normal(size=(self.N_NODES, self.N_STEPS))
            clean = h_true @ u_true
            y = clean + 0.01 * rms(clean) * rng.normal(size=clean.shape)
            problem = InverseProblem(y=BodyRecording(y, 1.0), h_i=prior, model=model,
                                     lam=1e-6, laplacian=lap)
            result = alternate_optimize(problem, DfoConfig.box(2, 3.0, budget=200),
                                        Convergence(max_outer=4))
            initial = tikhonov_solve(h_i, y, 1e-6, lap).matrix
            improved += rms(result.u.matrix - u_true) < rms(initial - u_true)
        assert improved >= 0.8 * cases
