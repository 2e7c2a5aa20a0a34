"""Tests for the explicit, implicit and Malliavin-weight schemes."""

import math

import numpy as np
import pytest

from bsde_bench.condexp import ExactEstimator, NestedEstimator, RegressionEstimator, RegressionSpec, make_estimator
from bsde_bench.paths import PathEnsemble, coarsen, sample_ensemble, sub_partition, uniform_partition
from bsde_bench.problems import (
    GeneratorSpec,
    LinearCoefficients,
    builtin,
    eval_terminal,
    linear_generator,
)
from bsde_bench.schemes import (
    PicardConfig,
    PicardDiverged,
    PreconditionViolated,
    discrete_weights,
    picard_contraction,
    solve,
    solve_explicit,
    solve_implicit,
    solve_malliavin,
)

# exact-collapse cases accumulate lstsq round-off over the backward sweep
COLLAPSE_TOL = 1e-10


@pytest.fixture(scope='module')
def ensemble():
    return sample_ensemble(uniform_partition(1.0, 64), 2000, seed=7, threads=2)


def _reference_rows(problem, ensemble, partition):
    view = coarsen(ensemble, partition)
    W, fine = ensemble.W, ensemble.fine
    Y = np.stack([problem.reference.Y(W, fine, int(k)) for k in view.indices])
    Z = np.stack([problem.reference.Z(W, fine, int(k)) for k in view.indices])
    return Y, Z


class TestExactCollapse:
    @pytest.mark.parametrize('name', ['martingale', 'quadratic', 'hermite2'])
    @pytest.mark.parametrize('scheme', ['explicit', 'implicit', 'malliavin'])
    def test_reproduces_reference(self, ensemble, name, scheme):
        problem = builtin(name)
        partition = ensemble.fine
        solution = solve(scheme, problem, partition, ensemble, ExactEstimator(problem, ensemble))
        ref_Y, ref_Z = _reference_rows(problem, ensemble, partition)
        n = partition.n
        np.testing.assert_allclose(solution.Y, ref_Y, atol=COLLAPSE_TOL)
        np.testing.assert_allclose(solution.Z[:n], ref_Z[:n], atol=COLLAPSE_TOL)
        if scheme == 'malliavin':
            np.testing.assert_allclose(solution.Z[n], ref_Z[n], atol=COLLAPSE_TOL)

    @pytest.mark.parametrize('scheme', ['explicit', 'implicit', 'malliavin'])
    def test_terminal_row_is_terminal_condition(self, ensemble, scheme):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        partition = sub_partition(ensemble.fine, 8)
        solution = solve(scheme, problem, partition, ensemble, ExactEstimator(problem, ensemble))
        np.testing.assert_array_equal(solution.Y[-1], eval_terminal(problem, ensemble))

    def test_terminal_z_conventions(self, ensemble):
        problem = builtin('quadratic')
        partition = sub_partition(ensemble.fine, 4)
        est = ExactEstimator(problem, ensemble)
        explicit = solve_explicit(problem, partition, ensemble, est)
        implicit = solve_implicit(problem, partition, ensemble, est)
        malliavin = solve_malliavin(problem, partition, ensemble, est)
        np.testing.assert_array_equal(explicit.Z[-1], 0.0)
        np.testing.assert_array_equal(implicit.Z[-1], implicit.Z[-2])
        np.testing.assert_allclose(malliavin.Z[-1], 2 * ensemble.W[:, -1], atol=1e-14)
        assert malliavin.z_terminal_defined and not explicit.z_terminal_defined


class TestExplicit:
    def test_two_step_linear_recursion(self, ensemble):
        a, b = 0.1, 0.2
        problem = builtin('linear_const', {'a': a, 'b': b})
        partition = sub_partition(ensemble.fine, 2)
        solution = solve_explicit(problem, partition, ensemble, ExactEstimator(problem, ensemble))
        dt = 0.5
        # Z̄_1 = 1 + aΔ, Y_0 = b (1 + aΔ) Δ, Z̄_0 = (1 + aΔ)^2
        np.testing.assert_allclose(solution.Z[1], 1 + a * dt, atol=1e-12)
        np.testing.assert_allclose(solution.Y[0], b * (1 + a * dt) * dt, atol=1e-12)
        np.testing.assert_allclose(solution.Z[0], (1 + a * dt) ** 2, atol=1e-12)

    def test_mesh_ratio_warning(self, ensemble, caplog):
        problem = builtin('martingale')
        partition = sub_partition(ensemble.fine, 4)
        solve_explicit(problem, partition, ensemble, ExactEstimator(problem, ensemble), l1_bound=0.5)
        assert 'Mesh ratio' in caplog.text

    def test_regression_estimator_tracks_reference(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        partition = sub_partition(ensemble.fine, 8)
        est = RegressionEstimator(problem, ensemble, RegressionSpec(degree=3))
        solution = solve_explicit(problem, partition, ensemble, est)
        ref_Y, _ = _reference_rows(problem, ensemble, partition)
        assert abs(solution.Y[0, 0] - ref_Y[0, 0]) < 0.06

    def test_fbsde_energy_initial_value(self, ensemble):
        problem = builtin('fbsde_energy', {'x0': 1.0, 'sigma': 0.3})
        partition = sub_partition(ensemble.fine, 8)
        est = RegressionEstimator(problem, ensemble, RegressionSpec(degree=2))
        solution = solve_explicit(problem, partition, ensemble, est)
        # E ∫ (1 + 0.3 W_t)^2 dt = 1 + 0.045
        assert solution.Y[0, 0] == pytest.approx(1.045, abs=0.03)

    def test_smooth_terminal_runs(self, ensemble):
        problem = builtin('smooth_terminal')
        partition = sub_partition(ensemble.fine, 8)
        solution = solve_explicit(problem, partition, ensemble, RegressionEstimator(problem, ensemble, RegressionSpec()))
        assert np.all(np.isfinite(solution.Y)) and np.all(np.isfinite(solution.Z))


class TestImplicit:
    def test_z_free_generator_matches_explicit(self, ensemble):
        problem = builtin('linear_const', {'a': 0.3, 'b': 0.0, 'c': 0.1})
        partition = sub_partition(ensemble.fine, 16)
        est = ExactEstimator(problem, ensemble)
        explicit = solve_explicit(problem, partition, ensemble, est)
        implicit = solve_implicit(problem, partition, ensemble, est)
        np.testing.assert_allclose(implicit.Y, explicit.Y, atol=1e-12)
        np.testing.assert_allclose(implicit.Z[:-1], explicit.Z[:-1], atol=1e-12)

    def test_picard_converges_and_is_monotone_in_n(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        est = ExactEstimator(problem, ensemble)
        maxima = []
        for n in (8, 16, 32):
            solution = solve_implicit(problem, sub_partition(ensemble.fine, n), ensemble, est)
            assert solution.picard_iters.shape == (n,)
            assert np.all(solution.picard_iters >= 1)
            maxima.append(int(solution.picard_iters.max()))
        assert maxima == sorted(maxima, reverse=True)

    def test_picard_ratios_recorded_per_interval(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        est = RegressionEstimator(problem, ensemble, RegressionSpec(degree=2))
        solution = solve_implicit(problem, sub_partition(ensemble.fine, 8), ensemble, est)
        assert len(solution.picard_ratios) == 8
        for iters, ratios in zip(solution.picard_iters, solution.picard_ratios):
            assert len(ratios) <= iters - 1
            assert all(0.0 <= ratio < 1.0 for ratio in ratios)
        assert solve_explicit(problem, sub_partition(ensemble.fine, 8), ensemble, est).picard_ratios == []

    def test_picard_diverged(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        est = ExactEstimator(problem, ensemble)
        with pytest.raises(PicardDiverged) as info:
            solve_implicit(problem, sub_partition(ensemble.fine, 4), ensemble, est,
                           PicardConfig(tol=1e-10, max_iter=1))
        assert info.value.interval == 3
        assert info.value.residual > 1e-10

    def test_picard_config_validation(self):
        with pytest.raises(ValueError):
            PicardConfig(tol=0.0)
        with pytest.raises(ValueError):
            PicardConfig(max_iter=0)

    def test_contraction_scales_with_root_step(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        est = ExactEstimator(problem, ensemble)
        r16 = picard_contraction(problem, sub_partition(ensemble.fine, 16), ensemble, est)
        r32 = picard_contraction(problem, sub_partition(ensemble.fine, 32), ensemble, est)
        assert r16 <= 0.5
        assert r16 == pytest.approx(0.2 * math.sqrt(1 / 16), rel=0.1)
        assert 1.25 <= r16 / r32 <= 1.60

    def test_contraction_inner_interval(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        est = ExactEstimator(problem, ensemble)
        ratio = picard_contraction(problem, sub_partition(ensemble.fine, 8), ensemble, est, interval=3)
        assert ratio == pytest.approx(0.2 * math.sqrt(1 / 8), rel=0.1)


class TestMalliavin:
    def test_linear_const_z(self, ensemble):
        a, b = 0.1, 0.2
        problem = builtin('linear_const', {'a': a, 'b': b})
        for n in (8, 16, 32):
            partition = sub_partition(ensemble.fine, n)
            solution = solve_malliavin(problem, partition, ensemble, ExactEstimator(problem, ensemble))
            times = partition.times
            expected = np.exp(a * (1.0 - times[1:]))
            np.testing.assert_allclose(solution.Z[:-1], np.broadcast_to(expected[:, None], solution.Z[:-1].shape),
                                       atol=1e-12)
            _, ref_Z = _reference_rows(problem, ensemble, partition)
            assert np.max(np.abs(solution.Z - ref_Z)) <= abs(a) * math.exp(abs(a)) / n + 1e-12

    def test_left_point_matches_integral_for_constant_coefficients(self, ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        partition = sub_partition(ensemble.fine, 8)
        est = RegressionEstimator(problem, ensemble, RegressionSpec(degree=2))
        integral = solve_malliavin(problem, partition, ensemble, est, 'integral')
        left = solve_malliavin(problem, partition, ensemble, est, 'left_point')
        np.testing.assert_array_equal(integral.Z, left.Z)

    def test_nested_estimator_martingale(self):
        ens = sample_ensemble(uniform_partition(1.0, 4), 30, seed=3, threads=1)
        problem = builtin('martingale')
        solution = solve_malliavin(problem, ens.fine, ens, NestedEstimator(problem, ens, 16, seed=3, threads=1))
        np.testing.assert_allclose(solution.Z, 1.0)

    def test_preconditions(self, ensemble):
        partition = sub_partition(ensemble.fine, 4)
        smooth = builtin('smooth_terminal')
        with pytest.raises(PreconditionViolated):
            solve_malliavin(smooth, partition, ensemble, RegressionEstimator(smooth, ensemble, RegressionSpec()))
        fbsde = builtin('fbsde_energy', {'x0': 1.0, 'sigma': 0.2})
        with pytest.raises(PreconditionViolated):
            solve_malliavin(fbsde, partition, ensemble, RegressionEstimator(fbsde, ensemble, RegressionSpec()))


class TestDiscreteWeights:
    def test_empty_product(self, ensemble):
        gen = builtin('linear_const', {'a': 0.1, 'b': 0.2}).generator
        partition = sub_partition(ensemble.fine, 8)
        for variant in ('integral', 'left_point'):
            np.testing.assert_array_equal(discrete_weights(gen, ensemble, partition, 3, 3, variant), 1.0)

    def test_deterministic_when_h_is_zero(self, ensemble):
        gen = linear_generator(0.4, 0.0, 0.0)
        partition = sub_partition(ensemble.fine, 8)
        for variant in ('integral', 'left_point'):
            rho = discrete_weights(gen, ensemble, partition, 2, 6, variant)
            np.testing.assert_allclose(rho, math.exp(0.4 * 0.5), rtol=1e-14)

    def test_multiplicative(self, ensemble):
        gen = builtin('linear_const', {'a': 0.1, 'b': 0.2}).generator
        partition = sub_partition(ensemble.fine, 8)
        whole = discrete_weights(gen, ensemble, partition, 1, 7)
        split = discrete_weights(gen, ensemble, partition, 1, 4) * discrete_weights(gen, ensemble, partition, 4, 7)
        np.testing.assert_allclose(whole, split, rtol=1e-13)

    def test_variants_for_time_dependent_coefficients(self, ensemble):
        linear = LinearCoefficients(g=lambda t: 0.1 * t, h=lambda t: 0.2 + 0.1 * t, f1=lambda t: 0.0)
        gen = GeneratorSpec(
            f=lambda t, y, z: 0.1 * t * y + (0.2 + 0.1 * t) * z,
            df_dy=lambda t, y, z: np.full(np.shape(y), 0.1 * t),
            df_dz=lambda t, y, z: np.full(np.shape(z), 0.2 + 0.1 * t),
            lipschitz_L=0.3,
            linear=linear,
        )
        partition = sub_partition(ensemble.fine, 8)
        integral = discrete_weights(gen, ensemble, partition, 0, 8, 'integral')
        left = discrete_weights(gen, ensemble, partition, 0, 8, 'left_point')
        assert not np.array_equal(integral, left)
        np.testing.assert_allclose(integral, left, rtol=0.1)
        split = discrete_weights(gen, ensemble, partition, 0, 3, 'integral') * \
            discrete_weights(gen, ensemble, partition, 3, 8, 'integral')
        np.testing.assert_allclose(integral, split, rtol=1e-12)

    def test_rejects_bad_indices_and_nonlinear(self, ensemble):
        partition = sub_partition(ensemble.fine, 8)
        with pytest.raises(PreconditionViolated):
            discrete_weights(builtin('martingale').generator, ensemble, partition, 5, 2)
        with pytest.raises(PreconditionViolated):
            discrete_weights(builtin('smooth_terminal').generator, ensemble, partition, 0, 2)


class TestMeasurability:
    def test_identical_states_give_identical_values(self):
        fine = uniform_partition(1.0, 8)
        base = sample_ensemble(fine, 400, seed=13, threads=1)
        increments = base.increments.copy()
        increments[1, :4] = increments[0, :4]
        ens = PathEnsemble(fine=fine, n_paths=400, seed=13, increments=increments)
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        for est in (ExactEstimator(problem, ens), RegressionEstimator(problem, ens, RegressionSpec(degree=2))):
            solution = solve_explicit(problem, fine, ens, est)
            for i in range(5):
                assert solution.Y[i, 0] == solution.Y[i, 1]
                assert solution.Z[i, 0] == solution.Z[i, 1]

    def test_make_estimator_plumbs_through_solve(self, ensemble):
        problem = builtin('martingale')
        est = make_estimator('exact', problem, ensemble)
        solution = solve('explicit', problem, sub_partition(ensemble.fine, 4), ensemble, est)
        assert solution.scheme == 'explicit'
        assert solution.picard_iters is None
