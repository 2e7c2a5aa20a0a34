"""Tests for error norms, rate fits and regularity statistics."""

import dataclasses
import math

import numpy as np
import pytest

from bsde_bench.analysis import (
    NoReferenceError,
    TooFewLevelsError,
    bsde_residual,
    error_report,
    fit_rate,
    generator_time_term,
    grid_reference,
    holder_statistic,
    l2_regularity_statistic,
    log_corrected_exponent,
    reference_z_grid,
    terminal_gap,
)
from bsde_bench.condexp import ExactEstimator
from bsde_bench.paths import Partition, coarsen, sample_ensemble, sub_partition, uniform_partition
from bsde_bench.problems import GeneratorSpec, builtin
from bsde_bench.schemes import DiscreteSolution, solve_explicit, solve_implicit, solve_malliavin


@pytest.fixture(scope='module')
def ensemble():
    return sample_ensemble(uniform_partition(1.0, 64), 2000, seed=17, threads=2)


@pytest.fixture(scope='module')
def wide_ensemble():
    return sample_ensemble(uniform_partition(1.0, 16), 20000, seed=5, threads=2)


def _copied_reference(problem, ensemble, partition, scheme='explicit'):
    view = coarsen(ensemble, partition)
    W, fine = ensemble.W, ensemble.fine
    Y = np.stack([problem.reference.Y(W, fine, int(k)) for k in view.indices])
    Z = np.stack([problem.reference.Z(W, fine, int(k)) for k in view.indices])
    return DiscreteSolution(partition=partition, Y=Y, Z=Z, scheme=scheme)


class TestErrorReport:
    def test_reference_has_zero_error(self, ensemble):
        problem = builtin('quadratic')
        partition = sub_partition(ensemble.fine, 8)
        report = error_report(_copied_reference(problem, ensemble, partition, 'malliavin'), problem, ensemble)
        assert report.err_Y_max_p == 0.0
        assert report.err_Z_int_L2 == 0.0
        assert report.err_max_joint_p == 0.0
        assert report.mesh == pytest.approx(0.125)
        assert report.n_paths == 2000

    def test_martingale_exact_scheme(self, ensemble):
        problem = builtin('martingale')
        partition = sub_partition(ensemble.fine, 16)
        solution = solve_explicit(problem, partition, ensemble, ExactEstimator(problem, ensemble))
        report = error_report(solution, problem, ensemble)
        assert report.err_Y_max_p <= 1e-12
        assert report.err_Z_int_L2 <= 1e-12

    def test_linear_const_error_decreases(self, ensemble):
        problem = builtin('linear_const', {'a': 0.5, 'b': 0.5, 'c': 0.2})
        est = ExactEstimator(problem, ensemble)
        errors = []
        for n in (8, 16, 32, 64):
            solution = solve_explicit(problem, sub_partition(ensemble.fine, n), ensemble, est)
            errors.append(error_report(solution, problem, ensemble).err_Y_max_p)
        assert all(later < earlier for earlier, later in zip(errors, errors[1:]))

    def test_norm_is_monotone_in_p(self, ensemble):
        problem = builtin('linear_const', {'a': 0.5, 'b': 0.5})
        partition = sub_partition(ensemble.fine, 8)
        solution = solve_explicit(problem, partition, ensemble, ExactEstimator(problem, ensemble))
        reports = [error_report(solution, problem, ensemble, p) for p in (2.0, 3.0, 4.0)]
        values = [r.err_Y_max_p for r in reports]
        assert values == sorted(values)
        assert all(r.err_Y_stderr >= 0.0 for r in reports)

    def test_joint_norm_skips_undefined_terminal_z(self, ensemble):
        problem = builtin('quadratic')
        partition = sub_partition(ensemble.fine, 4)
        solution = _copied_reference(problem, ensemble, partition)
        Z = solution.Z.copy()
        Z[-1] = 0.0
        explicit = DiscreteSolution(partition=partition, Y=solution.Y, Z=Z, scheme='explicit')
        malliavin = DiscreteSolution(partition=partition, Y=solution.Y, Z=Z, scheme='malliavin')
        assert error_report(explicit, problem, ensemble).err_max_joint_p == 0.0
        assert error_report(malliavin, problem, ensemble).err_max_joint_p > 0.0

    def test_no_reference(self, ensemble):
        problem = builtin('smooth_terminal')
        partition = sub_partition(ensemble.fine, 4)
        solution = DiscreteSolution(partition=partition, Y=np.zeros((5, 2000)), Z=np.zeros((5, 2000)),
                                    scheme='explicit')
        with pytest.raises(NoReferenceError):
            error_report(solution, problem, ensemble)


class TestFitRate:
    @pytest.mark.parametrize('slope', [1.0, 0.5, 0.0])
    def test_recovers_power_law(self, slope):
        levels = [(2.0 ** -k, 3.0 * (2.0 ** -k) ** slope) for k in range(2, 7)]
        fit = fit_rate(levels)
        assert fit.slope == pytest.approx(slope, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
        assert fit.excluded == []

    def test_scale_invariant(self):
        levels = [(2.0 ** -k, (2.0 ** -k) ** 0.8 * (1 + 0.1 * k)) for k in range(2, 6)]
        scaled = [(m, 7.0 * e) for m, e in levels]
        assert fit_rate(scaled).slope == pytest.approx(fit_rate(levels).slope, abs=1e-12)

    def test_zero_errors_excluded(self):
        levels = [(0.5, 0.5), (0.25, 0.25), (0.125, 0.0), (0.0625, 0.0625)]
        fit = fit_rate(levels)
        assert fit.excluded == [(0.125, 0.0)]
        assert fit.slope == pytest.approx(1.0)

    def test_too_few_levels(self):
        with pytest.raises(TooFewLevelsError):
            fit_rate([(0.5, 1.0), (0.25, 0.5)])
        with pytest.raises(TooFewLevelsError):
            fit_rate([(0.5, 1.0), (0.25, 0.0), (0.125, 0.0)])


class TestRegularity:
    def test_holder_quadratic(self, wide_ensemble):
        Z = reference_z_grid(builtin('quadratic'), wide_ensemble)
        fine = wide_ensemble.fine
        assert holder_statistic(Z, fine, 2.0) == pytest.approx(4.0, rel=0.1)
        assert holder_statistic(Z, fine, 4.0) == pytest.approx(48.0, rel=0.15)

    def test_holder_constant_is_zero(self, wide_ensemble):
        Z = reference_z_grid(builtin('martingale'), wide_ensemble)
        assert holder_statistic(Z, wide_ensemble.fine) == 0.0

    def test_holder_time_reversal(self, wide_ensemble):
        fine = wide_ensemble.fine
        Z = reference_z_grid(builtin('quadratic'), wide_ensemble)
        reversed_grid = Partition.from_times(fine.horizon - fine.times[::-1])
        assert holder_statistic(Z[::-1], reversed_grid, 2.0) == pytest.approx(holder_statistic(Z, fine, 2.0),
                                                                             rel=1e-9)

    def test_holder_rejects_small_p(self, wide_ensemble):
        with pytest.raises(ValueError):
            holder_statistic(np.zeros((17, 3)), wide_ensemble.fine, 1.0)

    def test_l2_regularity_scales_with_mesh(self, wide_ensemble):
        fine = wide_ensemble.fine
        Z = reference_z_grid(builtin('quadratic'), wide_ensemble)
        coarse4 = l2_regularity_statistic(Z, fine, sub_partition(fine, 4))
        coarse8 = l2_regularity_statistic(Z, fine, sub_partition(fine, 8))
        assert coarse4 == pytest.approx(4.0 * 0.25, rel=0.05)
        assert 1.7 <= coarse4 / coarse8 <= 2.3


class TestDiagnostics:
    def test_bsde_residual_shrinks(self, ensemble):
        problem = builtin('linear_const', {'a': 0.5, 'b': 0.5})
        coarse = bsde_residual(problem, ensemble, sub_partition(ensemble.fine, 4))
        fine = bsde_residual(problem, ensemble, sub_partition(ensemble.fine, 64))
        assert fine < coarse

    def test_bsde_residual_root_mesh_law(self, ensemble):
        # for the quadratic problem the residual is T - Σ ΔW_i^2, RMS sqrt(2 T |π|)
        problem = builtin('quadratic')
        levels = []
        for n in (4, 8, 16, 32, 64):
            partition = sub_partition(ensemble.fine, n)
            residual = bsde_residual(problem, ensemble, partition)
            assert residual == pytest.approx(math.sqrt(2.0 / n), rel=0.1)
            levels.append((1.0 / n, residual))
        assert fit_rate(levels).slope == pytest.approx(0.5, abs=0.1)

    def test_bsde_residual_zero_for_martingale(self, ensemble):
        assert bsde_residual(builtin('martingale'), ensemble, sub_partition(ensemble.fine, 8)) <= 1e-12

    def test_terminal_gap(self, ensemble):
        partition = sub_partition(ensemble.fine, 4)
        assert terminal_gap(builtin('quadratic'), ensemble, partition) == 0.0
        gap = terminal_gap(builtin('fbsde_energy', {'x0': 1.0, 'sigma': 0.5}), ensemble, partition)
        assert gap > 0.0

    def test_log_corrected_exponent(self):
        assert log_corrected_exponent(math.exp(-2.0), 2.0) == pytest.approx(0.5)
        assert log_corrected_exponent(1e-3) < 1.0
        with pytest.raises(ValueError):
            log_corrected_exponent(1.0)

    def test_generator_time_term(self):
        partition = uniform_partition(1.0, 16)
        assert generator_time_term(builtin('smooth_terminal').generator, partition) == 0.0
        zero = lambda t, y, z: 0.0 * y
        rough = GeneratorSpec(f=zero, df_dy=zero, df_dz=zero, lipschitz_L=0.0, time_holder_L2=2.0)
        assert generator_time_term(rough, partition) == pytest.approx(0.5)


class TestGridReference:
    def test_fine_solution_has_zero_error_against_itself(self, ensemble):
        problem = builtin('linear_const', {'a': 0.5, 'b': 0.5})
        est = ExactEstimator(problem, ensemble)
        fine_solution = solve_explicit(problem, ensemble.fine, ensemble, est)
        scored = dataclasses.replace(problem, reference=grid_reference(fine_solution, ensemble))
        report = error_report(fine_solution, scored, ensemble)
        assert report.err_Y_max_p == 0.0
        assert report.err_Z_int_L2 == 0.0

    def test_coarse_errors_shrink_towards_fine_solution(self, ensemble):
        problem = builtin('linear_const', {'a': 0.5, 'b': 0.5})
        est = ExactEstimator(problem, ensemble)
        reference = grid_reference(solve_explicit(problem, ensemble.fine, ensemble, est), ensemble)
        scored = dataclasses.replace(problem, reference=reference)
        errors = [error_report(solve_explicit(problem, sub_partition(ensemble.fine, n), ensemble, est),
                               scored, ensemble).err_Y_max_p for n in (4, 8, 16)]
        assert all(e > 0.0 for e in errors)
        assert errors[0] > errors[1] > errors[2]

    def test_rejects_coarse_solution(self, ensemble):
        problem = builtin('martingale')
        coarse = solve_explicit(problem, sub_partition(ensemble.fine, 8), ensemble, ExactEstimator(problem, ensemble))
        with pytest.raises(ValueError):
            grid_reference(coarse, ensemble)


@pytest.fixture(scope='module')
def rate_ensemble():
    return sample_ensemble(uniform_partition(1.0, 128), 2000, seed=11, threads=2)


def _ladder_fit(solver, problem, ensemble, p, norm):
    est = ExactEstimator(problem, ensemble)
    levels = []
    for n in (8, 16, 32, 64):
        solution = solver(problem, sub_partition(ensemble.fine, n), ensemble, est)
        levels.append((1.0 / n, getattr(error_report(solution, problem, ensemble, p), norm)))
    return fit_rate(levels)


class TestLadderRates:
    def test_explicit_rate(self, rate_ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        fit = _ladder_fit(solve_explicit, problem, rate_ensemble, 2.0, 'err_Y_max_p')
        assert fit.slope >= 0.45
        assert fit.r_squared >= 0.98

    @pytest.mark.parametrize('p', [2.0, 4.0])
    def test_implicit_rate(self, rate_ensemble, p):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        fit = _ladder_fit(solve_implicit, problem, rate_ensemble, p, 'err_Y_max_p')
        assert fit.slope >= 0.45

    def test_malliavin_joint_rate(self, rate_ensemble):
        problem = builtin('linear_const', {'a': 0.1, 'b': 0.2})
        fit = _ladder_fit(solve_malliavin, problem, rate_ensemble, 2.0, 'err_max_joint_p')
        assert fit.slope >= 0.40
