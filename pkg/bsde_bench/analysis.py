"""Error norms against reference solutions, regularity statistics and rate fits."""

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import stats

from .paths import Partition, PathEnsemble, coarsen, mesh_stats, subset_indices
from .problems import BsdeProblem, GeneratorSpec, ReferenceSolution
from .schemes import DiscreteSolution
from .utils import get_logger

logger = get_logger(__name__)

N_BATCHES = 10


class NoReferenceError(ValueError):
    """The problem has no closed-form reference solution."""


class TooFewLevelsError(ValueError):
    """A rate fit needs at least three levels with positive error."""


@dataclass(frozen=True)
class ErrorReport:
    p: float
    err_Y_max_p: float
    err_Y_stderr: float
    err_Z_int_L2: float
    err_Z_stderr: float
    err_max_joint_p: float
    err_joint_stderr: float
    n_paths: int
    mesh: float


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    levels: List[Tuple[float, float]]
    excluded: List[Tuple[float, float]] = field(default_factory=list)


def _require_reference(problem: BsdeProblem) -> ReferenceSolution:
    if problem.reference is None:
        raise NoReferenceError(f"Problem '{problem.name}' has no reference solution")
    return problem.reference


def _power_mean(per_path: np.ndarray, p: float) -> float:
    return float(np.mean(per_path) ** (1.0 / p))


def _batch_stderr(per_path: np.ndarray, p: float) -> float:
    """Standard error of the power-mean statistic from contiguous path batches."""
    batches = min(N_BATCHES, per_path.size)
    if batches < 2:
        return 0.0
    estimates = [_power_mean(chunk, p) for chunk in np.array_split(per_path, batches)]
    return float(np.std(estimates, ddof=1) / math.sqrt(batches))


def _reference_rows(reference: ReferenceSolution, ensemble: PathEnsemble, indices: np.ndarray):
    W, fine = ensemble.W, ensemble.fine
    Y = np.stack([reference.Y(W, fine, int(k)) for k in indices])
    Z = np.stack([reference.Z(W, fine, int(k)) for k in indices])
    return Y, Z


def error_report(
    solution: DiscreteSolution,
    problem: BsdeProblem,
    ensemble: PathEnsemble,
    p: float = 2.0
) -> ErrorReport:
    """
    Grid-point error norms of a scheme solution:

        err_Y_max_p      (E max_i |δY_i|^p)^{1/p}
        err_Z_int_L2     (Σ_{i<n} Δ_i E|δZ_i|^2)^{1/2}
        err_max_joint_p  (E max_i {|δY_i|^p + |δZ_i|^p})^{1/p}

    The joint norm includes the terminal Z only when the scheme defines it.
    """
    reference = _require_reference(problem)
    partition = solution.partition
    view = coarsen(ensemble, partition)
    ref_Y, ref_Z = _reference_rows(reference, ensemble, view.indices)

    dY = np.abs(solution.Y - ref_Y) ** p
    dZ_abs = np.abs(solution.Z - ref_Z)

    y_stat = dY.max(axis=0)
    z_stat = (partition.steps[:, None] * dZ_abs[:-1] ** 2).sum(axis=0)
    joint = dY.copy()
    z_rows = partition.n + 1 if solution.z_terminal_defined else partition.n
    joint[:z_rows] += dZ_abs[:z_rows] ** p
    joint_stat = joint.max(axis=0)

    return ErrorReport(
        p=p,
        err_Y_max_p=_power_mean(y_stat, p),
        err_Y_stderr=_batch_stderr(y_stat, p),
        err_Z_int_L2=_power_mean(z_stat, 2.0),
        err_Z_stderr=_batch_stderr(z_stat, 2.0),
        err_max_joint_p=_power_mean(joint_stat, p),
        err_joint_stderr=_batch_stderr(joint_stat, p),
        n_paths=ensemble.n_paths,
        mesh=mesh_stats(partition).mesh,
    )


def fit_rate(levels: Sequence[Tuple[float, float]]) -> RateFit:
    """Least-squares line through (log mesh, log error); zero-error levels are excluded."""
    used = [(float(m), float(e)) for m, e in levels if e > 0]
    excluded = [(float(m), float(e)) for m, e in levels if not e > 0]
    if excluded:
        logger.warning(f"Excluding {len(excluded)} zero-error level(s) from the rate fit")
    if len(used) < 3:
        raise TooFewLevelsError(f"Rate fit needs at least 3 levels with positive error, got {len(used)}")
    mesh, error = np.log(np.array(used)).T
    fit = stats.linregress(mesh, error)
    return RateFit(
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=float(fit.rvalue ** 2),
        levels=used,
        excluded=excluded,
    )


def holder_statistic(Z: np.ndarray, partition: Partition, p: float = 2.0) -> float:
    """K̂ = max over grid pairs s < t of mean|Z_t - Z_s|^p / (t - s)^{p/2}; rows of Z are grid points."""
    if p < 2:
        raise ValueError(f"Hölder statistic needs p >= 2, got {p}")
    Z = np.asarray(Z, dtype=float)
    times = partition.times
    if Z.shape[0] != times.size:
        raise ValueError(f"Z has {Z.shape[0]} rows for {times.size} grid points")
    best = 0.0
    for s in range(times.size - 1):
        moments = np.mean(np.abs(Z[s + 1:] - Z[s]) ** p, axis=1)
        best = max(best, float(np.max(moments / (times[s + 1:] - times[s]) ** (p / 2.0))))
    return best


def l2_regularity_statistic(z_fine: np.ndarray, fine: Partition, coarse: Partition) -> float:
    """
    S(π) = Σ_i Σ_{t_k in [t_i, t_{i+1})} (E|Z_{t_k} - Z_{t_i}|^2 + E|Z_{t_k} - Z_{t_{i+1}}|^2) δt_k
    on the fine grid; rows of z_fine are fine grid points.
    """
    indices = subset_indices(fine, coarse)
    steps = fine.steps
    total = 0.0
    for i in range(coarse.n):
        lo, hi = indices[i], indices[i + 1]
        block = z_fine[lo:hi]
        left = np.mean((block - z_fine[lo]) ** 2, axis=1)
        right = np.mean((block - z_fine[hi]) ** 2, axis=1)
        total += float(np.sum((left + right) * steps[lo:hi]))
    return total


def reference_z_grid(problem: BsdeProblem, ensemble: PathEnsemble) -> np.ndarray:
    """Reference Z at every fine grid point, [(fine.n + 1) x n_paths]."""
    reference = _require_reference(problem)
    return np.stack([reference.Z(ensemble.W, ensemble.fine, k) for k in range(ensemble.fine.n + 1)])


def bsde_residual(problem: BsdeProblem, ensemble: PathEnsemble, partition: Partition) -> float:
    """
    RMS over paths of Y_0 - Y_T - Σ f(t_i, Y_i, Z_i) Δ_i + Σ Z_i ΔW_i on the
    reference solution; shrinks like the square root of the mesh.
    """
    reference = _require_reference(problem)
    view = coarsen(ensemble, partition)
    Y, Z = _reference_rows(reference, ensemble, view.indices)
    f = problem.generator.f
    drift = sum(f(float(partition.times[i]), Y[i], Z[i]) * partition.steps[i] for i in range(partition.n))
    martingale = np.sum(Z[:-1] * view.increments.T, axis=0)
    residual = Y[0] - Y[-1] - drift + martingale
    return float(np.sqrt(np.mean(residual ** 2)))


def terminal_gap(problem: BsdeProblem, ensemble: PathEnsemble, partition: Partition, p: float = 2.0) -> float:
    """(E|ξ - ξ^π|^p)^{1/p} with ξ^π evaluated on the coarse path."""
    view = coarsen(ensemble, partition)
    fine_xi = problem.terminal.xi(ensemble.W, ensemble.fine)
    coarse_xi = problem.terminal.xi(view.W, partition)
    return _power_mean(np.abs(fine_xi - coarse_xi) ** p, p)


def log_corrected_exponent(mesh: float, p: float = 2.0) -> float:
    """Mesh exponent p/2 - p/(2 log(1/|π|)) of the Malliavin-scheme bound."""
    if not 0.0 < mesh < 1.0:
        raise ValueError(f"Log-corrected exponent needs 0 < mesh < 1, got {mesh}")
    return p / 2.0 - p / (2.0 * math.log(1.0 / mesh))


def grid_reference(solution: DiscreteSolution, ensemble: PathEnsemble) -> ReferenceSolution:
    """
    Wrap a solution on the ensemble's fine grid as a reference for coarser
    solutions of the same ensemble; used when a problem has no closed form.
    """
    if not np.array_equal(solution.partition.times, ensemble.fine.times):
        raise ValueError("Grid reference must be solved on the ensemble's fine grid")
    if solution.Y.shape[1] != ensemble.n_paths:
        raise ValueError(f"Grid reference has {solution.Y.shape[1]} paths, ensemble has {ensemble.n_paths}")
    Y, Z = solution.Y, solution.Z
    return ReferenceSolution(Y=lambda W, fine, k: Y[k], Z=lambda W, fine, k: Z[k])


def generator_time_term(generator: GeneratorSpec, partition: Partition) -> float:
    """L2 sqrt(|π|): error from evaluating f at the right end of each interval."""
    return generator.time_holder_L2 * math.sqrt(mesh_stats(partition).mesh)
