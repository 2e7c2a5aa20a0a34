"""Backward time-stepping solvers: explicit, implicit (Picard) and Malliavin-weight schemes."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from .condexp import Estimator, PathFunctional, StepContext, StepTarget
from .paths import Partition, PathEnsemble, coarsen, mesh_stats
from .problems import (
    BsdeProblem,
    GeneratorSpec,
    LinearCoefficients,
    eval_terminal,
    fine_rho_exponents,
    malliavin_terminal,
)
from .utils import get_logger

logger = get_logger(__name__)


class PicardDiverged(RuntimeError):
    """Picard iteration hit max_iter with the residual above tol."""

    def __init__(self, interval: int, residual: float, max_iter: int):
        self.interval = interval
        self.residual = residual
        self.max_iter = max_iter
        super().__init__(
            f"Picard iteration on interval {interval} did not converge in {max_iter} "
            f"iterations (residual {residual:.3e}); the step is too large for the contraction bound"
        )


class PreconditionViolated(ValueError):
    """The problem does not satisfy the structural requirements of the scheme."""


class SchemeKind(str, Enum):
    EXPLICIT = 'explicit'
    IMPLICIT = 'implicit'
    MALLIAVIN = 'malliavin'


class WeightVariant(str, Enum):
    INTEGRAL = 'integral'
    LEFT_POINT = 'left_point'


@dataclass(frozen=True)
class PicardConfig:
    tol: float = 1e-10
    max_iter: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"Picard tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"Picard max_iter must be >= 1, got {self.max_iter}")


@dataclass
class DiscreteSolution:
    """
    Scheme output on a partition; rows are grid points, columns paths.

    Z at t_n follows the scheme: 0 (explicit), D_Tξ (Malliavin), the last
    interval value (implicit).
    """
    partition: Partition
    Y: np.ndarray
    Z: np.ndarray
    scheme: str
    picard_iters: Optional[np.ndarray] = None
    picard_ratios: List[List[float]] = field(default_factory=list)

    @property
    def z_terminal_defined(self) -> bool:
        return self.scheme == SchemeKind.MALLIAVIN.value


def _ensemble_l2(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(values * values)))


def _start(problem: BsdeProblem, partition: Partition, ensemble: PathEnsemble):
    view = coarsen(ensemble, partition)
    n = partition.n
    Y = np.empty((n + 1, ensemble.n_paths))
    Z = np.zeros((n + 1, ensemble.n_paths))
    Y[n] = eval_terminal(problem, ensemble)
    return view, Y, Z


def _check_mesh_ratio(partition: Partition, l1_bound: Optional[float]) -> None:
    if l1_bound is None:
        return
    ratio = mesh_stats(partition).max_ratio
    if ratio > l1_bound:
        logger.warning(f"Mesh ratio {ratio:.4g} exceeds the configured bound L1={l1_bound:.4g}")


def solve_explicit(
    problem: BsdeProblem,
    partition: Partition,
    ensemble: PathEnsemble,
    estimator: Estimator,
    l1_bound: Optional[float] = None
) -> DiscreteSolution:
    """
    Explicit scheme with Z̄_n = 0:

        M = Y_{i+1} + f(t_{i+1}, Y_{i+1}, Z̄_{i+1}) Δ_i
        Z̄_i = E(M ΔW_i | F_{t_i}) / Δ_i,   Y_i = E(M | F_{t_i})
    """
    _check_mesh_ratio(partition, l1_bound)
    view, Y, Z = _start(problem, partition, ensemble)
    times = partition.times
    f = problem.generator.f

    for i in reversed(range(partition.n)):
        step = StepContext(i, view, Y[i + 1], Z[i + 1])
        target = StepTarget(f, float(times[i + 1]), float(times[i + 1] - times[i]))
        Z[i] = estimator.expect_increment(step, target)
        Y[i] = estimator.expect(step, target)

    logger.info(f"Explicit scheme: {problem.name}, n={partition.n}, paths={ensemble.n_paths}")
    return DiscreteSolution(partition=partition, Y=Y, Z=Z, scheme=SchemeKind.EXPLICIT.value)


def solve_implicit(
    problem: BsdeProblem,
    partition: Partition,
    ensemble: PathEnsemble,
    estimator: Estimator,
    picard: Optional[PicardConfig] = None
) -> DiscreteSolution:
    """
    Implicit scheme; on each interval z_i is the fixed point of

        z -> E((Y_{i+1} + f(t_{i+1}, Y_{i+1}, z) Δ_i) ΔW_i | F_{t_i}) / Δ_i

    found by Picard iteration from the warm start z_{i+1} (0 on the last interval).
    picard_iters[i] counts applications of the map on interval i.
    """
    picard = picard or PicardConfig()
    view, Y, Z = _start(problem, partition, ensemble)
    times = partition.times
    f = problem.generator.f
    n = partition.n
    iters = np.zeros(n, dtype=int)
    ratios: List[List[float]] = [[] for _ in range(n)]

    for i in reversed(range(n)):
        step = StepContext(i, view, Y[i + 1], Z[i + 1])
        t_next, dt = float(times[i + 1]), float(times[i + 1] - times[i])
        z = Z[i + 1].copy() if i < n - 1 else np.zeros(ensemble.n_paths)

        previous_residual = None
        for k in range(1, picard.max_iter + 1):
            z_new = estimator.expect_increment(step, StepTarget(f, t_next, dt, z_current=z))
            residual = _ensemble_l2(z_new - z)
            z = z_new
            iters[i] = k
            if previous_residual:
                ratios[i].append(residual / previous_residual)
            previous_residual = residual
            logger.debug(f"Picard interval {i} iteration {k}: residual {residual:.3e}")
            if residual <= picard.tol:
                break
        else:
            raise PicardDiverged(i, residual, picard.max_iter)

        Z[i] = z
        Y[i] = estimator.expect(step, StepTarget(f, t_next, dt, z_current=z))

    Z[n] = Z[n - 1]
    logger.info(
        f"Implicit scheme: {problem.name}, n={n}, paths={ensemble.n_paths}, "
        f"max Picard iterations={int(iters.max())}"
    )
    return DiscreteSolution(
        partition=partition, Y=Y, Z=Z, scheme=SchemeKind.IMPLICIT.value,
        picard_iters=iters, picard_ratios=ratios
    )


def _require_weights(generator: GeneratorSpec) -> LinearCoefficients:
    if not generator.is_deterministic:
        raise PreconditionViolated("Malliavin weights need a deterministic generator")
    if generator.linear is None:
        raise PreconditionViolated("Malliavin weights need a generator linear in (y, z)")
    return generator.linear


def path_weights(
    linear: LinearCoefficients,
    W: np.ndarray,
    fine: Partition,
    indices: np.ndarray,
    i: int,
    j: int,
    variant: str = 'integral'
) -> np.ndarray:
    """
    ρ^π_{t_i, t_j} for fine-grid paths W and coarse nodes at fine indices.

    integral:   dW-sum on the fine grid, ds-integral exact or trapezoid
    left_point: coefficients frozen at each coarse node t_k
    With constant coefficients both variants are b ΔW + (a - b^2/2) Δ.
    """
    variant = WeightVariant(variant)
    if i == j:
        return np.ones(W.shape[0])
    lo, hi = int(indices[i]), int(indices[j])
    if linear.is_constant:
        a, b, _ = linear.constant
        span = float(fine.times[hi] - fine.times[lo])
        return np.exp(b * (W[:, hi] - W[:, lo]) + (a - 0.5 * b * b) * span)
    if variant is WeightVariant.INTEGRAL:
        return np.exp(fine_rho_exponents(linear, W, fine)[:, lo:hi].sum(axis=1))
    exponent = np.zeros(W.shape[0])
    for k in range(i, j):
        t_k = float(fine.times[indices[k]])
        dt_k = float(fine.times[indices[k + 1]]) - t_k
        h_k = linear.h(t_k)
        exponent += h_k * (W[:, indices[k + 1]] - W[:, indices[k]]) + (linear.g(t_k) - 0.5 * h_k * h_k) * dt_k
    return np.exp(exponent)


def discrete_weights(
    generator: GeneratorSpec,
    ensemble: PathEnsemble,
    partition: Partition,
    i: int,
    j: int,
    variant: str = 'integral'
) -> np.ndarray:
    """Per-path discrete stochastic exponential ρ^π_{t_i, t_j}, i <= j."""
    if not 0 <= i <= j <= partition.n:
        raise PreconditionViolated(f"Need 0 <= i <= j <= {partition.n}, got ({i}, {j})")
    linear = _require_weights(generator)
    view = coarsen(ensemble, partition)
    return path_weights(linear, ensemble.W, ensemble.fine, view.indices, i, j, variant)


def solve_malliavin(
    problem: BsdeProblem,
    partition: Partition,
    ensemble: PathEnsemble,
    estimator: Estimator,
    weight_variant: str = 'integral'
) -> DiscreteSolution:
    """
    Malliavin-weight scheme for deterministic generators linear in (y, z):

        Y_i = E(Y_{i+1} + f(t_{i+1}, Y_{i+1}, Z_{i+1}) Δ_i | F_{t_i})
        Z_i = E(ρ^π_{t_{i+1}, t_n} D_{t_i}ξ | F_{t_i})

    with Y_n = ξ and Z_n = D_Tξ.
    """
    linear = _require_weights(problem.generator)
    d_xi = problem.terminal.d_xi
    if d_xi is None:
        raise PreconditionViolated(f"Problem '{problem.name}' has no Malliavin derivative of ξ")
    variant = WeightVariant(weight_variant).value

    view, Y, Z = _start(problem, partition, ensemble)
    times = partition.times
    indices = view.indices
    n = partition.n
    Z[n] = malliavin_terminal(problem, ensemble, partition.horizon)

    for i in reversed(range(n)):
        step = StepContext(i, view, Y[i + 1], Z[i + 1])
        t_i, t_next = float(times[i]), float(times[i + 1])

        def weighted_derivative(W, fine, i=i, t_i=t_i):
            return path_weights(linear, W, fine, indices, i + 1, n, variant) * d_xi(W, fine, t_i)

        functional = PathFunctional(weighted_derivative, tag='terminal_derivative', params={'s': t_next})
        Z[i] = estimator.expect_functional(step, functional)
        Y[i] = estimator.expect(step, StepTarget(problem.generator.f, t_next, t_next - t_i))

    logger.info(
        f"Malliavin scheme ({variant} weights): {problem.name}, n={n}, paths={ensemble.n_paths}"
    )
    return DiscreteSolution(partition=partition, Y=Y, Z=Z, scheme=SchemeKind.MALLIAVIN.value)


def picard_contraction(
    problem: BsdeProblem,
    partition: Partition,
    ensemble: PathEnsemble,
    estimator: Estimator,
    interval: int = -1,
    epsilon: float = 1e-3,
    picard: Optional[PicardConfig] = None
) -> float:
    """
    Lipschitz ratio of the implicit one-interval map on interval `interval`.

    The map is perturbed at its fixed point along η = ΔW_i/sqrt(Δ_i):
    |Φ(z + εη) - Φ(z)| / |εη| in ensemble L2. For f linear in z with slope b
    this equals |b| sqrt(Δ_i).
    """
    n = partition.n
    i = interval % n
    if i == n - 1:
        view, Y, Z = _start(problem, partition, ensemble)
        y_next, z_next = Y[n], Z[n]
        z = None
    else:
        solution = solve_implicit(problem, partition, ensemble, estimator, picard)
        view = coarsen(ensemble, partition)
        y_next, z_next = solution.Y[i + 1], solution.Z[i + 1]
        z = solution.Z[i]

    step = StepContext(i, view, y_next, z_next)
    t_next, dt = float(partition.times[i + 1]), float(partition.steps[i])
    f = problem.generator.f
    if z is None:
        z = estimator.expect_increment(step, StepTarget(f, t_next, dt, z_current=np.zeros(ensemble.n_paths)))

    direction = epsilon * step.dw / math.sqrt(dt)
    base = estimator.expect_increment(step, StepTarget(f, t_next, dt, z_current=z))
    moved = estimator.expect_increment(step, StepTarget(f, t_next, dt, z_current=z + direction))
    return _ensemble_l2(moved - base) / _ensemble_l2(direction)


def solve(
    kind: str,
    problem: BsdeProblem,
    partition: Partition,
    ensemble: PathEnsemble,
    estimator: Estimator,
    picard: Optional[PicardConfig] = None,
    weight_variant: str = 'integral',
    l1_bound: Optional[float] = None
) -> DiscreteSolution:
    """Dispatch to the scheme named by kind."""
    kind = SchemeKind(kind)
    if kind is SchemeKind.EXPLICIT:
        return solve_explicit(problem, partition, ensemble, estimator, l1_bound)
    _check_mesh_ratio(partition, l1_bound)
    if kind is SchemeKind.IMPLICIT:
        return solve_implicit(problem, partition, ensemble, estimator, picard)
    return solve_malliavin(problem, partition, ensemble, estimator, weight_variant)
