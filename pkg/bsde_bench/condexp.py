"""
Conditional expectation estimators E(V | F_{t_i}).

Three estimators share the interface used by the schemes:

    expect(step, target)              E(M | F_{t_i})
    expect_increment(step, target)    E(M ΔW_i | F_{t_i}) / Δ_i
    expect_functional(step, func)     E(F(W) | F_{t_i}) for a path functional F

where M is a StepTarget evaluated on next-node values.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from numpy.polynomial import hermite_e, polynomial

from .paths import CoarseView, Partition, PathEnsemble, branch_paths, map_paths, one_step_normals
from .problems import BsdeProblem, Evaluator, ExactSpec, brownian_state
from .utils import get_logger

logger = get_logger(__name__)

# fit residual allowed by the exact estimator, relative to 1 + max|values|
EXACT_RESIDUAL_TOL = 1e-8


class UnsupportedFunctionalError(ValueError):
    """The closed-form operator does not apply to the requested functional."""


class UnsupportedEstimatorError(ValueError):
    """The estimator cannot serve this problem."""


@dataclass(frozen=True)
class RegressionSpec:
    degree: int = 4
    ridge: float = 1e-10
    basis: str = 'monomial'

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"Regression degree must be >= 0, got {self.degree}")
        if self.ridge < 0:
            raise ValueError(f"Ridge must be >= 0, got {self.ridge}")
        if self.basis not in ('monomial', 'hermite'):
            raise ValueError(f"Unknown basis family '{self.basis}'")


class EstimatorKind(str, Enum):
    EXACT = 'exact'
    LSMC = 'lsmc'
    NESTED = 'nested'


def _multi_indices(dims: int, degree: int) -> List[Tuple[int, ...]]:
    """Exponent tuples of total degree <= degree, constant first."""
    indices = [idx for idx in itertools.product(range(degree + 1), repeat=dims) if sum(idx) <= degree]
    return sorted(indices, key=lambda idx: (sum(idx), tuple(-i for i in idx)))


def _basis_matrix(states: np.ndarray, degree: int, family: str) -> np.ndarray:
    vander = hermite_e.hermevander if family == 'hermite' else polynomial.polyvander
    columns = [vander(states[:, j], degree) for j in range(states.shape[1])]
    indices = _multi_indices(states.shape[1], degree)
    A = np.ones((states.shape[0], len(indices)))
    for col, idx in enumerate(indices):
        for j, power in enumerate(idx):
            if power:
                A[:, col] *= columns[j][:, power]
    return A


def fit_predict(states: np.ndarray, values: np.ndarray, spec: RegressionSpec) -> np.ndarray:
    """
    Ridge least-squares projection of values on a polynomial basis of the states.

    States are standardized to zero mean and unit variance per dimension;
    constant dimensions are dropped. The problem min |A c - v|^2 + λ|c|^2 is
    solved as an ordinary least-squares problem on [A; sqrt(λ) I] by SVD.
    """
    states = np.asarray(states, dtype=float)
    values = np.asarray(values, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[0] != values.shape[0]:
        raise ValueError(f"States ({states.shape[0]}) and values ({values.shape[0]}) differ in length")

    mean = states.mean(axis=0)
    scale = states.std(axis=0)
    keep = scale > 1e-12 * (1.0 + np.abs(mean))
    z = (states[:, keep] - mean[keep]) / scale[keep]

    A = _basis_matrix(z, spec.degree, spec.basis)
    n_basis = A.shape[1]
    if values.shape[0] < n_basis:
        raise ValueError(f"Need at least {n_basis} paths for {n_basis} basis functions, got {values.shape[0]}")

    if spec.ridge > 0:
        A_fit = np.vstack([A, math.sqrt(spec.ridge) * np.eye(n_basis)])
        v_fit = np.concatenate([values, np.zeros(n_basis)])
    else:
        A_fit, v_fit = A, values

    coeffs, _, _, singular = np.linalg.lstsq(A_fit, v_fit, rcond=None)
    s_plain = np.sqrt(np.maximum(singular ** 2 - spec.ridge, 0.0))
    if s_plain.size and s_plain.min() <= s_plain.max() * max(A.shape) * np.finfo(float).eps:
        logger.warning(f"Regression basis is rank deficient ({n_basis} functions, {values.shape[0]} paths)")
    return A @ coeffs


def gaussian_poly_expectation(coeffs, mean: np.ndarray, var: float) -> np.ndarray:
    """E p(mean + sqrt(var) N) = Σ_l p^{(2l)}(mean) (var/2)^l / l!."""
    poly = polynomial.Polynomial(coeffs)
    total = poly(mean)
    deriv = poly
    for l in range(1, poly.degree() // 2 + 1):
        deriv = deriv.deriv(2)
        total = total + deriv(mean) * (0.5 * var) ** l / math.factorial(l)
    return total


def exact_step(
    exact: Optional[ExactSpec],
    x: np.ndarray,
    tag: str,
    t: float,
    T: float,
    s: Optional[float] = None,
    b: Optional[float] = None
) -> np.ndarray:
    """
    Closed-form conditional expectations given the node state x = W_t.

    terminal             E(ξ | W_t = x), ξ a polynomial in W_T
    terminal_derivative  E(ρ_{s,T} D ξ | W_t = x), s >= t, constant a, b (Girsanov shift)
    exp                  E(e^{b W_T} | W_t = x) = e^{bx + b^2 (T - t)/2}
    """
    x = np.asarray(x, dtype=float)
    if tag == 'exp':
        if b is None:
            raise UnsupportedFunctionalError("Functional 'exp' needs the exponent b")
        return np.exp(b * x + 0.5 * b * b * (T - t))
    if exact is None:
        raise UnsupportedFunctionalError(f"No closed-form operator for functional '{tag}'")
    if tag == 'terminal':
        return gaussian_poly_expectation(exact.xi_poly, x, T - t)
    if tag == 'terminal_derivative':
        s = t if s is None else s
        if s < t:
            raise UnsupportedFunctionalError(f"Weight start s={s} precedes the node t={t}")
        shifted = x + exact.b * (T - s)
        return math.exp(exact.a * (T - s)) * gaussian_poly_expectation(exact.d_xi_poly, shifted, T - t)
    raise UnsupportedFunctionalError(f"Unknown functional tag '{tag}'")


def nested_mc(
    ensemble: PathEnsemble,
    node: int,
    n_inner: int,
    functional: Callable[[np.ndarray, Partition], np.ndarray],
    seed: int,
    threads: Optional[int] = None
) -> np.ndarray:
    """Per outer path, the mean of functional over n_inner continuations from fine index node."""
    if n_inner < 1:
        raise ValueError(f"Inner path count must be >= 1, got {n_inner}")

    def estimate(path: int) -> float:
        inner = branch_paths(ensemble, path, node, n_inner, seed)
        return float(np.mean(functional(inner, ensemble.fine)))

    return map_paths(estimate, ensemble.n_paths, threads)


@dataclass(frozen=True)
class StepTarget:
    """
    M = y_next + f(t_next, y_next, z) Δ.

    z is the next-node Z unless z_current is set, in which case that
    current-node value is used (implicit scheme).
    """
    f: Evaluator
    t_next: float
    dt: float
    z_current: Optional[np.ndarray] = None

    def evaluate(self, y_next: np.ndarray, z_next: np.ndarray, inner_axis: bool = False) -> np.ndarray:
        z = z_next
        if self.z_current is not None:
            z = self.z_current[:, None] if inner_axis else self.z_current
        return y_next + self.f(self.t_next, y_next, z) * self.dt


@dataclass(frozen=True)
class PathFunctional:
    """Functional of fine-grid paths with an optional closed-form tag."""
    evaluate: Callable[[np.ndarray, Partition], np.ndarray]
    tag: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)


@dataclass
class StepContext:
    """Data of one backward step i on a coarse view."""
    index: int
    view: CoarseView
    y_next: np.ndarray
    z_next: np.ndarray

    @property
    def t(self) -> float:
        return float(self.view.partition.times[self.index])

    @property
    def t_next(self) -> float:
        return float(self.view.partition.times[self.index + 1])

    @property
    def dt(self) -> float:
        return self.t_next - self.t

    @property
    def fine_index(self) -> int:
        return int(self.view.indices[self.index])

    @property
    def w(self) -> np.ndarray:
        return self.view.W[:, self.index]

    @property
    def dw(self) -> np.ndarray:
        return self.view.W[:, self.index + 1] - self.view.W[:, self.index]


class ExactEstimator:
    """
    Exact conditional expectations for Gaussian-analytic problems.

    Targets are fitted exactly on the basis u^a v^b, a + b <= degree, with
    u = W_{t_i}/sqrt(t_i) and v = ΔW_i/sqrt(Δ_i); the Gaussian moments of v
    are then applied in closed form.
    """

    def __init__(self, problem: BsdeProblem, ensemble: PathEnsemble):
        if problem.exact is None:
            raise UnsupportedEstimatorError(f"Problem '{problem.name}' has no closed-form operator")
        self.problem = problem
        self.ensemble = ensemble
        self.degree = problem.exact.degree

    def _fit(self, step: StepContext, values: np.ndarray) -> Tuple[np.ndarray, List[Tuple[int, int]], np.ndarray]:
        v = step.dw / math.sqrt(step.dt)
        if step.t > 0:
            u = step.w / math.sqrt(step.t)
            powers = [(a, b) for a in range(self.degree + 1) for b in range(self.degree + 1 - a)]
        else:
            u = np.zeros_like(v)
            powers = [(0, b) for b in range(self.degree + 1)]
        A = np.column_stack([u ** a * v ** b for a, b in powers])
        coeffs = np.linalg.lstsq(A, values, rcond=None)[0]
        residual = np.max(np.abs(A @ coeffs - values))
        if residual > EXACT_RESIDUAL_TOL * (1.0 + np.max(np.abs(values))):
            raise UnsupportedFunctionalError(
                f"Target is not a polynomial of degree {self.degree} in the node state "
                f"(step {step.index}, residual {residual:.3e})"
            )
        return coeffs, powers, u

    @staticmethod
    def _moment(b: int) -> float:
        """E N^b for a standard normal N."""
        if b % 2:
            return 0.0
        return float(np.prod(np.arange(b - 1, 0, -2))) if b else 1.0

    def _apply(self, step: StepContext, values: np.ndarray, shift: int) -> np.ndarray:
        coeffs, powers, u = self._fit(step, values)
        out = np.zeros_like(u)
        for c, (a, b) in zip(coeffs, powers):
            m = self._moment(b + shift)
            if m:
                out = out + c * m * u ** a
        return out

    def expect(self, step: StepContext, target: StepTarget) -> np.ndarray:
        return self._apply(step, target.evaluate(step.y_next, step.z_next), 0)

    def expect_increment(self, step: StepContext, target: StepTarget) -> np.ndarray:
        return self._apply(step, target.evaluate(step.y_next, step.z_next), 1) / math.sqrt(step.dt)

    def expect_functional(self, step: StepContext, functional: PathFunctional) -> np.ndarray:
        if functional.tag is None:
            raise UnsupportedFunctionalError("Path functional has no closed-form tag")
        return exact_step(
            self.problem.exact, step.w, functional.tag, step.t, self.problem.horizon, **functional.params
        )


class RegressionEstimator:
    """Least-squares Monte Carlo on the problem's regression state."""

    def __init__(self, problem: BsdeProblem, ensemble: PathEnsemble, spec: RegressionSpec):
        self.problem = problem
        self.ensemble = ensemble
        self.spec = spec
        self._states: Optional[np.ndarray] = None

    def states(self, step: StepContext) -> np.ndarray:
        if self._states is None:
            self._states = self.problem.terminal.state(self.ensemble.W, self.ensemble.fine)
        return self._states[:, step.fine_index, :]

    def expect(self, step: StepContext, target: StepTarget) -> np.ndarray:
        values = target.evaluate(step.y_next, step.z_next)
        return fit_predict(self.states(step), values, self.spec)

    def expect_increment(self, step: StepContext, target: StepTarget) -> np.ndarray:
        values = target.evaluate(step.y_next, step.z_next) * step.dw
        return fit_predict(self.states(step), values, self.spec) / step.dt

    def expect_functional(self, step: StepContext, functional: PathFunctional) -> np.ndarray:
        values = functional.evaluate(self.ensemble.W, self.ensemble.fine)
        return fit_predict(self.states(step), values, self.spec)


class NestedEstimator:
    """
    Nested Monte Carlo with n_inner samples per outer path.

    One-step expectations draw inner next-node states and read next-node
    values off the outer ensemble by linear interpolation in W; path
    functionals use full inner continuations. Scalar Brownian state only.
    """

    def __init__(self, problem: BsdeProblem, ensemble: PathEnsemble, n_inner: int,
                 seed: int, threads: Optional[int] = None):
        if problem.terminal.state is not brownian_state:
            raise UnsupportedEstimatorError(
                f"Nested estimator needs the scalar Brownian state; problem '{problem.name}' has another"
            )
        if n_inner < 1:
            raise ValueError(f"Inner path count must be >= 1, got {n_inner}")
        self.problem = problem
        self.ensemble = ensemble
        self.n_inner = n_inner
        self.seed = seed
        self.threads = threads

    def _inner_values(self, step: StepContext, target: StepTarget) -> Tuple[np.ndarray, np.ndarray]:
        sqrt_dt = math.sqrt(step.dt)
        dw_inner = sqrt_dt * one_step_normals(self.seed, step.fine_index, self.ensemble.n_paths, self.n_inner)
        w_next = step.view.W[:, step.index + 1]
        order = np.argsort(w_next, kind='stable')
        x_sorted = w_next[order]
        x_inner = step.w[:, None] + dw_inner
        y_inner = np.interp(x_inner, x_sorted, step.y_next[order])
        z_inner = np.interp(x_inner, x_sorted, step.z_next[order])
        return target.evaluate(y_inner, z_inner, inner_axis=True), dw_inner

    def expect(self, step: StepContext, target: StepTarget) -> np.ndarray:
        values, _ = self._inner_values(step, target)
        return values.mean(axis=1)

    def expect_increment(self, step: StepContext, target: StepTarget) -> np.ndarray:
        values, dw_inner = self._inner_values(step, target)
        return (values * dw_inner).mean(axis=1) / step.dt

    def expect_functional(self, step: StepContext, functional: PathFunctional) -> np.ndarray:
        return nested_mc(
            self.ensemble, step.fine_index, self.n_inner, functional.evaluate, self.seed, self.threads
        )


Estimator = Union[ExactEstimator, RegressionEstimator, NestedEstimator]


def make_estimator(
    kind: str,
    problem: BsdeProblem,
    ensemble: PathEnsemble,
    regression: Optional[RegressionSpec] = None,
    n_inner: int = 64,
    seed: int = 0,
    threads: Optional[int] = None
) -> Estimator:
    """Build the estimator named by kind ('exact', 'lsmc' or 'nested')."""
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.EXACT:
        return ExactEstimator(problem, ensemble)
    if kind is EstimatorKind.LSMC:
        return RegressionEstimator(problem, ensemble, regression or RegressionSpec())
    return NestedEstimator(problem, ensemble, n_inner, seed, threads)
