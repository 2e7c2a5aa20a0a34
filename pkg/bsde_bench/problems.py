"""BSDE problem definitions: generators, terminal functionals, reference solutions."""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from numpy.polynomial import hermite_e

from .paths import Partition, PathEnsemble
from .utils import get_logger

logger = get_logger(__name__)

# f(t, y, z) on arrays
Evaluator = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
# functional of fine-grid paths W [n_paths x (fine.n + 1)]
TerminalFunctional = Callable[[np.ndarray, Partition], np.ndarray]
# value at fine index k of fine-grid paths
GridEvaluator = Callable[[np.ndarray, Partition, int], np.ndarray]
# regression states at every fine index, [n_paths x (fine.n + 1) x d]
StateExtractor = Callable[[np.ndarray, Partition], np.ndarray]

# below this |a| the linear_const reference uses the series form c(T - t)
SERIES_THRESHOLD = 1e-12


class ProblemError(ValueError):
    """Unknown problem name or missing/invalid parameters."""


class UnsupportedProblemError(ValueError):
    """The problem lacks an evaluator an operation needs."""


class GeneratorNotLinearError(ValueError):
    """The generator has no linear coefficients g, h, f1."""


@dataclass(frozen=True)
class LinearCoefficients:
    """
    f(t, y, z) = g(t) y + h(t) z + f1(t).

    drift_integral(s, t), when given, is the closed form of
    ∫_s^t (g(u) - h(u)^2/2) du.
    """
    g: Callable[[float], float]
    h: Callable[[float], float]
    f1: Callable[[float], float]
    constant: Optional[Tuple[float, float, float]] = None
    drift_integral: Optional[Callable[[float, float], float]] = None

    @classmethod
    def from_constants(cls, a: float, b: float, c: float) -> 'LinearCoefficients':
        return cls(g=lambda t: a, h=lambda t: b, f1=lambda t: c, constant=(a, b, c))

    @property
    def is_constant(self) -> bool:
        return self.constant is not None


@dataclass(frozen=True)
class GeneratorSpec:
    f: Evaluator
    df_dy: Evaluator
    df_dz: Evaluator
    lipschitz_L: float
    time_holder_L2: float = 0.0
    is_deterministic: bool = True
    linear: Optional[LinearCoefficients] = None

    def __post_init__(self):
        if self.lipschitz_L < 0:
            raise ValueError(f"lipschitz_L must be >= 0, got {self.lipschitz_L}")
        if self.time_holder_L2 < 0:
            raise ValueError(f"time_holder_L2 must be >= 0, got {self.time_holder_L2}")


@dataclass(frozen=True)
class TerminalSpec:
    xi: TerminalFunctional
    state: StateExtractor
    d_xi: Optional[Callable[[np.ndarray, Partition, float], np.ndarray]] = None


@dataclass(frozen=True)
class ReferenceSolution:
    Y: GridEvaluator
    Z: GridEvaluator


@dataclass(frozen=True)
class ExactSpec:
    """
    Closed-form data for Gaussian-analytic problems.

    Scheme iterates stay polynomials of `degree` in W; ξ and D_θξ are
    polynomials in W_T (power-basis coefficients) and the generator has
    constant linear coefficients (a, b).
    """
    degree: int
    xi_poly: Tuple[float, ...]
    d_xi_poly: Tuple[float, ...]
    a: float = 0.0
    b: float = 0.0


@dataclass(frozen=True)
class BsdeProblem:
    name: str
    horizon: float
    generator: GeneratorSpec
    terminal: TerminalSpec
    reference: Optional[ReferenceSolution] = None
    exact: Optional[ExactSpec] = None
    params: Dict[str, Any] = field(default_factory=dict)


def brownian_state(W: np.ndarray, fine: Partition) -> np.ndarray:
    """Regression state W_t at every fine index."""
    return W[:, :, None]


def _markov_reference(
    y: Callable[[float, np.ndarray], np.ndarray],
    z: Callable[[float, np.ndarray], np.ndarray]
) -> ReferenceSolution:
    return ReferenceSolution(
        Y=lambda W, fine, k: y(float(fine.times[k]), W[:, k]),
        Z=lambda W, fine, k: z(float(fine.times[k]), W[:, k]),
    )


def zero_generator() -> GeneratorSpec:
    zero = lambda t, y, z: np.zeros(np.broadcast(y, z).shape)
    return GeneratorSpec(
        f=zero, df_dy=zero, df_dz=zero, lipschitz_L=0.0,
        linear=LinearCoefficients.from_constants(0.0, 0.0, 0.0)
    )


def linear_generator(a: float, b: float, c: float) -> GeneratorSpec:
    shape = lambda y, z: np.broadcast(y, z).shape
    return GeneratorSpec(
        f=lambda t, y, z: a * y + b * z + c,
        df_dy=lambda t, y, z: np.full(shape(y, z), a),
        df_dz=lambda t, y, z: np.full(shape(y, z), b),
        lipschitz_L=max(abs(a), abs(b)),
        linear=LinearCoefficients.from_constants(a, b, c)
    )


def smooth_generator(L: float) -> GeneratorSpec:
    """
    f(t, y, z) = L (sin y + cos(z) z / (1 + z^2)).

    |∂_y f| <= L and |∂_z f| <= L (the z-term has slope 1 at the origin and
    less elsewhere), so f is Lipschitz with constant L.
    """
    def f(t, y, z):
        return L * (np.sin(y) + np.cos(z) * z / (1.0 + z * z))

    def df_dy(t, y, z):
        return L * np.cos(y) + 0.0 * z

    def df_dz(t, y, z):
        q = 1.0 + z * z
        return L * (np.cos(z) * (1.0 - z * z) / (q * q) - np.sin(z) * z / q) + 0.0 * y

    return GeneratorSpec(f=f, df_dy=df_dy, df_dz=df_dz, lipschitz_L=abs(L))


def scaled_hermite(order: int, t: float, w: np.ndarray) -> np.ndarray:
    """t^{order/2} He_order(w / sqrt(t)) / order!, as a polynomial in (t, w)."""
    coeffs = hermite_e.herme2poly([0.0] * order + [1.0])
    out = np.zeros_like(np.asarray(w, dtype=float))
    for k in range(order % 2, order + 1, 2):
        out = out + coeffs[k] * w ** k * t ** ((order - k) // 2)
    return out / math.factorial(order)


def _scaled_hermite_poly(order: int, t: float) -> Tuple[float, ...]:
    coeffs = hermite_e.herme2poly([0.0] * order + [1.0])
    scaled = [0.0] * (order + 1)
    for k in range(order % 2, order + 1, 2):
        scaled[k] = coeffs[k] * t ** ((order - k) // 2) / math.factorial(order)
    return tuple(scaled)


def _require(params: Dict[str, Any], name: str, *keys: str) -> None:
    missing = [k for k in keys if k not in params]
    if missing:
        raise ProblemError(f"Problem '{name}' requires params {missing}")


def _build_martingale(T: float, params: Dict[str, Any]) -> BsdeProblem:
    return BsdeProblem(
        name='martingale', horizon=T,
        generator=zero_generator(),
        terminal=TerminalSpec(
            xi=lambda W, fine: W[:, -1].copy(),
            state=brownian_state,
            d_xi=lambda W, fine, theta: np.ones(W.shape[0])
        ),
        reference=_markov_reference(lambda t, w: w.copy(), lambda t, w: np.ones_like(w)),
        exact=ExactSpec(degree=1, xi_poly=(0.0, 1.0), d_xi_poly=(1.0,)),
        params=params
    )


def _build_quadratic(T: float, params: Dict[str, Any]) -> BsdeProblem:
    return BsdeProblem(
        name='quadratic', horizon=T,
        generator=zero_generator(),
        terminal=TerminalSpec(
            xi=lambda W, fine: W[:, -1] ** 2,
            state=brownian_state,
            d_xi=lambda W, fine, theta: 2.0 * W[:, -1]
        ),
        reference=_markov_reference(lambda t, w: w ** 2 + (T - t), lambda t, w: 2.0 * w),
        exact=ExactSpec(degree=2, xi_poly=(0.0, 0.0, 1.0), d_xi_poly=(0.0, 2.0)),
        params=params
    )


def linear_const_reference(a: float, b: float, c: float, T: float) -> ReferenceSolution:
    def growth(t: float) -> float:
        return math.exp(a * (T - t))

    def forcing(t: float) -> float:
        if abs(a) < SERIES_THRESHOLD:
            return c * (T - t)
        return c * math.expm1(a * (T - t)) / a

    return _markov_reference(
        lambda t, w: growth(t) * (w + b * (T - t)) + forcing(t),
        lambda t, w: np.full_like(w, growth(t))
    )


def _build_linear_const(T: float, params: Dict[str, Any]) -> BsdeProblem:
    _require(params, 'linear_const', 'a', 'b')
    a, b = float(params['a']), float(params['b'])
    c = float(params.get('c', 0.0))
    return BsdeProblem(
        name='linear_const', horizon=T,
        generator=linear_generator(a, b, c),
        terminal=TerminalSpec(
            xi=lambda W, fine: W[:, -1].copy(),
            state=brownian_state,
            d_xi=lambda W, fine, theta: np.ones(W.shape[0])
        ),
        reference=linear_const_reference(a, b, c, T),
        exact=ExactSpec(degree=1, xi_poly=(0.0, 1.0), d_xi_poly=(1.0,), a=a, b=b),
        params=params
    )


def _build_smooth_terminal(T: float, params: Dict[str, Any]) -> BsdeProblem:
    L = float(params.get('L', 0.5))
    return BsdeProblem(
        name='smooth_terminal', horizon=T,
        generator=smooth_generator(L),
        terminal=TerminalSpec(
            xi=lambda W, fine: np.tanh(W[:, -1]),
            state=brownian_state,
            d_xi=lambda W, fine, theta: 1.0 - np.tanh(W[:, -1]) ** 2
        ),
        params=params
    )


def _build_hermite(T: float, params: Dict[str, Any], name: str = 'hermite') -> BsdeProblem:
    _require(params, name, 'order')
    order = int(params['order'])
    if order < 2:
        raise ProblemError(f"hermite order must be >= 2, got {order}")
    return BsdeProblem(
        name=name, horizon=T,
        generator=zero_generator(),
        terminal=TerminalSpec(
            xi=lambda W, fine: scaled_hermite(order, T, W[:, -1]),
            state=brownian_state,
            d_xi=lambda W, fine, theta: scaled_hermite(order - 1, T, W[:, -1])
        ),
        reference=_markov_reference(
            lambda t, w: scaled_hermite(order, t, w),
            lambda t, w: scaled_hermite(order - 1, t, w)
        ),
        exact=ExactSpec(
            degree=order,
            xi_poly=_scaled_hermite_poly(order, T),
            d_xi_poly=_scaled_hermite_poly(order - 1, T)
        ),
        params=params
    )


def _build_hermite2(T: float, params: Dict[str, Any]) -> BsdeProblem:
    return _build_hermite(T, {**params, 'order': 2}, name='hermite2')


PHI_FUNCTIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    'identity': lambda u: u,
    'neg_exp': lambda u: np.exp(-u),
}


def forward_energy(W: np.ndarray, fine: Partition, params: Dict[str, Any]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Euler forward process X and running trapezoid integral of X^2.

    dX = kappa (mu - X) dt + (sigma + sigma_x X) dW, X_0 = x0.
    """
    x0, sigma = float(params['x0']), float(params['sigma'])
    kappa, mu = float(params.get('kappa', 0.0)), float(params.get('mu', 0.0))
    sigma_x = float(params.get('sigma_x', 0.0))

    dW = np.diff(W, axis=1)
    dt = fine.steps
    X = np.empty_like(W)
    I = np.empty_like(W)
    X[:, 0] = x0
    I[:, 0] = 0.0
    for k in range(fine.n):
        x = X[:, k]
        X[:, k + 1] = x + kappa * (mu - x) * dt[k] + (sigma + sigma_x * x) * dW[:, k]
        I[:, k + 1] = I[:, k] + 0.5 * (x * x + X[:, k + 1] ** 2) * dt[k]
    return X, I


def _build_fbsde_energy(T: float, params: Dict[str, Any]) -> BsdeProblem:
    _require(params, 'fbsde_energy', 'x0', 'sigma')
    phi_name = params.get('phi', 'identity')
    if phi_name not in PHI_FUNCTIONS:
        raise ProblemError(f"Unknown phi '{phi_name}', expected one of {sorted(PHI_FUNCTIONS)}")
    phi = PHI_FUNCTIONS[phi_name]
    a, b, c = (float(params.get(k, 0.0)) for k in ('a', 'b', 'c'))

    def xi(W, fine):
        _, I = forward_energy(W, fine, params)
        return phi(I[:, -1])

    def state(W, fine):
        X, I = forward_energy(W, fine, params)
        return np.stack([X, I], axis=-1)

    return BsdeProblem(
        name='fbsde_energy', horizon=T,
        generator=linear_generator(a, b, c),
        terminal=TerminalSpec(xi=xi, state=state),
        params=params
    )


_BUILDERS: Dict[str, Callable[[float, Dict[str, Any]], BsdeProblem]] = {
    'martingale': _build_martingale,
    'quadratic': _build_quadratic,
    'linear_const': _build_linear_const,
    'smooth_terminal': _build_smooth_terminal,
    'hermite': _build_hermite,
    'hermite2': _build_hermite2,
    'fbsde_energy': _build_fbsde_energy,
}

BUILTIN_NAMES = tuple(_BUILDERS)


def builtin(name: str, params: Optional[Dict[str, Any]] = None) -> BsdeProblem:
    """Build a built-in problem; `T` in params sets the horizon (default 1)."""
    if name not in _BUILDERS:
        raise ProblemError(f"Unknown problem '{name}', expected one of {list(BUILTIN_NAMES)}")
    params = dict(params or {})
    T = float(params.pop('T', 1.0))
    if not T > 0:
        raise ProblemError(f"Horizon T must be positive, got {T}")
    problem = _BUILDERS[name](T, params)
    logger.debug(f"Built problem {name} (T={T}, params={params})")
    return problem


def _check_horizon(problem: BsdeProblem, ensemble: PathEnsemble) -> None:
    if abs(ensemble.horizon - problem.horizon) > 1e-12 * max(1.0, problem.horizon):
        raise ValueError(
            f"Ensemble horizon {ensemble.horizon} does not match problem horizon {problem.horizon}"
        )


def eval_terminal(problem: BsdeProblem, ensemble: PathEnsemble) -> np.ndarray:
    """Per-path ξ^π on the fine grid."""
    _check_horizon(problem, ensemble)
    return problem.terminal.xi(ensemble.W, ensemble.fine)


def malliavin_terminal(problem: BsdeProblem, ensemble: PathEnsemble, theta: float) -> np.ndarray:
    """Per-path D_θξ."""
    if problem.terminal.d_xi is None:
        raise UnsupportedProblemError(f"Problem '{problem.name}' has no Malliavin derivative of ξ")
    _check_horizon(problem, ensemble)
    if not 0.0 <= theta <= problem.horizon:
        raise ValueError(f"θ={theta} outside [0, {problem.horizon}]")
    return problem.terminal.d_xi(ensemble.W, ensemble.fine, theta)


def perturb_path(W: np.ndarray, fine: Partition, theta: float, eps: float) -> np.ndarray:
    """W + eps * 1_{[θ, T]}(t): the path shifted by eps from time θ on."""
    shifted = np.array(W, dtype=float)
    shifted[:, fine.times >= theta] += eps
    return shifted


def _require_linear(generator: GeneratorSpec) -> LinearCoefficients:
    if generator.linear is None:
        raise GeneratorNotLinearError("Generator has no linear coefficients (g, h, f1)")
    return generator.linear


def fine_rho_exponents(linear: LinearCoefficients, W: np.ndarray, fine: Partition) -> np.ndarray:
    """
    Per-fine-step exponent of the stochastic exponential:
    h(s_k) δW_k + ∫_{s_k}^{s_{k+1}} (g - h^2/2) ds.

    The ds-integral is exact for constant coefficients or when the
    coefficients carry a closed-form drift_integral; otherwise it is the
    trapezoid rule on each fine step, with O(δt^2) local error. The dW-term
    is always the left-point sum on the fine grid.
    """
    dW = np.diff(W, axis=1)
    dt = fine.steps
    if linear.is_constant:
        a, b, _ = linear.constant
        return b * dW + (a - 0.5 * b * b) * dt
    times = fine.times
    h = np.array([linear.h(t) for t in times[:-1]])
    if linear.drift_integral is not None:
        drift = np.array([linear.drift_integral(s, t) for s, t in zip(times[:-1], times[1:])])
        return h * dW + drift
    q = np.array([linear.g(t) - 0.5 * linear.h(t) ** 2 for t in times])
    return h * dW + 0.5 * (q[:-1] + q[1:]) * dt


def linear_rho(
    generator: GeneratorSpec,
    ensemble: PathEnsemble,
    t_index: int,
    r_index: int
) -> np.ndarray:
    """Per-path ρ_{t,r} = exp{∫_t^r h dW + ∫_t^r (g - h^2/2) ds} between fine indices."""
    linear = _require_linear(generator)
    if not 0 <= t_index <= r_index <= ensemble.fine.n:
        raise ValueError(f"Need 0 <= t_index <= r_index <= {ensemble.fine.n}, got ({t_index}, {r_index})")
    exponents = fine_rho_exponents(linear, ensemble.W, ensemble.fine)
    cumulative = np.zeros((ensemble.n_paths, ensemble.fine.n + 1))
    np.cumsum(exponents, axis=1, out=cumulative[:, 1:])
    return np.exp(cumulative[:, r_index] - cumulative[:, t_index])
