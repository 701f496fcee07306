"""
Spatio-temporal Gaussian process engine.

Kernel algebra over (time, state) inputs, exact posterior inference,
confidence intervals with running intersections, information gain and the
beta schedule used to scale confidence intervals.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

# Diagonal jitter added before factorization, and the single retry level
JITTER = 1e-9
JITTER_RETRY = 1e-6

# Exact information gain enumerates subsets, so it is capped
MAX_EXACT_DOMAIN = 15


class InvalidKernelError(ValueError):
    """Raised for malformed kernel trees or non-finite kernel values."""


class IllConditionedModelError(RuntimeError):
    """Raised when the training kernel matrix cannot be factorized."""


class DomainTooLargeError(ValueError):
    """Raised when exact information gain is requested on a large domain."""


class ParameterError(ValueError):
    """Raised for out-of-range scalar parameters."""


class SpaceTimePoint(NamedTuple):
    """GP input: a time index and a row-major state id."""
    t: int
    s: int


class KernelKind(Enum):
    """Leaf kernel families."""
    RBF_SPACE = "rbf_space"
    RBF_TIME = "rbf_time"
    COSINE_TIME = "cosine_time"


@dataclass(frozen=True)
class BaseKernel:
    """Leaf kernel. For cosine_time the length scale is the period."""
    kind: KernelKind
    length_scale: float
    variance: float

    def __post_init__(self):
        if not isinstance(self.kind, KernelKind):
            raise InvalidKernelError(f"Unknown kernel kind: {self.kind!r}")
        for name in ('length_scale', 'variance'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidKernelError(f"{self.kind.value} {name} must be positive and finite, got {value}")

    @property
    def on_time(self) -> bool:
        return self.kind is not KernelKind.RBF_SPACE


@dataclass(frozen=True)
class Sum:
    left: "KernelSpec"
    right: "KernelSpec"


@dataclass(frozen=True)
class Product:
    left: "KernelSpec"
    right: "KernelSpec"


KernelSpec = Union[BaseKernel, Sum, Product]

Metric = Callable[[int, int], float]


def rbf_space(length_scale: float, variance: float) -> BaseKernel:
    return BaseKernel(KernelKind.RBF_SPACE, float(length_scale), float(variance))


def rbf_time(length_scale: float, variance: float) -> BaseKernel:
    return BaseKernel(KernelKind.RBF_TIME, float(length_scale), float(variance))


def composite_kernel(k_s: KernelSpec, k_t: KernelSpec,
                     k_s_hat: KernelSpec, k_t_hat: KernelSpec) -> KernelSpec:
    """Build (k_s + k_t) + (k_s_hat * k_t_hat)."""
    return Sum(Sum(k_s, k_t), Product(k_s_hat, k_t_hat))


def kernel_leaves(spec: KernelSpec) -> List[BaseKernel]:
    """Leaves in left-to-right order."""
    if isinstance(spec, BaseKernel):
        return [spec]
    if isinstance(spec, (Sum, Product)):
        return kernel_leaves(spec.left) + kernel_leaves(spec.right)
    raise InvalidKernelError(f"Not a kernel node: {spec!r}")


def kernel_to_dict(spec: KernelSpec) -> Dict[str, Any]:
    """Serialize a kernel tree to nested plain dictionaries."""
    if isinstance(spec, BaseKernel):
        return {
            'kind': spec.kind.value,
            'length_scale': spec.length_scale,
            'variance': spec.variance,
        }
    if isinstance(spec, (Sum, Product)):
        return {
            'op': 'sum' if isinstance(spec, Sum) else 'product',
            'children': [kernel_to_dict(spec.left), kernel_to_dict(spec.right)],
        }
    raise InvalidKernelError(f"Not a kernel node: {spec!r}")


def kernel_from_dict(data: Dict[str, Any]) -> KernelSpec:
    """Parse a kernel tree written by kernel_to_dict."""
    if not isinstance(data, dict):
        raise InvalidKernelError(f"Kernel node must be a mapping, got {type(data).__name__}")
    if 'op' in data:
        children = data.get('children')
        if not isinstance(children, list) or len(children) != 2:
            raise InvalidKernelError("Sum/product nodes need exactly two children")
        left, right = (kernel_from_dict(child) for child in children)
        if data['op'] == 'sum':
            return Sum(left, right)
        if data['op'] == 'product':
            return Product(left, right)
        raise InvalidKernelError(f"Unknown kernel operator: {data['op']!r}")
    try:
        kind = KernelKind(data['kind'])
        return BaseKernel(kind, float(data['length_scale']), float(data['variance']))
    except KeyError as e:
        raise InvalidKernelError(f"Kernel leaf missing field {e}") from e
    except (TypeError, ValueError) as e:
        if isinstance(e, InvalidKernelError):
            raise
        raise InvalidKernelError(f"Invalid kernel leaf {data!r}: {e}") from e


def _leaf_value(leaf: BaseKernel, ds, dt):
    if leaf.kind is KernelKind.RBF_SPACE:
        return leaf.variance * np.exp(-np.square(ds) / (2.0 * leaf.length_scale ** 2))
    if leaf.kind is KernelKind.RBF_TIME:
        return leaf.variance * np.exp(-np.square(dt) / (2.0 * leaf.length_scale ** 2))
    return leaf.variance * np.cos(2.0 * np.pi * dt / leaf.length_scale)


def kernel_matrix(spec: KernelSpec, ds: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """
    Evaluate a kernel tree on precomputed distance matrices.

    Args:
        spec: Kernel tree
        ds: Spatial distances, any shape
        dt: Temporal distances, same shape as ds

    Returns:
        Kernel values with the shape of ds
    """
    if isinstance(spec, BaseKernel):
        return _leaf_value(spec, ds, dt)
    if isinstance(spec, Sum):
        return kernel_matrix(spec.left, ds, dt) + kernel_matrix(spec.right, ds, dt)
    if isinstance(spec, Product):
        return kernel_matrix(spec.left, ds, dt) * kernel_matrix(spec.right, ds, dt)
    raise InvalidKernelError(f"Not a kernel node: {spec!r}")


def eval_kernel(spec: KernelSpec, a: SpaceTimePoint, b: SpaceTimePoint,
                d_s: Metric, d_t: Metric) -> float:
    """
    Evaluate k(a, b) with caller-supplied state and time metrics.

    GpModel measures d_s as the Euclidean distance between grid coordinates,
    not the Manhattan distance the safe sets use; pass a Euclidean d_s to
    reproduce the model's covariances.
    """
    value = float(kernel_matrix(spec, np.float64(d_s(a.s, b.s)), np.float64(d_t(a.t, b.t))))
    if not math.isfinite(value):
        raise InvalidKernelError(f"Kernel evaluated to {value} at {a}, {b}")
    return value


def grid_coordinates(rows: int, cols: int) -> np.ndarray:
    """(row, col) coordinates of every state in row-major order."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing='ij')
    return np.column_stack((rr.ravel(), cc.ravel())).astype(float)


class GpModel:
    """
    Zero-mean GP over space-time points of a grid.

    Spatial distances are Euclidean over the grid coordinates (the Lipschitz
    metric of the safe sets is Manhattan), temporal distances are absolute
    step differences. Mutating calls
    (add_observation) need exclusive access; everything else is a read.
    """

    def __init__(self, kernel: KernelSpec, coords: np.ndarray, noise_var: float):
        """
        Initialize GP model.

        Args:
            kernel: Kernel tree
            coords: n_states x 2 array of state coordinates
            noise_var: Observation noise variance
        """
        if noise_var < 0 or not math.isfinite(noise_var):
            raise ParameterError(f"noise_var must be finite and non-negative, got {noise_var}")
        kernel_leaves(kernel)
        self.kernel = kernel
        self.coords = np.asarray(coords, dtype=float)
        self.noise_var = float(noise_var)
        self.train_points: List[SpaceTimePoint] = []
        self.train_values: List[float] = []
        self._factor = None
        self._alpha: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.train_points)

    def add_observation(self, p: SpaceTimePoint, y: float) -> "GpModel":
        """Extend the training set by (p, y)."""
        self.train_points.append(SpaceTimePoint(int(p.t), int(p.s)))
        self.train_values.append(float(y))
        self._factor = None
        self._alpha = None
        return self

    def add_observations(self, points: Sequence[SpaceTimePoint], values: Sequence[float]) -> "GpModel":
        for p, y in zip(points, values):
            self.add_observation(p, y)
        return self

    def cross_kernel(self, times_a, states_a, times_b, states_b) -> np.ndarray:
        """Kernel matrix between two point sets given as time/state arrays."""
        times_a = np.asarray(times_a, dtype=float)
        times_b = np.asarray(times_b, dtype=float)
        ds = cdist(self.coords[np.asarray(states_a, dtype=int)],
                   self.coords[np.asarray(states_b, dtype=int)])
        dt = np.abs(times_a[:, None] - times_b[None, :])
        return kernel_matrix(self.kernel, ds, dt)

    def prior_variance(self, times, states) -> np.ndarray:
        zeros = np.zeros(len(np.atleast_1d(states)))
        return kernel_matrix(self.kernel, zeros, zeros)

    def _train_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        times = np.array([p.t for p in self.train_points], dtype=float)
        states = np.array([p.s for p in self.train_points], dtype=int)
        return times, states

    def _factorize(self):
        if self._factor is not None:
            return self._factor
        times, states = self._train_arrays()
        K = self.cross_kernel(times, states, times, states)
        if not np.all(np.isfinite(K)):
            raise InvalidKernelError("Training kernel matrix is not finite")
        n = K.shape[0]
        for jitter in (JITTER, JITTER_RETRY):
            try:
                factor = linalg.cho_factor(K + (self.noise_var + jitter) * np.eye(n), lower=True)
                break
            except linalg.LinAlgError:
                logger.warning(f"Cholesky failed with jitter {jitter:g} on {n} points")
        else:
            raise IllConditionedModelError(f"Kernel matrix of {n} training points is not positive definite")
        self._factor = factor
        self._alpha = linalg.cho_solve(factor, np.asarray(self.train_values, dtype=float))
        return factor

    def predict(self, times, states) -> Tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and variance at many points.

        Args:
            times: Time index per query point
            states: State id per query point

        Returns:
            (means, variances) arrays
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        states = np.atleast_1d(np.asarray(states, dtype=int))
        prior = self.prior_variance(times, states)
        if not self.train_points:
            return np.zeros(len(states)), prior
        factor = self._factorize()
        train_times, train_states = self._train_arrays()
        k_star = self.cross_kernel(train_times, train_states, times, states)
        mean = k_star.T @ self._alpha
        v = linalg.solve_triangular(factor[0], k_star, lower=True)
        var = prior - np.sum(v * v, axis=0)
        return mean, np.maximum(var, 0.0)

    def posterior(self, q: SpaceTimePoint) -> Tuple[float, float]:
        """Posterior (mean, variance) at a single point."""
        mean, var = self.predict([q.t], [q.s])
        return float(mean[0]), float(var[0])


def posterior(gp: GpModel, q: SpaceTimePoint) -> Tuple[float, float]:
    return gp.posterior(q)


def add_observation(gp: GpModel, p: SpaceTimePoint, y: float) -> GpModel:
    return gp.add_observation(p, y)


class BoundsTable:
    """
    Running intersections C_t of confidence intervals, one slice per time index.

    A slice holds the lower and upper bound of every state at one time index.
    Untracked slices start unbounded, except the slice at t=0 where states of
    the initial safe set start at [h, inf).
    """

    def __init__(self, n_states: int, beta: float, h: float, initial_safe: np.ndarray):
        if not (beta > 0 and math.isfinite(beta)):
            raise ParameterError(f"beta must be positive, got {beta}")
        self.n_states = int(n_states)
        self.beta = float(beta)
        self.h = float(h)
        self.initial_safe = np.asarray(initial_safe, dtype=bool).copy()
        self._lower: Dict[int, np.ndarray] = {}
        self._upper: Dict[int, np.ndarray] = {}
        self.calibration_warnings = 0

    def _initial_slice(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        lower = np.full(self.n_states, -np.inf)
        upper = np.full(self.n_states, np.inf)
        if t == 0:
            lower[self.initial_safe] = self.h
        return lower, upper

    def tracked_times(self) -> List[int]:
        return sorted(self._lower)

    def lower(self, t: int) -> np.ndarray:
        if t in self._lower:
            return self._lower[t]
        return self._initial_slice(t)[0]

    def upper(self, t: int) -> np.ndarray:
        if t in self._upper:
            return self._upper[t]
        return self._initial_slice(t)[1]

    def width(self, t: int) -> np.ndarray:
        return self.upper(t) - self.lower(t)

    def interval(self, q: SpaceTimePoint) -> Tuple[float, float]:
        return float(self.lower(q.t)[q.s]), float(self.upper(q.t)[q.s])

    def intersect_slice(self, t: int, q_lower: np.ndarray, q_upper: np.ndarray) -> None:
        """Intersect the whole slice at t with per-state intervals."""
        if t in self._lower:
            prev_lower, prev_upper = self._lower[t], self._upper[t]
        else:
            prev_lower, prev_upper = self._initial_slice(t)
        new_lower = np.maximum(prev_lower, q_lower)
        new_upper = np.minimum(prev_upper, q_upper)
        empty = new_lower > new_upper
        if np.any(empty):
            count = int(np.sum(empty))
            self.calibration_warnings += count
            logger.warning(f"Empty confidence intersection at t={t} for {count} state(s); keeping previous bounds")
            new_lower[empty] = prev_lower[empty]
            new_upper[empty] = prev_upper[empty]
        self._lower[t] = new_lower
        self._upper[t] = new_upper

    def intersect(self, q: SpaceTimePoint, interval: Tuple[float, float]) -> Tuple[float, float]:
        """Intersect the stored interval of one point with Q and return the result."""
        lower_q = np.full(self.n_states, -np.inf)
        upper_q = np.full(self.n_states, np.inf)
        lower_q[q.s], upper_q[q.s] = interval
        self.intersect_slice(q.t, lower_q, upper_q)
        return self.interval(q)

    def retain(self, times: Sequence[int]) -> None:
        """Forget every slice whose time index is not listed."""
        keep = set(times)
        for t in [t for t in self._lower if t not in keep]:
            del self._lower[t]
            del self._upper[t]


def confidence_interval(gp: GpModel, bounds: BoundsTable, q: SpaceTimePoint) -> Tuple[float, float]:
    """Q(q) = [mu - sqrt(beta) sigma, mu + sqrt(beta) sigma]."""
    mean, var = gp.posterior(q)
    half = math.sqrt(bounds.beta) * math.sqrt(var)
    return mean - half, mean + half


def confidence_slice(gp: GpModel, beta: float, t: int, n_states: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Confidence intervals of every state at time t, plus the means."""
    states = np.arange(n_states)
    mean, var = gp.predict(np.full(n_states, t), states)
    half = math.sqrt(beta) * np.sqrt(var)
    return mean - half, mean + half, mean


def intersect_bounds(bounds: BoundsTable, q: SpaceTimePoint, interval: Tuple[float, float]) -> Tuple[float, float]:
    return bounds.intersect(q, interval)


@dataclass
class InfoGainResult:
    gamma: float
    selected_subset: List[SpaceTimePoint]


def _gain(K: np.ndarray, idx: Sequence[int], noise_var: float) -> float:
    if not len(idx):
        return 0.0
    sub = K[np.ix_(idx, idx)]
    sign, logdet = np.linalg.slogdet(np.eye(len(idx)) + sub / noise_var)
    if sign <= 0:
        raise IllConditionedModelError("I + K/noise is not positive definite")
    return 0.5 * logdet


def mutual_information(kernel: KernelSpec, points: Sequence[SpaceTimePoint],
                       noise_var: float, coords: np.ndarray) -> float:
    """I(g; y_A) = 1/2 log det(I + K_A / noise_var)."""
    if noise_var <= 0:
        raise ParameterError(f"noise_var must be positive, got {noise_var}")
    gp = GpModel(kernel, coords, noise_var)
    times = [p.t for p in points]
    states = [p.s for p in points]
    K = gp.cross_kernel(times, states, times, states)
    return _gain(K, range(len(points)), noise_var)


def information_gain(kernel: KernelSpec, domain: Sequence[SpaceTimePoint], T: int,
                     noise_var: float, coords: np.ndarray, mode: str = 'greedy') -> InfoGainResult:
    """
    Maximum mutual information from at most T noisy observations of the domain.

    Args:
        kernel: Kernel tree
        domain: Candidate points
        T: Observation budget
        noise_var: Observation noise variance
        coords: State coordinates used for spatial distances
        mode: 'exact' (subset enumeration) or 'greedy'

    Returns:
        InfoGainResult with the gain and the chosen points
    """
    if T < 1:
        raise ParameterError(f"T must be at least 1, got {T}")
    if noise_var <= 0:
        raise ParameterError(f"noise_var must be positive, got {noise_var}")
    domain = list(domain)
    if not domain:
        return InfoGainResult(0.0, [])
    gp = GpModel(kernel, coords, noise_var)
    times = [p.t for p in domain]
    states = [p.s for p in domain]
    K = gp.cross_kernel(times, states, times, states)
    size = min(T, len(domain))

    if mode == 'exact':
        if len(domain) > MAX_EXACT_DOMAIN:
            raise DomainTooLargeError(f"Exact information gain supports at most {MAX_EXACT_DOMAIN} points, got {len(domain)}")
        # gain never decreases when a point is added, so the largest subsets suffice
        best, best_idx = -np.inf, ()
        for idx in itertools.combinations(range(len(domain)), size):
            value = _gain(K, idx, noise_var)
            if value > best:
                best, best_idx = value, idx
        return InfoGainResult(float(best), [domain[i] for i in best_idx])

    if mode != 'greedy':
        raise ParameterError(f"Unknown information gain mode: {mode!r}")
    chosen: List[int] = []
    current = 0.0
    for _ in range(size):
        best, best_i = -np.inf, None
        for i in range(len(domain)):
            if i in chosen:
                continue
            value = _gain(K, chosen + [i], noise_var)
            if value > best:
                best, best_i = value, i
        chosen.append(best_i)
        current = best
    return InfoGainResult(float(current), [domain[i] for i in chosen])


def compute_beta(t: int, B: float, gamma_t: float, delta: float) -> float:
    """beta_t = 2B + 300 gamma_t log^3(t / delta)."""
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if B < 0 or gamma_t < 0:
        raise ParameterError(f"B and gamma_t must be non-negative, got {B}, {gamma_t}")
    return 2.0 * B + 300.0 * gamma_t * math.log(t / delta) ** 3
