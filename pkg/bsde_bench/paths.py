"""Brownian path ensembles on a fine partition with exact coarse views."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .utils import get_logger, resolve_threads

logger = get_logger(__name__)

# Rows per generator stream. Part of the determinism contract: changing it
# changes every ensemble.
CHUNK_PATHS = 4096

# Stream purposes, first word of every generator key.
_ENSEMBLE, _BRANCH, _ONE_STEP = 0, 1, 2


class EnsembleAllocationError(MemoryError):
    """Raised when the increment matrix cannot be allocated."""


@dataclass(frozen=True, eq=False)
class Partition:
    """Strictly increasing time grid 0 = t_0 < ... < t_n = T."""
    times: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("Partition needs at least two time points")
        if times[0] != 0.0:
            raise ValueError(f"Partition must start at 0, got {times[0]}")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("Partition times must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, 'times', times)

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @cached_property
    def steps(self) -> np.ndarray:
        """Step sizes Δ_i = t_{i+1} - t_i."""
        return np.diff(self.times)

    @classmethod
    def from_times(cls, times: Sequence[float]) -> 'Partition':
        return cls(np.asarray(times, dtype=float))


class MeshStats(NamedTuple):
    mesh: float
    max_ratio: float


def uniform_partition(T: float, n: int) -> Partition:
    """Uniform grid with times[i] = i*T/n."""
    if not T > 0:
        raise ValueError(f"Horizon must be positive, got T={T}")
    if int(n) != n or n < 1:
        raise ValueError(f"Step count must be a positive integer, got n={n}")
    n = int(n)
    times = np.arange(n + 1, dtype=float) * T / n
    times[-1] = T
    return Partition(times)


def mesh_stats(partition: Partition) -> MeshStats:
    """Mesh |π| = max Δ_i and the largest neighbour ratio Δ_i/Δ_{i+1}."""
    steps = partition.steps
    mesh = float(steps.max())
    if partition.n == 1:
        return MeshStats(mesh, 1.0)
    return MeshStats(mesh, float(np.max(steps[:-1] / steps[1:])))


def sub_partition(fine: Partition, n: int) -> Partition:
    """Coarse partition made of every (fine.n // n)-th fine point."""
    if n < 1 or fine.n % n != 0:
        raise ValueError(f"Coarse step count {n} must divide the fine step count {fine.n}")
    return Partition(fine.times[::fine.n // n].copy())


def subset_indices(fine: Partition, coarse: Partition) -> np.ndarray:
    """Fine-grid index of every coarse time; the coarse grid must be an index subset."""
    idx = np.searchsorted(fine.times, coarse.times)
    if np.any(idx > fine.n) or not np.array_equal(fine.times[np.minimum(idx, fine.n)], coarse.times):
        raise ValueError("Coarse partition is not an index subset of the fine partition")
    return idx


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian increments [n_paths x fine.n]; immutable after construction."""
    fine: Partition
    n_paths: int
    seed: int
    increments: np.ndarray

    @cached_property
    def W(self) -> np.ndarray:
        """Cumulative Brownian values [n_paths x (fine.n + 1)] with W_0 = 0."""
        W = np.zeros((self.n_paths, self.fine.n + 1))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        W.setflags(write=False)
        return W

    @property
    def horizon(self) -> float:
        return self.fine.horizon


def sample_ensemble(
    fine: Partition,
    n_paths: int,
    seed: int,
    threads: Optional[int] = None
) -> PathEnsemble:
    """
    Sample Brownian increments on the fine grid.

    Increment (p, k) is drawn from the Philox stream keyed by
    (seed, p // CHUNK_PATHS) at row p % CHUNK_PATHS, so the output is a pure
    function of (fine, n_paths, seed) whatever the thread count.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if seed < 0:
        raise ValueError(f"seed must be a non-negative 64-bit integer, got {seed}")

    try:
        increments = np.empty((n_paths, fine.n))
    except MemoryError as e:
        raise EnsembleAllocationError(
            f"Cannot allocate {n_paths} x {fine.n} increment matrix: {e}"
        ) from e

    scale = np.sqrt(fine.steps)
    n_chunks = -(-n_paths // CHUNK_PATHS)

    def fill(chunk: int) -> None:
        start = chunk * CHUNK_PATHS
        stop = min(start + CHUNK_PATHS, n_paths)
        normals = _stream(seed, _ENSEMBLE, chunk).standard_normal((stop - start, fine.n))
        increments[start:stop] = normals * scale

    workers = min(resolve_threads(threads), n_chunks)
    if workers <= 1:
        for chunk in range(n_chunks):
            fill(chunk)
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(fill, range(n_chunks)))

    increments.setflags(write=False)
    logger.info(f"Sampled ensemble: {n_paths} paths x {fine.n} steps (seed={seed}, threads={workers})")
    return PathEnsemble(fine=fine, n_paths=n_paths, seed=seed, increments=increments)


@dataclass(frozen=True, eq=False)
class CoarseView:
    """Coarse-grid view of an ensemble; W agrees exactly with the fine W at shared times."""
    ensemble: PathEnsemble
    partition: Partition
    indices: np.ndarray

    @cached_property
    def W(self) -> np.ndarray:
        return self.ensemble.W[:, self.indices]

    @cached_property
    def increments(self) -> np.ndarray:
        """Coarse increments as sums of the fine increments inside each interval."""
        return np.add.reduceat(self.ensemble.increments, self.indices[:-1], axis=1)


def coarsen(ensemble: PathEnsemble, coarse: Partition) -> CoarseView:
    """View of the ensemble on a coarse partition made of fine grid points."""
    return CoarseView(ensemble=ensemble, partition=coarse, indices=subset_indices(ensemble.fine, coarse))


def branch_paths(
    ensemble: PathEnsemble,
    path: int,
    node: int,
    n_inner: int,
    seed: int
) -> np.ndarray:
    """
    Inner continuations of one outer path.

    Returns W [n_inner x (fine.n + 1)] equal to the outer path up to fine
    index `node` and driven by fresh increments, keyed by (seed, node, path),
    afterwards.
    """
    if n_inner < 1:
        raise ValueError(f"Inner path count must be >= 1, got {n_inner}")
    fine = ensemble.fine
    W = np.empty((n_inner, fine.n + 1))
    W[:, :node + 1] = ensemble.W[path, :node + 1]
    if node < fine.n:
        fresh = _stream(seed, _BRANCH, node, path).standard_normal((n_inner, fine.n - node))
        fresh *= np.sqrt(fine.steps[node:])
        W[:, node + 1:] = ensemble.W[path, node] + np.cumsum(fresh, axis=1)
    return W


def one_step_normals(seed: int, node: int, n_paths: int, n_inner: int) -> np.ndarray:
    """Standard normals [n_paths x n_inner] for inner one-step samples at a node."""
    return _stream(seed, _ONE_STEP, node).standard_normal((n_paths, n_inner))


def map_paths(
    func: Callable[[int], np.ndarray],
    n_paths: int,
    threads: Optional[int] = None
) -> np.ndarray:
    """Evaluate func(path) for every path, in a thread pool, in path order."""
    workers = min(resolve_threads(threads), n_paths)
    if workers <= 1:
        return np.array([func(p) for p in range(n_paths)])
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return np.array(list(executor.map(func, range(n_paths))))
