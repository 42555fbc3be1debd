"""Vector quantization of representation vectors with Lloyd's K-means."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import FeatureMatrix, _frozen
from .errors import ArgumentError, ConstructionError, FormatError

QUANTIZER_MAGIC = b"RPKQ"
_QUANTIZER_HEADER = struct.Struct("<4sIQQQd")

# rows x centroids x dims per distance chunk
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size < 1:
            raise ConstructionError("labels must be a non-empty 1-D vector")
        if self.k < 1 or labels.min() < 0 or labels.max() >= self.k:
            raise ConstructionError(f"labels must lie in [0, {self.k})")
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def n_samples(self) -> int:
        return self.labels.size

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def take(self, idx) -> "ClusterAssignment":
        return ClusterAssignment(self.labels[np.asarray(idx)], self.k)


@dataclass(frozen=True)
class Quantizer:
    centroids: np.ndarray
    inertia: float
    n_iterations_run: int = 0
    seed: int = 0
    # inertia after init and after every Lloyd step of the winning restart
    inertia_history: tuple = field(default=(), compare=False)
    restart_inertias: tuple = field(default=(), compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ConstructionError("a quantizer needs at least 2 centroids")
        if not np.all(np.isfinite(c)):
            raise ConstructionError("centroids must be finite")
        if self.inertia < 0:
            raise ConstructionError("inertia must be non-negative")
        object.__setattr__(self, "centroids", _frozen(c))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _as_array(features) -> np.ndarray:
    x = features.values if isinstance(features, FeatureMatrix) else features
    return np.asarray(x, dtype=np.float64)


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact ``||x_i - c_j||^2`` in float64, computed in row chunks."""
    n, d = x.shape
    k = centroids.shape[0]
    out = np.empty((n, k))
    step = max(1, _CHUNK_ELEMENTS // max(1, k * d))
    for lo in range(0, n, step):
        diff = x[lo:lo + step, None, :] - centroids[None, :, :]
        np.einsum("ijk,ijk->ij", diff, diff, out=out[lo:lo + step])
    return out


def _nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = squared_distances(x, centroids)
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, d2[np.arange(len(labels)), labels]


def _inertia(x, centroids, labels) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _cluster_means(x, labels, k, fallback):
    n = x.shape[0]
    onehot = sp.csr_matrix((np.ones(n), (labels, np.arange(n))), shape=(k, n))
    sums = onehot @ x
    counts = np.bincount(labels, minlength=k)
    means = fallback.copy()
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return means


def lloyd_step(features, centroids, current_labels):
    """One Lloyd iteration: refit centroids to ``current_labels``, then reassign.

    An empty cluster is repaired before the centroid update by moving the
    sample farthest from its current centroid (lowest index on ties, taken
    from clusters with at least two members) into it.

    Returns ``(new_centroids, new_labels, new_inertia)``; the inertia never
    exceeds that of ``(centroids, current_labels)``.
    """
    x = _as_array(features)
    centroids = np.asarray(centroids, dtype=np.float64)
    labels = np.array(current_labels, dtype=np.int64)
    k = centroids.shape[0]

    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        diff = x - centroids[labels]
        dist = np.einsum("ij,ij->i", diff, diff)
        for c in empty:
            movable = counts[labels] >= 2
            if not movable.any():
                break
            cand = np.where(movable, dist, -np.inf)
            p = int(np.argmax(cand))
            counts[labels[p]] -= 1
            labels[p] = c
            counts[c] += 1
            dist[p] = 0.0

    new_centroids = _cluster_means(x, labels, k, centroids)
    new_labels, d2 = _nearest(x, new_centroids)
    return new_centroids, new_labels, float(d2.sum())


def _init_plusplus(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            i = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen centre
            rest = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(rest))
        chosen.append(i)
        closest = np.minimum(closest, squared_distances(x, x[i:i + 1])[:, 0])
    return x[chosen].copy()


def _init_random(x, k, rng):
    return x[rng.choice(x.shape[0], size=k, replace=False)].copy()


def _lloyd_run(x, k, max_steps, rng, init):
    centroids = (_init_plusplus if init == "k-means++" else _init_random)(x, k, rng)
    labels, d2 = _nearest(x, centroids)
    history = [float(d2.sum())]
    steps = 0
    for _ in range(max_steps):
        new_centroids, new_labels, inertia = lloyd_step(x, centroids, labels)
        steps += 1
        converged = np.array_equal(new_labels, labels)
        centroids, labels = new_centroids, new_labels
        history.append(inertia)
        if converged:
            break
    return centroids, history, steps


def kmeans_fit(features, k: int, max_steps: int = 100, n_restarts: int = 5, seed: int = 0,
               init: str = "k-means++") -> Quantizer:
    """Best-of-``n_restarts`` Lloyd K-means.

    Each restart draws its own generator from ``SeedSequence(seed)``; the fit
    with the lowest inertia wins (earliest restart on exact ties). Features are
    expected to be standardized already.
    """
    x = _as_array(features)
    n = x.shape[0]
    if not 2 <= k <= n:
        raise ArgumentError(f"k must satisfy 2 <= k <= n_samples ({n}), got {k}")
    if n_restarts < 1 or max_steps < 0:
        raise ArgumentError("need n_restarts >= 1 and max_steps >= 0")
    if init not in ("k-means++", "random"):
        raise ArgumentError(f"unknown init {init!r}")
    best = None
    restart_inertias = []
    for child in np.random.SeedSequence(seed).spawn(n_restarts):
        centroids, history, steps = _lloyd_run(x, k, max_steps, np.random.default_rng(child), init)
        restart_inertias.append(history[-1])
        if best is None or history[-1] < best[1][-1]:
            best = (centroids, history, steps)
    centroids, history, steps = best
    return Quantizer(centroids, history[-1], steps, seed, tuple(history), tuple(restart_inertias))


def assign(q: Quantizer, features) -> ClusterAssignment:
    """Label each sample with its nearest centroid (lowest index on ties)."""
    x = _as_array(features)
    if x.ndim != 2 or x.shape[1] != q.dim:
        raise ArgumentError(f"features have dim {x.shape[-1]}, quantizer expects {q.dim}")
    labels, _ = _nearest(x, q.centroids)
    return ClusterAssignment(labels, q.k)


def save_quantizer(q: Quantizer, path) -> None:
    header = _QUANTIZER_HEADER.pack(QUANTIZER_MAGIC, 1, q.k, q.dim, q.seed, q.inertia)
    Path(path).write_bytes(header + q.centroids.astype("<f8").tobytes(order="C"))


def load_quantizer(path) -> Quantizer:
    raw = Path(path).read_bytes()
    if len(raw) < _QUANTIZER_HEADER.size:
        raise FormatError(f"{path}: file too short for an RPKQ header")
    magic, version, k, d, seed, inertia = _QUANTIZER_HEADER.unpack_from(raw)
    if magic != QUANTIZER_MAGIC or version != 1:
        raise FormatError(f"{path}: not an RPKQ v1 file")
    payload = raw[_QUANTIZER_HEADER.size:]
    if len(payload) != k * d * 8:
        raise FormatError(f"{path}: expected {k * d * 8} centroid bytes, found {len(payload)}")
    centroids = np.frombuffer(payload, dtype="<f8").reshape(k, d).astype(np.float64)
    return Quantizer(centroids, inertia, 0, seed)
