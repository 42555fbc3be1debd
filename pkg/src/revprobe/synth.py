"""Synthetic datasets: the forward/reverse toy example and oracle joints with exact MI."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import ConceptGroup, ConceptMatrix, FeatureMatrix
from .errors import ArgumentError, ConstructionError
from .quantize import ClusterAssignment

TOY_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
MAX_EXACT_CONCEPTS = 16


@dataclass(frozen=True)
class ToySpec:
    n_per_cluster: int = 200
    layout: str = "xor"
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_per_cluster < 1:
            raise ConstructionError("n_per_cluster must be >= 1")
        if self.layout not in ("separable", "xor"):
            raise ConstructionError(f"layout must be 'separable' or 'xor', got {self.layout!r}")
        # corners are 1 apart; keep blobs disjoint
        if not 0 <= self.noise_std < 0.15:
            raise ConstructionError("noise_std must lie in [0, 0.15)")


def gen_toy(spec: ToySpec):
    """Four Gaussian blobs on the corners of the unit square.

    ``shape`` (1 = square) follows the x coordinate in both layouts. ``color``
    (1 = red) follows the y coordinate in the separable layout and x XOR y in
    the xor layout, where no line separates it.

    Returns ``(features, concepts, clusters)`` with K = 4 ground-truth blobs.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_per_cluster
    labels = np.repeat(np.arange(4), n)
    corners = TOY_CORNERS[labels]
    x = corners + rng.normal(0.0, spec.noise_std, size=corners.shape)
    cx, cy = corners[:, 0].astype(int), corners[:, 1].astype(int)
    color = cy if spec.layout == "separable" else cx ^ cy
    shape = cx
    bits = np.stack([color, shape], axis=1)
    concepts = ConceptMatrix(bits, ("red", "square"),
                             (ConceptGroup("color", 0, 1), ConceptGroup("shape", 1, 1)))
    return FeatureMatrix(x, f"toy-{spec.layout}"), concepts, ClusterAssignment(labels, 4)


# --------------------------------------------------------------------------
# oracle joints


@dataclass(frozen=True)
class OracleSpec:
    concept_given_cluster: np.ndarray
    cluster_prior: np.ndarray
    n_samples: int = 20000
    seed: int = 0

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.concept_given_cluster, dtype=np.float64))
        prior = np.asarray(self.cluster_prior, dtype=np.float64)
        if prior.shape != (p.shape[0],):
            raise ConstructionError("cluster_prior must have one entry per row of concept_given_cluster")
        if np.any((p < 0) | (p > 1)) or np.any(prior < 0):
            raise ConstructionError("probabilities must lie in [0, 1]")
        if abs(prior.sum() - 1.0) > 1e-12:
            raise ConstructionError("cluster_prior must sum to 1")
        if self.n_samples < 1:
            raise ConstructionError("n_samples must be >= 1")
        object.__setattr__(self, "concept_given_cluster", p)
        object.__setattr__(self, "cluster_prior", prior)

    @property
    def k(self) -> int:
        return self.concept_given_cluster.shape[0]

    @property
    def m(self) -> int:
        return self.concept_given_cluster.shape[1]

    def to_dict(self) -> dict:
        return {"concept_given_cluster": self.concept_given_cluster.tolist(),
                "cluster_prior": self.cluster_prior.tolist(),
                "n_samples": self.n_samples, "seed": self.seed}


def _xlogy(x, y):
    return np.where(x > 0, x * np.log(np.where(y > 0, y, 1.0)), 0.0)


def analytic_information(concept_given_cluster, cluster_prior) -> dict:
    """Exact H(cluster), H(cluster | concepts) and MI for conditionally independent bits.

    Enumerates all ``2**M`` concept vectors.
    """
    p = np.atleast_2d(np.asarray(concept_given_cluster, dtype=np.float64))
    prior = np.asarray(cluster_prior, dtype=np.float64)
    m = p.shape[1]
    if m > MAX_EXACT_CONCEPTS:
        raise ArgumentError(f"exact enumeration supports at most {MAX_EXACT_CONCEPTS} concepts, got {m}")
    ys = np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.float64)  # 2^M x M
    # p(y | k) = prod_m p^y (1 - p)^(1 - y)
    lik = np.prod(np.where(ys[None, :, :] == 1, p[:, None, :], 1.0 - p[:, None, :]), axis=2)
    joint = prior[:, None] * lik  # K x 2^M
    p_y = joint.sum(axis=0)
    h_cluster = float(-np.sum(_xlogy(prior, prior)))
    cond = float(-np.sum(_xlogy(joint, joint / np.where(p_y > 0, p_y, 1.0)[None, :])))
    cond = max(0.0, cond)
    return {"h_cluster": h_cluster, "cond_entropy": cond, "mi": max(0.0, h_cluster - cond)}


def gen_oracle(spec: OracleSpec):
    """Sample clusters from the prior and conditionally independent concept bits.

    Returns ``(clusters, concepts, analytic)`` where ``analytic`` holds the
    exact ``h_cluster``, ``cond_entropy`` and ``mi`` of the generating joint.
    """
    analytic = analytic_information(spec.concept_given_cluster, spec.cluster_prior)
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(spec.k, size=spec.n_samples, p=spec.cluster_prior)
    bits = (rng.random((spec.n_samples, spec.m)) < spec.concept_given_cluster[labels]).astype(np.uint8)
    names = tuple(f"c{j}" for j in range(spec.m))
    concepts = ConceptMatrix(bits, names, (ConceptGroup("oracle", 0, spec.m),))
    return ClusterAssignment(labels, spec.k), concepts, analytic


# --------------------------------------------------------------------------
# group-structured concepts


@dataclass(frozen=True)
class GroupSpec:
    """One concept group.

    ``kind`` is ``deterministic`` (cluster indicator bits), ``noisy``
    (indicator bits flipped with probability ``flip``) or ``independent``
    (fair coins, ``m`` bits).
    """

    name: str
    kind: str = "deterministic"
    flip: float = 0.0
    m: int | None = None

    def __post_init__(self):
        if self.kind not in ("deterministic", "noisy", "independent"):
            raise ConstructionError(f"unknown group kind {self.kind!r}")
        if not 0 <= self.flip <= 1:
            raise ConstructionError("flip must lie in [0, 1]")

    def bernoulli(self, k: int) -> np.ndarray:
        if self.kind == "independent":
            return np.full((k, self.m or k), 0.5)
        eye = np.eye(k)
        flip = self.flip if self.kind == "noisy" else 0.0
        return eye * (1 - flip) + (1 - eye) * flip


@dataclass(frozen=True)
class GroupStructuredSpec:
    k: int = 8
    groups: tuple = (GroupSpec("A", "deterministic"), GroupSpec("B", "noisy", 0.2),
                     GroupSpec("C", "independent", m=8))
    n_samples: int = 20000
    cluster_prior: tuple | None = None
    seed: int = 0

    def prior(self) -> np.ndarray:
        if self.cluster_prior is None:
            return np.full(self.k, 1.0 / self.k)
        return np.asarray(self.cluster_prior, dtype=np.float64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d


def gen_group_structured(spec: GroupStructuredSpec):
    """Clusters plus several concept groups of controlled informativeness.

    Returns ``(clusters, concepts, per_group_mi)``; ``per_group_mi[name]`` is the
    exact MI between the clusters and that group alone.
    """
    if len(spec.groups) < 1:
        raise ArgumentError("need at least one concept group")
    prior = spec.prior()
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(spec.k, size=spec.n_samples, p=prior)
    cols, names, groups, per_group = [], [], [], {}
    pos = 0
    for g in spec.groups:
        p = g.bernoulli(spec.k)
        cols.append((rng.random((spec.n_samples, p.shape[1])) < p[labels]).astype(np.uint8))
        names.extend(f"{g.name}_{j}" for j in range(p.shape[1]))
        groups.append(ConceptGroup(g.name, pos, p.shape[1]))
        pos += p.shape[1]
        per_group[g.name] = analytic_information(p, prior)["mi"]
    concepts = ConceptMatrix(np.concatenate(cols, axis=1), tuple(names), tuple(groups))
    return ClusterAssignment(labels, spec.k), concepts, per_group


def embed_clusters(clusters: ClusterAssignment, dim: int = 8, separation: float = 6.0,
                   noise_std: float = 1.0, seed: int = 0) -> FeatureMatrix:
    """Features for latent clusters: Gaussian blobs around random well-spread centres."""
    rng = np.random.default_rng(seed)
    centres = rng.normal(0.0, separation / math.sqrt(2), size=(clusters.k, dim))
    x = centres[clusters.labels] + rng.normal(0.0, noise_std, size=(clusters.n_samples, dim))
    return FeatureMatrix(x, "synthetic-blobs")


def random_oracle_spec(k: int, m: int, n_samples: int = 20000, seed: int = 0,
                       sharpness: float = 0.8) -> OracleSpec:
    """A random oracle spec whose Bernoulli parameters sit near 0 or 1 with ``sharpness``."""
    rng = np.random.default_rng(seed)
    hi = rng.random((k, m)) < 0.5
    p = np.where(hi, sharpness, 1 - sharpness) + rng.uniform(-0.05, 0.05, size=(k, m))
    prior = rng.dirichlet(np.full(k, 5.0))
    prior = prior / prior.sum()
    return OracleSpec(np.clip(p, 0, 1), prior, n_samples, seed)
