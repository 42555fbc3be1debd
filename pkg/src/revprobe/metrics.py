"""Information-theoretic and classification metrics.

All information quantities are in nats.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ArgumentError, ConstructionError
from .probe import ReverseProbe, mean_cross_entropy, probe_logits

NORMALIZERS = ("arithmetic", "geometric", "max", "min")


def entropy(counts) -> float:
    """Plug-in entropy ``-sum p ln p`` of a histogram (``0 ln 0 = 0``)."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if np.any(c < 0):
        raise ArgumentError("counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ArgumentError("entropy of an all-zero histogram is undefined")
    # sorted so equal histograms in any order give bit-identical entropies
    p = np.sort(c[c > 0]) / total
    return float(max(0.0, -np.sum(p * np.log(p))))


@dataclass(frozen=True)
class InfoEstimate:
    h_clusters: float
    cond_entropy_bound: float
    mi_lower_bound: float
    normalized: float
    normalized_raw: float

    @property
    def mi_lower_bound_bits(self) -> float:
        return self.mi_lower_bound / math.log(2)

    @property
    def cond_entropy_bound_bits(self) -> float:
        return self.cond_entropy_bound / math.log(2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mi_lower_bound_bits"] = self.mi_lower_bound_bits
        d["cond_entropy_bound_bits"] = self.cond_entropy_bound_bits
        return d


def info_estimate(assignments, probe: ReverseProbe, concepts, test_idx) -> InfoEstimate:
    """Lower-bound the cluster/concept mutual information.

    ``H(clusters)`` comes from the full-dataset cluster frequencies and the
    conditional entropy is bounded by the probe's mean held-out cross-entropy.
    The raw difference may be negative and is kept as is; ``normalized`` is
    clamped to [0, 1] for display.
    """
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if test_idx.size == 0:
        raise ArgumentError("info_estimate needs a non-empty test set")
    h = entropy(assignments.counts)
    ce = mean_cross_entropy(probe_logits(probe, concepts, test_idx), assignments.labels[test_idx])
    mi = h - ce
    raw = mi / h if h > 0 else 0.0
    return InfoEstimate(h, ce, mi, float(np.clip(raw, 0.0, 1.0)), raw)


# --------------------------------------------------------------------------
# labelling comparison


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    row_labels: tuple = ()
    col_labels: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.size == 0 or np.any(c < 0) or c.sum() < 1:
            raise ConstructionError("contingency counts must be a non-empty, non-negative table with n >= 1")
        object.__setattr__(self, "counts", c)

    @property
    def rows(self) -> int:
        return self.counts.shape[0]

    @property
    def cols(self) -> int:
        return self.counts.shape[1]

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def contingency(labels_a, labels_b) -> ContingencyTable:
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise ArgumentError(f"labelings differ in length ({a.size} vs {b.size})")
    if a.size == 0:
        raise ArgumentError("labelings are empty")
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    counts = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts, tuple(ua.tolist()), tuple(ub.tolist()))


def _normalizer(h_a: float, h_b: float, kind: str) -> float:
    if kind == "arithmetic":
        return 0.5 * (h_a + h_b)
    if kind == "geometric":
        return math.sqrt(h_a * h_b)
    if kind == "max":
        return max(h_a, h_b)
    if kind == "min":
        return min(h_a, h_b)
    raise ArgumentError(f"unknown normalizer {kind!r}; choose from {NORMALIZERS}")


def _mutual_info(counts: np.ndarray) -> float:
    # H(A) + H(B) - H(A, B); identical labelings cancel exactly
    h = entropy(counts.sum(axis=1)) + entropy(counts.sum(axis=0)) - entropy(counts)
    return float(max(0.0, h))


def mi_nmi(table: ContingencyTable, normalizer: str = "arithmetic") -> tuple[float, float]:
    """Mutual information of a table and its normalized value.

    Both entropies zero counts as perfect agreement (NMI = 1).
    """
    mi = _mutual_info(table.counts)
    h_a = entropy(table.counts.sum(axis=1))
    h_b = entropy(table.counts.sum(axis=0))
    if h_a == 0 and h_b == 0:
        return mi, 1.0
    norm = _normalizer(h_a, h_b, normalizer)
    if norm <= 0:
        return mi, 0.0
    return mi, float(min(1.0, mi / norm))


def expected_mi(row_sums, col_sums, n: int | None = None) -> float:
    """Expected mutual information under the fixed-margin permutation model.

    Sums the hypergeometric expectation of every cell with log-gamma
    arithmetic, skipping support values whose probability is provably below
    1e-300 (this only matters for large n). Cells sharing the same (row margin, column margin) pair have
    identical expectations, so each distinct pair is evaluated once.
    """
    a = np.asarray(row_sums, dtype=np.int64)
    b = np.asarray(col_sums, dtype=np.int64)
    a, b = a[a > 0], b[b > 0]
    if n is None:
        n = int(a.sum())
    if a.sum() != n or b.sum() != n:
        raise ArgumentError("margins are inconsistent with n")
    if a.size <= 1 or b.size <= 1:
        return 0.0
    ua, ca = np.unique(a, return_counts=True)
    ub, cb = np.unique(b, return_counts=True)
    ai, bj = (v.ravel() for v in np.meshgrid(ua, ub, indexing="ij"))
    mult = np.outer(ca, cb).ravel().astype(np.float64)

    lo = np.maximum(1, ai + bj - n)
    hi = np.minimum(ai, bj)
    # Hoeffding: mass beyond t of the mean is below 2 exp(-2 t^2 / min(a, b));
    # at t^2 = 350 min(a, b) that is < 1e-300, so those terms are skipped
    mean = ai * bj / n
    t = np.sqrt(350.0 * np.minimum(ai, bj))
    lo = np.maximum(lo, np.floor(mean - t).astype(np.int64))
    hi = np.minimum(hi, np.ceil(mean + t).astype(np.int64))
    lengths = np.maximum(0, hi - lo + 1)
    keep = lengths > 0
    ai, bj, mult, lo, lengths = ai[keep], bj[keep], mult[keep], lo[keep], lengths[keep]
    pair = np.repeat(np.arange(ai.size), lengths)
    offset = np.arange(pair.size) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    nij = (lo[pair] + offset).astype(np.float64)
    A = ai[pair].astype(np.float64)
    B = bj[pair].astype(np.float64)
    N = float(n)

    log_prob = (gammaln(A + 1) + gammaln(B + 1) + gammaln(N - A + 1) + gammaln(N - B + 1)
                - gammaln(N + 1) - gammaln(nij + 1) - gammaln(A - nij + 1)
                - gammaln(B - nij + 1) - gammaln(N - A - B + nij + 1))
    term = nij / N * (np.log(N) + np.log(nij) - np.log(A) - np.log(B)) * np.exp(log_prob)
    return float(np.sum(term * mult[pair]))


def ami(table: ContingencyTable, normalizer: str = "arithmetic") -> float:
    """Chance-adjusted mutual information ``(MI - EMI) / (norm - EMI)``."""
    counts = table.counts
    a, b = counts.sum(axis=1), counts.sum(axis=0)
    h_a, h_b = entropy(a), entropy(b)
    if h_a == 0 and h_b == 0:
        return 1.0
    mi = _mutual_info(counts)
    emi = expected_mi(a, b, table.n)
    denom = _normalizer(h_a, h_b, normalizer) - emi
    num = mi - emi
    if abs(denom) < 1e-15:
        if abs(num) < 1e-15:
            return 1.0
        denom = math.copysign(1e-15, denom) if denom else 1e-15
    return float(num / denom)


# --------------------------------------------------------------------------
# classification metrics


def average_precision(scores, positives) -> float:
    """AP of one class: rank by score descending, ties by sample index."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = positives[order]
    if not hits.any():
        raise ArgumentError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def top1_and_map(scores, labels, return_absent: bool = False):
    """Top-1 accuracy and macro mAP over the classes present in ``labels``.

    Ties in the argmax go to the lowest class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size or labels.size == 0:
        raise ArgumentError("scores must be a non-empty (n, K) array aligned with labels")
    top1 = float(np.mean(np.argmax(scores, axis=1) == labels))
    present = np.unique(labels)
    aps = [average_precision(scores[:, c], labels == c) for c in present]
    mean_ap = float(np.mean(aps))
    if return_absent:
        absent = np.setdiff1d(np.arange(scores.shape[1]), present)
        return top1, mean_ap, absent.tolist()
    return top1, mean_ap


def confusion_matrix(pred, labels, k: int) -> np.ndarray:
    """Row-normalized confusion: ``C[i, j]`` = share of true-``i`` samples predicted ``j``."""
    c = np.zeros((k, k))
    np.add.at(c, (np.asarray(labels), np.asarray(pred)), 1.0)
    rows = c.sum(axis=1, keepdims=True)
    return np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)


def confusion_pairs(pred_base, pred_ext, labels, k: int | None = None):
    """Cluster pairs ranked by how much the extended probe reduces their confusion.

    Returns ``[(i, j, drop)]`` for ``i < j`` where ``drop = conf_base(i, j) -
    conf_ext(i, j)`` and ``conf(i, j) = C[i, j] + C[j, i]``; sorted by drop
    descending, then by ``(i, j)``.
    """
    pred_base = np.asarray(pred_base)
    pred_ext = np.asarray(pred_ext)
    labels = np.asarray(labels)
    if not (pred_base.shape == pred_ext.shape == labels.shape):
        raise ArgumentError("prediction sets must cover the same samples")
    if k is None:
        k = int(max(pred_base.max(), pred_ext.max(), labels.max())) + 1
    ca = confusion_matrix(pred_base, labels, k)
    cb = confusion_matrix(pred_ext, labels, k)
    pa, pb = ca + ca.T, cb + cb.T
    i, j = np.triu_indices(k, 1)
    drop = pa[i, j] - pb[i, j]
    order = np.lexsort((j, i, -drop))
    return [(int(i[o]), int(j[o]), float(drop[o])) for o in order]


def coefficient_diff(probe: ReverseProbe, cluster_i: int, cluster_j: int, top_n: int = 10):
    """Concepts with the largest ``|theta[i] - theta[j]|``.

    Positive differences favour ``cluster_i``. Ties go to the lower concept index.
    """
    if cluster_i == cluster_j:
        raise ArgumentError("coefficient_diff needs two distinct clusters")
    if not (0 <= cluster_i < probe.k and 0 <= cluster_j < probe.k):
        raise ArgumentError(f"clusters must lie in [0, {probe.k})")
    diff = probe.weights[cluster_i] - probe.weights[cluster_j]
    order = np.lexsort((np.arange(diff.size), -np.abs(diff)))[:top_n]
    names = probe.concept_names or tuple(f"concept_{m}" for m in range(probe.m))
    return [(names[m], float(diff[m])) for m in order]


# --------------------------------------------------------------------------
# report


@dataclass
class ProbeReport:
    info: InfoEstimate
    nmi: float
    ami: float
    top1: float
    map: float
    k: int
    n_test: int
    cross_entropy: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "info": self.info.to_dict(),
            "nmi": self.nmi,
            "ami": self.ami,
            "top1": self.top1,
            "map": self.map,
            "k": self.k,
            "n_test": self.n_test,
            "cross_entropy": self.cross_entropy,
            "cross_entropy_bits": self.cross_entropy / math.log(2),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeReport":
        info = {k: d["info"][k] for k in InfoEstimate.__dataclass_fields__}
        return cls(InfoEstimate(**info), d["nmi"], d["ami"], d["top1"], d["map"], d["k"],
                   d["n_test"], d["cross_entropy"], d.get("provenance", {}))


def evaluate_probe(probe: ReverseProbe, concepts, assignments, test_idx,
                   normalizer: str = "arithmetic", provenance: dict | None = None) -> ProbeReport:
    """All held-out metrics of a trained probe against the cluster labels."""
    test_idx = np.asarray(test_idx, dtype=np.int64)
    info = info_estimate(assignments, probe, concepts, test_idx)
    logits = probe_logits(probe, concepts, test_idx)
    truth = assignments.labels[test_idx]
    pred = np.argmax(logits, axis=1)
    table = contingency(truth, pred)
    _, nmi = mi_nmi(table, normalizer)
    top1, mean_ap, absent = top1_and_map(logits, truth, return_absent=True)
    prov = dict(provenance or {})
    prov.setdefault("nmi_normalizer", normalizer)
    prov["map_absent_clusters"] = len(absent)
    return ProbeReport(info, nmi, ami(table, normalizer), top1, mean_ap, assignments.k,
                       int(test_idx.size), info.cond_entropy_bound, prov)
