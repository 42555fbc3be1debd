"""End-to-end experiments: full evaluation, group breakdowns, K sweeps,
confusion studies, transfer and ground-truth label probing."""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import __version__
from .data import ConceptMatrix, FeatureMatrix, StandardizationStats, standardize, stratified_split
from .errors import ArgumentError, DivergenceError, RevprobeError
from .metrics import ProbeReport, coefficient_diff, confusion_pairs, entropy, evaluate_probe
from .probe import ProbeConfig, ReverseProbe, predict, train_reverse_probe
from .quantize import ClusterAssignment, Quantizer, assign, kmeans_fit

METRICS = ("mi_lower_bound", "h_clusters", "cond_entropy_bound", "normalized", "nmi", "ami", "top1", "map")


@dataclass(frozen=True)
class RunConfig:
    k: int = 1000
    n_clusterings: int = 5
    kmeans_restarts: int = 5
    kmeans_steps: int = 100
    kmeans_init: str = "k-means++"
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ratio_test: float = 0.2
    ratio_val: float = 0.2
    seed: int = 0
    groups: tuple | None = None
    standardize: bool = True
    nmi_normalizer: str = "arithmetic"
    # transfer: "source" reuses the source statistics, "target" refits them
    transfer_stats: str = "source"

    def __post_init__(self):
        if self.k < 2 or self.n_clusterings < 1 or self.kmeans_restarts < 1 or self.kmeans_steps < 0:
            raise ArgumentError("need k >= 2, n_clusterings >= 1, kmeans_restarts >= 1, kmeans_steps >= 0")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(self.groups))
        if isinstance(self.probe, dict):
            object.__setattr__(self, "probe", ProbeConfig.from_dict(self.probe))
        if self.transfer_stats not in ("source", "target"):
            raise ArgumentError("transfer_stats must be 'source' or 'target'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probe"] = self.probe.to_dict()
        d["groups"] = list(self.groups) if self.groups is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def resolve_groups(self, concepts: ConceptMatrix) -> list[str]:
        names = list(self.groups) if self.groups else concepts.group_names
        missing = [g for g in names if g not in concepts.group_names]
        if missing:
            raise ArgumentError(f"unknown concept group(s) {missing}; available: {concepts.group_names}")
        return names


def derived_seeds(master: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


def array_hash(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256(str(a.dtype).encode() + str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@contextmanager
def _run_context(label: str):
    try:
        yield
    except DivergenceError as exc:
        raise DivergenceError(exc.epoch, exc.lr, f"{label}: {exc}") from exc
    except RevprobeError as exc:
        raise type(exc)(f"{label}: {exc}") from exc


@dataclass
class Clustering:
    seed: int
    quantizer: Quantizer
    assignment: ClusterAssignment
    splits: object

    @property
    def hash(self) -> str:
        return array_hash(self.assignment.labels)


def _prepare(features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig):
    if features.n_samples != concepts.n_samples:
        raise ArgumentError(f"{features.n_samples} feature rows vs {concepts.n_samples} concept rows")
    if cfg.k > features.n_samples:
        raise ArgumentError(f"k={cfg.k} exceeds n_samples={features.n_samples}")
    if cfg.standardize:
        return standardize(features)
    return features, None


def _cluster(fs: FeatureMatrix, cfg: RunConfig, seed: int) -> Clustering:
    q = kmeans_fit(fs, cfg.k, cfg.kmeans_steps, cfg.kmeans_restarts, seed, cfg.kmeans_init)
    a = assign(q, fs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        splits = stratified_split(a, cfg.ratio_test, cfg.ratio_val, seed)
    return Clustering(seed, q, a, splits)


def _probe_run(cl: Clustering, concepts: ConceptMatrix, groups: Sequence[str], cfg: RunConfig,
               run_index: int):
    sel = concepts.select_groups(groups)
    pcfg = replace(cfg.probe, seed=cl.seed)
    probe = train_reverse_probe(sel, cl.assignment, cl.splits, pcfg)
    prov = {
        "run": run_index,
        "seed": cl.seed,
        "groups": list(groups),
        "clustering_hash": cl.hash,
        "kmeans_inertia": cl.quantizer.inertia,
        "kmeans_iterations": cl.quantizer.n_iterations_run,
        "small_clusters": len(cl.splits.small_clusters),
        "n_train": int(cl.splits.train.size),
        "n_val": int(cl.splits.val.size),
        "best_epoch": probe.best_epoch,
        "probe_config": pcfg.to_dict(),
    }
    report = evaluate_probe(probe, sel, cl.assignment, cl.splits.test, cfg.nmi_normalizer, prov)
    return report, probe


def _metric_values(r: ProbeReport) -> dict:
    d = r.info.to_dict()
    return {m: (d[m] if m in d else getattr(r, m)) for m in METRICS}


def aggregate(reports: Sequence[ProbeReport]) -> dict:
    vals = [_metric_values(r) for r in reports]
    out = {}
    for m in METRICS:
        v = np.array([x[m] for x in vals])
        out[m] = {"mean": float(v.mean()), "std": float(v.std()), "median": float(np.median(v))}
    return out


@dataclass
class ExperimentReport:
    runs: list
    aggregate: dict
    best_run: int
    provenance: dict
    created_at: str = ""
    artifacts: list = field(default_factory=list, repr=False)

    def to_dict(self, with_timestamp: bool = True) -> dict:
        d = {
            "toolkit_version": __version__,
            "runs": [r.to_dict() for r in self.runs],
            "aggregate": self.aggregate,
            "best_run": self.best_run,
            "best": _metric_values(self.runs[self.best_run]),
            "provenance": self.provenance,
        }
        if with_timestamp:
            d["created_at"] = self.created_at
        return d

    def to_json(self, with_timestamp: bool = True) -> str:
        return json.dumps(self.to_dict(with_timestamp), indent=2, sort_keys=True)


def _experiment(reports, artifacts, features, concepts, cfg, extra=None) -> ExperimentReport:
    best = int(np.argmax([r.info.mi_lower_bound for r in reports]))
    prov = {
        "features_hash": array_hash(features.values),
        "concepts_hash": array_hash(concepts.bits),
        "config": cfg.to_dict(),
        "aggregation": "mean/std over clusterings; best run by mi_lower_bound",
    }
    prov.update(extra or {})
    return ExperimentReport(list(reports), aggregate(reports), best, prov,
                            time.strftime("%Y-%m-%dT%H:%M:%S%z"), artifacts)


def run_full_eval(features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig) -> ExperimentReport:
    """Cluster ``n_clusterings`` times, train a probe per clustering, aggregate."""
    groups = cfg.resolve_groups(concepts)
    fs, stats = _prepare(features, concepts, cfg)
    reports, artifacts = [], []
    for i, seed in enumerate(derived_seeds(cfg.seed, cfg.n_clusterings)):
        with _run_context(f"run {i}"):
            cl = _cluster(fs, cfg, seed)
            report, probe = _probe_run(cl, concepts, groups, cfg, i)
        reports.append(report)
        artifacts.append({"stats": stats, "clustering": cl, "probe": probe})
    return _experiment(reports, artifacts, features, concepts, cfg)


def run_breakdown(features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig,
                  mode: str = "incremental", anchor_group: str | None = None,
                  order: Sequence[str] | None = None) -> list[dict]:
    """Probe cumulative group prefixes (``incremental``) or anchor + each group (``isolation``).

    All probes of one clustering run share the same clustering and split.
    Returns one row per group set with its per-run reports and aggregate.
    """
    order = list(order) if order else cfg.resolve_groups(concepts)
    for g in order + ([anchor_group] if anchor_group else []):
        if g not in concepts.group_names:
            raise ArgumentError(f"unknown concept group {g!r}; available: {concepts.group_names}")
    if mode == "incremental":
        sets = [order[:i + 1] for i in range(len(order))]
    elif mode == "isolation":
        if anchor_group is None:
            raise ArgumentError("isolation mode needs an anchor group")
        others = [g for g in order if g != anchor_group]
        if not others:
            raise ArgumentError("isolation mode needs at least one group besides the anchor")
        sets = [[anchor_group]] + [[anchor_group, g] for g in others]
    else:
        raise ArgumentError(f"unknown breakdown mode {mode!r}")

    fs, _ = _prepare(features, concepts, cfg)
    per_set = [[] for _ in sets]
    hashes = []
    for i, seed in enumerate(derived_seeds(cfg.seed, cfg.n_clusterings)):
        with _run_context(f"run {i}"):
            cl = _cluster(fs, cfg, seed)
            hashes.append(cl.hash)
            for s, groups in enumerate(sets):
                per_set[s].append(_probe_run(cl, concepts, groups, cfg, i)[0])
    return [{"groups": groups, "mode": mode, "clustering_hashes": hashes,
             "aggregate": aggregate(reports), "runs": [r.to_dict() for r in reports]}
            for groups, reports in zip(sets, per_set)]


def run_ksweep(features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig,
               ks: Sequence[int]) -> list[dict]:
    """Full evaluation at every K (shared standardization); one curve row per K.

    ``h_clusters`` is always reported per run. When a K leaves no test samples
    (every cluster has fewer than 3 members, e.g. K = N) the probe metrics of
    that K are skipped and ``aggregate`` is None.
    """
    ks = [int(k) for k in ks]
    if not ks:
        raise ArgumentError("ks is empty")
    if ks != sorted(ks):
        raise ArgumentError("ks must be sorted ascending")
    if ks[-1] > features.n_samples:
        raise ArgumentError(f"k={ks[-1]} exceeds n_samples={features.n_samples}")
    groups = cfg.resolve_groups(concepts)
    fs, _ = _prepare(features, concepts, replace(cfg, k=ks[0]))
    rows = []
    for k in ks:
        kcfg = replace(cfg, k=k)
        reports, entropies, hashes = [], [], []
        for i, seed in enumerate(derived_seeds(cfg.seed, cfg.n_clusterings)):
            with _run_context(f"k={k} run {i}"):
                cl = _cluster(fs, kcfg, seed)
                entropies.append(entropy(cl.assignment.counts))
                hashes.append(cl.hash)
                if cl.splits.test.size:
                    reports.append(_probe_run(cl, concepts, groups, kcfg, i)[0])
        row = {"k": k, "h_clusters": entropies, "clustering_hashes": hashes,
               "aggregate": aggregate(reports) if len(reports) == len(entropies) else None,
               "runs": [r.to_dict() for r in reports]}
        if row["aggregate"] is None:
            row["skipped"] = "no test samples: clusters too small to split"
        rows.append(row)
    return rows


def run_confusion_study(features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig,
                        base_groups: Sequence[str], extra_group: str | None,
                        top_pairs: int = 10, top_n: int = 10) -> dict:
    """Cluster pairs whose confusion drops most once ``extra_group`` is added.

    Base and extended probes share one clustering and split; each listed pair
    carries the extended probe's largest coefficient differences.
    """
    base = list(base_groups)
    ext = base + ([extra_group] if extra_group and extra_group not in base else [])
    for g in ext:
        if g not in concepts.group_names:
            raise ArgumentError(f"unknown concept group {g!r}; available: {concepts.group_names}")
    fs, _ = _prepare(features, concepts, cfg)
    seed = derived_seeds(cfg.seed, 1)[0]
    with _run_context("confusion study"):
        cl = _cluster(fs, cfg, seed)
        base_report, base_probe = _probe_run(cl, concepts, base, cfg, 0)
        ext_report, ext_probe = _probe_run(cl, concepts, ext, cfg, 0)
    test = cl.splits.test
    truth = cl.assignment.labels[test]
    pred_base = predict(base_probe, concepts.select_groups(base), test)
    pred_ext = predict(ext_probe, concepts.select_groups(ext), test)
    pairs = confusion_pairs(pred_base, pred_ext, truth, cfg.k)[:top_pairs]
    return {
        "base_groups": base,
        "extended_groups": ext,
        "clustering_hash": cl.hash,
        "base": base_report.to_dict(),
        "extended": ext_report.to_dict(),
        "pairs": [{"cluster_i": i, "cluster_j": j, "confusion_drop": d,
                   "coefficients": [{"concept": n, "diff": v}
                                    for n, v in coefficient_diff(ext_probe, i, j, top_n)]}
                  for i, j, d in pairs],
    }


def confusion_text(study: dict) -> str:
    lines = [f"base: {'+'.join(study['base_groups'])}  extended: {'+'.join(study['extended_groups'])}",
             f"top-1 {study['base']['top1']:.4f} -> {study['extended']['top1']:.4f}"]
    for p in study["pairs"]:
        lines.append(f"clusters ({p['cluster_i']}, {p['cluster_j']})  drop {p['confusion_drop']:+.4f}")
        for c in p["coefficients"]:
            side = p["cluster_i"] if c["diff"] >= 0 else p["cluster_j"]
            lines.append(f"    {c['concept']:<32s} {c['diff']:+.4f}  (favours {side})")
    return "\n".join(lines) + "\n"


def run_transfer(quantizer: Quantizer, probe: ReverseProbe, stats: StandardizationStats | None,
                 features: FeatureMatrix, concepts: ConceptMatrix, cfg: RunConfig | None = None,
                 idx=None) -> ProbeReport:
    """Score a source quantizer + probe on target data without retraining."""
    cfg = cfg or RunConfig()
    if features.dim != quantizer.dim:
        raise ArgumentError(f"target features have dim {features.dim}, quantizer expects {quantizer.dim}")
    if concepts.n_concepts != probe.m:
        raise ArgumentError(f"target has {concepts.n_concepts} concepts, probe expects {probe.m}")
    if features.n_samples != concepts.n_samples:
        raise ArgumentError("target features and concepts are not aligned")
    if cfg.transfer_stats == "target" or stats is None:
        fs, _ = standardize(features) if cfg.standardize else (features, None)
    else:
        fs, _ = standardize(features, stats)
    target = assign(quantizer, fs)
    idx = np.arange(features.n_samples) if idx is None else np.asarray(idx)
    prov = {"mode": "transfer", "stats": cfg.transfer_stats if stats is not None else "target",
            "features_hash": array_hash(features.values), "concepts_hash": array_hash(concepts.bits)}
    return evaluate_probe(probe, concepts, target, idx, cfg.nmi_normalizer, prov)


def concepts_to_labels_probe(concepts: ConceptMatrix, labels, cfg: RunConfig) -> ProbeReport:
    """Reverse-probe trainer with ground-truth classes as targets instead of clusters."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size != concepts.n_samples:
        raise ArgumentError("labels must be one categorical value per concept row")
    classes, targets = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ArgumentError("need at least two label classes")
    assignment = ClusterAssignment(targets, classes.size)
    sel = concepts.select_groups(cfg.resolve_groups(concepts))
    seed = derived_seeds(cfg.seed, 1)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        splits = stratified_split(assignment, cfg.ratio_test, cfg.ratio_val, seed)
    pcfg = replace(cfg.probe, seed=seed)
    with _run_context("labels probe"):
        probe = train_reverse_probe(sel, assignment, splits, pcfg)
    prov = {"mode": "labels", "seed": seed, "n_classes": int(classes.size),
            "best_epoch": probe.best_epoch, "probe_config": pcfg.to_dict()}
    return evaluate_probe(probe, sel, assignment, splits.test, cfg.nmi_normalizer, prov)


CSV_COLUMNS = ("method_tag", "run", "K", "nmi", "ami", "top1", "map", "mi_nats")


def csv_rows(method_tag: str, report: ExperimentReport) -> list[dict]:
    rows = []
    for i, r in enumerate(report.runs):
        rows.append({"method_tag": method_tag, "run": i, "K": r.k, "nmi": r.nmi, "ami": r.ami,
                     "top1": r.top1, "map": r.map, "mi_nats": r.info.mi_lower_bound})
    agg = report.aggregate
    rows.append({"method_tag": method_tag, "run": "mean", "K": report.runs[0].k,
                 "nmi": agg["nmi"]["mean"], "ami": agg["ami"]["mean"], "top1": agg["top1"]["mean"],
                 "map": agg["map"]["mean"], "mi_nats": agg["mi_lower_bound"]["mean"]})
    best = report.runs[report.best_run]
    rows.append({"method_tag": method_tag, "run": "best", "K": best.k, "nmi": best.nmi,
                 "ami": best.ami, "top1": best.top1, "map": best.map,
                 "mi_nats": best.info.mi_lower_bound})
    return rows


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
