"""Command-line entry point: ``revprobe <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 probe divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (StandardizationStats, load_concepts, load_features, save_concepts,
                   save_features, standardize, stratified_split)
from .errors import ArgumentError, DivergenceError, RevprobeError
from .metrics import evaluate_probe
from .pipeline import (RunConfig, array_hash, concepts_to_labels_probe, confusion_text, csv_rows,
                       run_breakdown, run_confusion_study, run_full_eval, run_ksweep, run_transfer,
                       write_csv)
from .probe import ProbeConfig, load_probe, save_probe, train_forward_probes, train_reverse_probe
from .quantize import ClusterAssignment, assign, kmeans_fit, load_quantizer, save_quantizer
from .synth import (GroupSpec, GroupStructuredSpec, ToySpec, embed_clusters,
                    gen_group_structured, gen_oracle, gen_toy, random_oracle_spec)

log = logging.getLogger("revprobe")


def _split_list(s: str | None) -> list[str] | None:
    return [x.strip() for x in s.split(",") if x.strip()] if s else None


def build_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"{args.config}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(base)
    overrides = {}
    for flag, key in (("k", "k"), ("runs", "n_clusterings"), ("seed", "seed"),
                      ("restarts", "kmeans_restarts"), ("steps", "kmeans_steps")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "groups", None):
        overrides["groups"] = tuple(_split_list(args.groups))
    if getattr(args, "epochs", None) is not None:
        drops = tuple(e for e in cfg.probe.lr_drop_epochs if e < args.epochs)
        overrides["probe"] = replace(cfg.probe, epochs=args.epochs, lr_drop_epochs=drops)
    return replace(cfg, **overrides)


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_labels(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ArgumentError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _inputs(args):
    _require(args, "features", "concepts")
    return load_features(args.features), load_concepts(args.concepts)


# --------------------------------------------------------------------------
# subcommands


def cmd_cluster(args) -> None:
    _require(args, "features")
    cfg = build_config(args)
    features = load_features(args.features)
    fs, stats = standardize(features)
    q = kmeans_fit(fs, cfg.k, cfg.kmeans_steps, cfg.kmeans_restarts, cfg.seed, cfg.kmeans_init)
    a = assign(q, fs)
    if args.quantizer:
        save_quantizer(q, args.quantizer)
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats.to_dict()))
    if args.assignments:
        np.savetxt(args.assignments, a.labels, fmt="%d")
    _write_json(args.out, {"k": q.k, "inertia": q.inertia, "iterations": q.n_iterations_run,
                           "restart_inertias": list(q.restart_inertias), "seed": cfg.seed,
                           "features_hash": array_hash(features.values),
                           "cluster_sizes": a.counts.tolist(), "version": __version__})


def cmd_probe(args) -> None:
    _require(args, "concepts")
    cfg = build_config(args)
    concepts = load_concepts(args.concepts)
    if args.assignments:
        labels = _load_labels(args.assignments)
        a = ClusterAssignment(labels, max(int(labels.max()) + 1, 2))
    else:
        _require(args, "features")
        fs, _ = standardize(load_features(args.features))
        a = assign(kmeans_fit(fs, cfg.k, cfg.kmeans_steps, cfg.kmeans_restarts, cfg.seed), fs)
    if a.n_samples != concepts.n_samples:
        raise ArgumentError(f"{a.n_samples} assignments vs {concepts.n_samples} concept rows")
    sel = concepts.select_groups(cfg.resolve_groups(concepts))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        splits = stratified_split(a, cfg.ratio_test, cfg.ratio_val, cfg.seed)
    probe = train_reverse_probe(sel, a, splits, replace(cfg.probe, seed=cfg.seed))
    if args.probe_out:
        save_probe(probe, args.probe_out)
    report = evaluate_probe(probe, sel, a, splits.test, cfg.nmi_normalizer,
                            {"seed": cfg.seed, "best_epoch": probe.best_epoch})
    _write_json(args.out, report.to_dict())


def cmd_evaluate(args) -> None:
    cfg = build_config(args)
    features, concepts = _inputs(args)
    report = run_full_eval(features, concepts, cfg)
    if args.csv:
        write_csv(args.csv, csv_rows(args.tag or Path(args.features).stem, report))
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    else:
        print(report.to_json())


def cmd_breakdown(args) -> None:
    cfg = build_config(args)
    features, concepts = _inputs(args)
    rows = run_breakdown(features, concepts, cfg, args.mode, args.anchor, _split_list(args.order))
    if args.csv:
        table = [{"groups": "+".join(r["groups"]), **{m: r["aggregate"][m]["mean"]
                  for m in ("nmi", "ami", "top1", "map", "mi_lower_bound")}} for r in rows]
        write_csv(args.csv, table, ("groups", "nmi", "ami", "top1", "map", "mi_lower_bound"))
    _write_json(args.out, {"mode": args.mode, "rows": rows, "config": cfg.to_dict()})


def cmd_ksweep(args) -> None:
    cfg = build_config(args)
    features, concepts = _inputs(args)
    ks = [int(k) for k in _split_list(args.ks)]
    rows = run_ksweep(features, concepts, cfg, ks)
    if args.csv:
        cols = ["K", "h_clusters_mean"] + [f"{m}_{s}" for m in ("mi_lower_bound", "nmi", "ami", "top1", "map")
                                           for s in ("mean", "median", "std")]
        table = []
        for r in rows:
            row = {"K": r["k"], "h_clusters_mean": float(np.mean(r["h_clusters"]))}
            if r["aggregate"] is not None:
                row.update({c: r["aggregate"][c.rsplit("_", 1)[0]][c.rsplit("_", 1)[1]] for c in cols[2:]})
            table.append(row)
        write_csv(args.csv, table, cols)
    _write_json(args.out, {"curve": rows, "config": cfg.to_dict()})


def cmd_confusion(args) -> None:
    cfg = build_config(args)
    features, concepts = _inputs(args)
    base = _split_list(args.base_groups) or []
    study = run_confusion_study(features, concepts, cfg, base, args.extra_group, args.top_pairs, args.top_n)
    text = confusion_text(study)
    if args.text:
        Path(args.text).write_text(text)
    else:
        sys.stderr.write(text)
    _write_json(args.out, study)


def cmd_toy(args) -> None:
    result = {}
    for layout in ([args.layout] if args.layout else ["separable", "xor"]):
        spec = ToySpec(args.n_per_cluster, layout, args.noise, args.seed or 0)
        result[layout] = toy_experiment(spec, args.write_dir)
    _write_json(args.out, result)


def toy_experiment(spec: ToySpec, write_dir=None) -> dict:
    """Forward probes per attribute vs. a reverse probe onto K=4 K-means clusters."""
    features, concepts, truth = gen_toy(spec)
    fs, _ = standardize(features)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        split_truth = stratified_split(truth, seed=spec.seed)
        fwd = train_forward_probes(fs, concepts, [0, 1], split_truth, ProbeConfig(seed=spec.seed))
        q = kmeans_fit(fs, 4, seed=spec.seed)
        clusters = assign(q, fs)
        splits = stratified_split(clusters, seed=spec.seed)
    probe = train_reverse_probe(concepts, clusters, splits, ProbeConfig(seed=spec.seed))
    report = evaluate_probe(probe, concepts, clusters, splits.test)
    if write_dir:
        out = Path(write_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_features(features, out / f"toy_{spec.layout}.rpfm")
        save_concepts(concepts, out / f"toy_{spec.layout}.rpcm")
        np.savetxt(out / f"toy_{spec.layout}_clusters.txt", truth.labels, fmt="%d")
    return {
        "spec": {"n_per_cluster": spec.n_per_cluster, "layout": spec.layout,
                 "noise_std": spec.noise_std, "seed": spec.seed},
        "forward_accuracy": dict(zip(fwd.attribute_names, fwd.accuracies)),
        "forward_degenerate": list(fwd.degenerate),
        "reverse": report.to_dict(),
    }


def cmd_synth(args) -> None:
    # the common --k/--seed flags default to None; synth has its own defaults
    k = 8 if args.k is None else args.k
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "oracle":
        spec = random_oracle_spec(k, args.m, args.n, seed, args.sharpness)
        clusters, concepts, analytic = gen_oracle(spec)
        sidecar = {"kind": "oracle", "spec": spec.to_dict(), "analytic": analytic}
    else:
        spec = GroupStructuredSpec(
            k=k, n_samples=args.n, seed=seed,
            groups=(GroupSpec("A", "deterministic"), GroupSpec("B", "noisy", args.flip),
                    GroupSpec("C", "independent", m=args.m)))
        clusters, concepts, per_group = gen_group_structured(spec)
        sidecar = {"kind": "groups", "spec": spec.to_dict(), "analytic": {"per_group_mi": per_group}}
    features = embed_clusters(clusters, args.dim, seed=seed)
    save_features(features, out / "features.rpfm")
    save_concepts(concepts, out / "concepts.rpcm")
    np.savetxt(out / "clusters.txt", clusters.labels, fmt="%d")
    sidecar["version"] = __version__
    (out / "synth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(json.dumps(sidecar["analytic"], sort_keys=True))


def cmd_transfer(args) -> None:
    _require(args, "quantizer", "probe", "features", "concepts")
    cfg = build_config(args)
    if args.local_stats:
        cfg = replace(cfg, transfer_stats="target")
    stats = StandardizationStats.from_dict(json.loads(Path(args.stats).read_text())) if args.stats else None
    concepts = load_concepts(args.concepts)
    if cfg.groups:
        concepts = concepts.select_groups(cfg.resolve_groups(concepts))
    report = run_transfer(load_quantizer(args.quantizer), load_probe(args.probe), stats,
                          load_features(args.features), concepts, cfg)
    _write_json(args.out, report.to_dict())


def cmd_labels_probe(args) -> None:
    _require(args, "concepts", "labels")
    cfg = build_config(args)
    report = concepts_to_labels_probe(load_concepts(args.concepts), _load_labels(args.labels), cfg)
    _write_json(args.out, report.to_dict())


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revprobe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--features", help="RPFM or .csv feature file")
    common.add_argument("--concepts", help="RPCM or .csv concept file")
    common.add_argument("--k", type=int, help="number of clusters (default 1000)")
    common.add_argument("--runs", type=int, help="number of K-means clusterings (default 5)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--groups", help="comma-separated concept groups to use")
    common.add_argument("--restarts", type=int, help="K-means restarts per clustering")
    common.add_argument("--steps", type=int, help="max Lloyd steps")
    common.add_argument("--epochs", type=int, help="probe epochs (drops at or past this are removed)")
    common.add_argument("--out", help="JSON report path (stdout when absent)")
    common.add_argument("--csv", help="CSV table export path")
    common.add_argument("--config", help="JSON file overriding RunConfig defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", parents=[common], help="fit K-means on standardized features")
    p.add_argument("--quantizer", help="write the RPKQ quantizer here")
    p.add_argument("--stats", help="write standardization stats (JSON) here")
    p.add_argument("--assignments", help="write cluster ids, one per line, here")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("probe", parents=[common], help="train one reverse probe")
    p.add_argument("--assignments", help="cluster ids, one per line (otherwise cluster --features)")
    p.add_argument("--probe-out", help="write the RPLP probe here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("evaluate", parents=[common], help="full evaluation over several clusterings")
    p.add_argument("--tag", help="method tag for the CSV rows")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("breakdown", parents=[common], help="per concept-group breakdown")
    p.add_argument("--mode", choices=["incremental", "isolation"], default="incremental")
    p.add_argument("--anchor", help="anchor group for isolation mode")
    p.add_argument("--order", help="comma-separated group order (default: file order)")
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("ksweep", parents=[common], help="metrics as a function of K")
    p.add_argument("--ks", required=True, help="comma-separated ascending K values")
    p.set_defaults(func=cmd_ksweep)

    p = sub.add_parser("confusion", parents=[common], help="confusion-drop study for an extra group")
    p.add_argument("--base-groups", required=True)
    p.add_argument("--extra-group")
    p.add_argument("--top-pairs", type=int, default=10)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--text", help="write the human-readable listing here (stderr otherwise)")
    p.set_defaults(func=cmd_confusion)

    p = sub.add_parser("toy", parents=[common], help="forward vs reverse probing on the 2-D toy")
    p.add_argument("--layout", choices=["separable", "xor"])
    p.add_argument("--n-per-cluster", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--write-dir", help="also write the toy data files here")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset with analytic MI")
    p.add_argument("--kind", choices=["oracle", "groups"], default="oracle")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--m", type=int, default=6, help="concepts (oracle) or independent bits (groups)")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--sharpness", type=float, default=0.8)
    p.add_argument("--flip", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transfer", parents=[common], help="apply a source quantizer + probe to target data")
    p.add_argument("--quantizer", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--stats", help="source standardization stats JSON")
    p.add_argument("--local-stats", action="store_true", help="standardize with target statistics")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("labels-probe", parents=[common], help="predict ground-truth labels from concepts")
    p.add_argument("--labels", required=True, help="one integer label per line")
    p.set_defaults(func=cmd_labels_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        log.error("%s", exc)
        return 3
    except (RevprobeError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
