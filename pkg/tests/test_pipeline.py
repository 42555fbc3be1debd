import csv
import json
import math

import numpy as np
import pytest

from revprobe.data import ConceptGroup, ConceptMatrix, FeatureMatrix
from revprobe.errors import ArgumentError
from revprobe.pipeline import (RunConfig, aggregate, concepts_to_labels_probe, confusion_text, csv_rows,
                               run_breakdown, run_confusion_study, run_full_eval, run_ksweep,
                               run_transfer, write_csv)
from revprobe.probe import ProbeConfig
from revprobe.synth import GroupSpec, GroupStructuredSpec, embed_clusters, gen_group_structured

FAST = ProbeConfig(epochs=30, lr_drop_epochs=(20, 25))
# dense noisy concept bits need a far smaller step than the default
DENSE = ProbeConfig(lr=0.2, epochs=60, lr_drop_epochs=(40, 50))


def structured(k=8, n=4000, seed=0, groups=None):
    spec = GroupStructuredSpec(k=k, n_samples=n, seed=seed,
                               groups=groups or GroupStructuredSpec.groups)
    a, c, mi = gen_group_structured(spec)
    x = embed_clusters(a, dim=6, separation=12.0, seed=seed)
    return x, c, a, mi


@pytest.fixture(scope="module")
def det_data():
    return structured(groups=(GroupSpec("A", "deterministic"), GroupSpec("C", "independent", m=6)))


@pytest.fixture(scope="module")
def full_report(det_data):
    x, c, _, _ = det_data
    return run_full_eval(x, c, RunConfig(k=8, n_clusterings=3, kmeans_restarts=5, seed=1, probe=FAST))


class TestFullEval:
    def test_deterministic_concepts(self, full_report):
        agg = full_report.aggregate
        assert agg["top1"]["mean"] >= 0.99
        assert agg["top1"]["std"] < 0.01
        assert len(full_report.runs) == 3
        assert full_report.best_run in range(3)

    def test_aggregate_recomputable(self, full_report):
        assert aggregate(full_report.runs) == full_report.aggregate
        tops = [r.top1 for r in full_report.runs]
        assert full_report.aggregate["top1"]["mean"] == pytest.approx(np.mean(tops))

    def test_single_clustering(self, det_data):
        x, c, _, _ = det_data
        r = run_full_eval(x, c, RunConfig(k=8, n_clusterings=1, kmeans_restarts=2, probe=FAST))
        assert all(v["std"] == 0 for v in r.aggregate.values())
        assert r.aggregate["top1"]["mean"] == r.runs[0].top1

    def test_rerun_identical(self, det_data):
        x, c, _, _ = det_data
        cfg = RunConfig(k=8, n_clusterings=2, kmeans_restarts=2, seed=5, probe=FAST)
        a = run_full_eval(x, c, cfg).to_json(with_timestamp=False)
        b = run_full_eval(x, c, cfg).to_json(with_timestamp=False)
        assert a == b

    def test_provenance(self, full_report):
        d = full_report.to_dict()
        assert d["toolkit_version"] and len(d["provenance"]["features_hash"]) == 64
        seeds = [r["provenance"]["seed"] for r in d["runs"]]
        assert len(set(seeds)) == 3
        assert "best" in d

    def test_k_too_large(self, det_data):
        x, c, _, _ = det_data
        with pytest.raises(ArgumentError):
            run_full_eval(x, c, RunConfig(k=x.n_samples + 1))

    def test_misaligned(self, det_data):
        x, c, _, _ = det_data
        with pytest.raises(ArgumentError):
            run_full_eval(x.take(np.arange(10)), c, RunConfig(k=2))

    def test_csv_export(self, full_report, tmp_path):
        rows = csv_rows("oracle", full_report)
        write_csv(tmp_path / "t.csv", rows)
        back = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert [r["run"] for r in back] == ["0", "1", "2", "mean", "best"]
        assert list(back[0]) == ["method_tag", "run", "K", "nmi", "ami", "top1", "map", "mi_nats"]
        assert float(back[3]["top1"]) == pytest.approx(full_report.aggregate["top1"]["mean"])


@pytest.fixture(scope="module")
def data():
    return structured(n=20000)


class TestBreakdown:
    def test_incremental(self, data):
        x, c, _, _ = data
        rows = run_breakdown(x, c, RunConfig(k=8, n_clusterings=2, kmeans_restarts=5, probe=DENSE))
        tops = [r["aggregate"]["top1"]["mean"] for r in rows]
        assert [r["groups"] for r in rows] == [["A"], ["A", "B"], ["A", "B", "C"]]
        assert all(b >= a - 0.01 for a, b in zip(tops, tops[1:]))
        # every group set saw the same clusterings
        hashes = {tuple(r["clustering_hashes"]) for r in rows}
        assert len(hashes) == 1
        for r in rows:
            assert [run["provenance"]["clustering_hash"] for run in r["runs"]] == r["clustering_hashes"]

    def test_isolation_independent_group(self, data):
        x, c, _, _ = data
        rows = run_breakdown(x, c, RunConfig(k=8, n_clusterings=1, kmeans_restarts=5, probe=DENSE),
                             "isolation", anchor_group="B")
        assert [r["groups"] for r in rows] == [["B"], ["B", "A"], ["B", "C"]]
        anchor, with_c = rows[0]["aggregate"], rows[2]["aggregate"]
        assert with_c["mi_lower_bound"]["mean"] == pytest.approx(anchor["mi_lower_bound"]["mean"], abs=0.05)
        assert rows[1]["aggregate"]["top1"]["mean"] > anchor["top1"]["mean"]

    def test_single_group_matches_full_eval(self, data):
        x, c, _, _ = data
        cfg = RunConfig(k=8, n_clusterings=1, kmeans_restarts=2, probe=FAST, groups=("A",))
        rows = run_breakdown(x, c, cfg, order=["A"])
        full = run_full_eval(x, c, cfg)
        assert rows[0]["runs"][0]["top1"] == full.runs[0].top1
        assert rows[0]["runs"][0]["info"] == full.runs[0].to_dict()["info"]

    def test_unknown_group(self, data):
        x, c, _, _ = data
        with pytest.raises(ArgumentError):
            run_breakdown(x, c, RunConfig(k=8), order=["A", "Z"])
        with pytest.raises(ArgumentError):
            run_breakdown(x, c, RunConfig(k=8), "isolation", anchor_group="Z")
        with pytest.raises(ArgumentError):
            run_breakdown(x, c, RunConfig(k=8), "sideways")


class TestKSweep:
    def test_k_equals_n(self):
        x = FeatureMatrix(np.random.default_rng(0).normal(size=(12, 2)))
        c = ConceptMatrix(np.random.default_rng(1).integers(0, 2, (12, 3)), ("a", "b", "c"), (("g", 0, 3),))
        rows = run_ksweep(x, c, RunConfig(k=2, n_clusterings=1, kmeans_restarts=1, probe=FAST), [12])
        assert rows[0]["h_clusters"][0] == pytest.approx(math.log(12), abs=1e-12)
        assert rows[0]["aggregate"] is None and "skipped" in rows[0]

    def test_unsorted_or_too_large(self, det_data):
        x, c, _, _ = det_data
        with pytest.raises(ArgumentError):
            run_ksweep(x, c, RunConfig(k=2), [4, 2])
        with pytest.raises(ArgumentError):
            run_ksweep(x, c, RunConfig(k=2), [2, x.n_samples + 1])

    def test_clean_beats_noisy_at_every_k(self):
        clean = structured(k=16, n=6000, groups=(GroupSpec("A", "noisy", 0.05),))
        noisy = structured(k=16, n=6000, groups=(GroupSpec("A", "noisy", 0.3),))
        cfg = RunConfig(k=2, n_clusterings=1, kmeans_restarts=2, probe=FAST)
        ks = [2, 4, 8, 16]
        a = run_ksweep(clean[0], clean[1], cfg, ks)
        b = run_ksweep(noisy[0], noisy[1], cfg, ks)
        for ra, rb in zip(a, b):
            assert ra["aggregate"]["mi_lower_bound"]["median"] > rb["aggregate"]["mi_lower_bound"]["median"]


class TestConfusion:
    def test_independent_extra(self, det_data):
        x, c, _, _ = det_data
        study = run_confusion_study(x, c, RunConfig(k=8, probe=FAST, kmeans_restarts=2), ["A"], "C")
        assert max(abs(p["confusion_drop"]) for p in study["pairs"]) < 0.02
        assert study["extended_groups"] == ["A", "C"]

    def test_base_is_everything(self, det_data):
        x, c, _, _ = det_data
        study = run_confusion_study(x, c, RunConfig(k=8, probe=FAST, kmeans_restarts=2), ["A", "C"], None)
        assert all(p["confusion_drop"] == 0 for p in study["pairs"])
        assert study["base"] == study["extended"]

    def test_crafted_pair(self):
        # clusters 0..5; group "base" cannot tell 2 from 5, group "extra" can
        rng = np.random.default_rng(0)
        k, n = 6, 3000
        labels = np.repeat(np.arange(k), n // k)
        x = embed_clusters(type("A", (), {"labels": labels, "k": k, "n_samples": n})(), dim=4,
                           separation=12.0, seed=0)
        merged = np.where(labels == 5, 2, labels)
        base = np.eye(k, dtype=np.uint8)[merged]
        extra = np.zeros((n, 3), dtype=np.uint8)
        extra[:, 0] = labels == 5
        extra[:, 1:] = rng.integers(0, 2, (n, 2))
        names = tuple(f"b{i}" for i in range(k)) + ("tells_2_from_5", "noise1", "noise2")
        c = ConceptMatrix(np.hstack([base, extra]), names,
                          (ConceptGroup("base", 0, k), ConceptGroup("extra", k, 3)))
        study = run_confusion_study(x, c, RunConfig(k=k, probe=FAST, kmeans_restarts=3),
                                    ["base"], "extra", top_pairs=3, top_n=3)
        top = study["pairs"][0]
        pair = {top["cluster_i"], top["cluster_j"]}
        # the K-means ids of latent clusters 2 and 5
        assert top["confusion_drop"] > 0.5
        assert top["coefficients"][0]["concept"] == "tells_2_from_5"
        assert len(pair) == 2
        text = confusion_text(study)
        assert "tells_2_from_5" in text and "drop" in text

    def test_unknown_group(self, det_data):
        x, c, _, _ = det_data
        with pytest.raises(ArgumentError):
            run_confusion_study(x, c, RunConfig(k=8), ["A"], "nope")


class TestTransfer:
    @pytest.fixture
    def source(self, det_data, full_report):
        x, c, _, _ = det_data
        art = full_report.artifacts[0]
        return x, c, art["clustering"], art["probe"], art["stats"], full_report.runs[0]

    def test_identity_on_test_split(self, source):
        x, c, cl, probe, stats, report = source
        idx = cl.splits.test
        r = run_transfer(cl.quantizer, probe, stats, x.take(idx), c.take(idx))
        assert (r.top1, r.map, r.nmi, r.ami) == (report.top1, report.map, report.nmi, report.ami)
        assert r.cross_entropy == report.cross_entropy
        # H(f_K) comes from the target's own cluster frequencies
        assert r.n_test == idx.size

    def test_shifted_copy_is_worse(self, source):
        x, c, cl, probe, stats, report = source
        shifted = FeatureMatrix(x.values + 25.0)
        r = run_transfer(cl.quantizer, probe, stats, shifted, c)
        assert r.top1 < report.top1

    def test_randomized_concepts(self, source):
        x, c, cl, probe, stats, _ = source
        rng = np.random.default_rng(0)
        shuffled = ConceptMatrix(rng.integers(0, 2, c.bits.shape), c.concept_names, c.groups)
        r = run_transfer(cl.quantizer, probe, stats, x, shuffled)
        prior_max = cl.assignment.counts.max() / cl.assignment.n_samples
        assert r.top1 == pytest.approx(prior_max, abs=0.05)

    def test_local_stats_switch(self, source):
        x, c, cl, probe, stats, _ = source
        shifted = FeatureMatrix(x.values + 25.0)
        r = run_transfer(cl.quantizer, probe, stats, shifted, c, RunConfig(transfer_stats="target"))
        # refitting the statistics undoes a pure shift
        assert r.top1 == pytest.approx(run_transfer(cl.quantizer, probe, stats, x, c).top1, abs=1e-12)

    def test_mismatch(self, source):
        x, c, cl, probe, stats, _ = source
        with pytest.raises(ArgumentError):
            run_transfer(cl.quantizer, probe, stats, FeatureMatrix(x.values[:, :3]), c)
        with pytest.raises(ArgumentError):
            run_transfer(cl.quantizer, probe, stats, x, c.select_groups(["A"]))


class TestLabelsProbe:
    def test_one_hot(self):
        labels = np.random.default_rng(0).integers(0, 5, 2000)
        c = ConceptMatrix(np.eye(5, dtype=np.uint8)[labels], tuple("abcde"), (("g", 0, 5),))
        r = concepts_to_labels_probe(c, labels, RunConfig(k=2, probe=FAST))
        assert r.top1 == 1.0

    def test_independent(self):
        rng = np.random.default_rng(1)
        labels = rng.choice(3, size=6000, p=[0.5, 0.3, 0.2])
        c = ConceptMatrix(rng.integers(0, 2, (6000, 4)), tuple("abcd"), (("g", 0, 4),))
        r = concepts_to_labels_probe(c, labels, RunConfig(k=2, probe=FAST))
        assert r.top1 == pytest.approx(0.5, abs=0.03)

    def test_bad_labels(self):
        c = ConceptMatrix(np.zeros((4, 1)), ("a",), (("g", 0, 1),))
        with pytest.raises(ArgumentError):
            concepts_to_labels_probe(c, [0, 0, 0, 0], RunConfig(k=2))
        with pytest.raises(ArgumentError):
            concepts_to_labels_probe(c, [0, 1], RunConfig(k=2))


class TestRunConfig:
    def test_roundtrip(self):
        cfg = RunConfig(k=16, groups=("A",), probe=FAST)
        back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_unknown_key(self):
        with pytest.raises(ArgumentError):
            RunConfig.from_dict({"kay": 3})
