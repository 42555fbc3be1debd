import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revprobe.data import stratified_split
from revprobe.errors import ArgumentError, ConstructionError
from revprobe.metrics import info_estimate
from revprobe.pipeline import RunConfig, run_breakdown
from revprobe.probe import train_reverse_probe
from revprobe.synth import (GroupStructuredSpec, OracleSpec, ToySpec, analytic_information,
                            embed_clusters, gen_group_structured, gen_oracle, gen_toy,
                            random_oracle_spec)


def patterned_spec(n=20000, seed=0):
    # K=4, M=3: each cluster gets its own {0.9, 0.1} pattern
    pattern = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [0, 0, 0]])
    return OracleSpec(np.where(pattern == 1, 0.9, 0.1), np.full(4, 0.25), n, seed)


def brute_mi(p, prior):
    """Sum over every (cluster, concept vector) with explicit loops."""
    k, m = p.shape
    joint = {}
    for c in range(k):
        for y in itertools.product((0, 1), repeat=m):
            joint[c, y] = prior[c] * math.prod(p[c, j] if y[j] else 1 - p[c, j] for j in range(m))
    py = {}
    for (c, y), v in joint.items():
        py[y] = py.get(y, 0.0) + v
    return sum(v * math.log(v / (prior[c] * py[y])) for (c, y), v in joint.items() if v > 0)


class TestAnalytic:
    def test_identity_channel(self):
        prior = np.array([0.1, 0.2, 0.3, 0.4])
        out = analytic_information(np.eye(4), prior)
        h = -np.sum(prior * np.log(prior))
        assert out["mi"] == pytest.approx(h, abs=1e-12)
        assert out["cond_entropy"] == pytest.approx(0.0, abs=1e-12)

    def test_equal_rows(self):
        out = analytic_information(np.tile([0.3, 0.8, 0.5], (5, 1)), np.full(5, 0.2))
        assert out["mi"] == pytest.approx(0.0, abs=1e-12)

    def test_patterned_matches_loops(self):
        s = patterned_spec()
        out = analytic_information(s.concept_given_cluster, s.cluster_prior)
        assert out["mi"] == pytest.approx(brute_mi(s.concept_given_cluster, s.cluster_prior), abs=1e-12)

    def test_too_many_concepts(self):
        with pytest.raises(ArgumentError):
            analytic_information(np.full((2, 17), 0.5), [0.5, 0.5])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_bounds(self, k, m, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((k, m))
        prior = rng.dirichlet(np.ones(k))
        out = analytic_information(p, prior)
        assert -1e-12 <= out["mi"] <= min(out["h_cluster"], m * math.log(2)) + 1e-12
        assert out["mi"] == pytest.approx(brute_mi(p, prior), abs=1e-10)


class TestOracle:
    def test_deterministic(self):
        a1, c1, _ = gen_oracle(patterned_spec(seed=3))
        a2, c2, _ = gen_oracle(patterned_spec(seed=3))
        np.testing.assert_array_equal(a1.labels, a2.labels)
        np.testing.assert_array_equal(c1.bits, c2.bits)

    def test_marginals(self):
        s = patterned_spec(n=20000, seed=1)
        a, c, _ = gen_oracle(s)
        for k in range(4):
            rows = c.bits[a.labels == k]
            sigma = np.sqrt(0.09 / len(rows))
            assert np.all(np.abs(rows.mean(axis=0) - s.concept_given_cluster[k]) < 4 * sigma)
        assert np.all(np.abs(a.counts / 20000 - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 20000))

    def test_probe_lower_bounds_analytic(self):
        a, c, analytic = gen_oracle(patterned_spec())
        s = stratified_split(a, seed=0)
        info = info_estimate(a, train_reverse_probe(c, a, s), c, s.test)
        assert info.mi_lower_bound <= analytic["mi"] + 0.05
        # a linear probe is enough for conditionally independent bits, so the bound is tight
        assert info.mi_lower_bound >= analytic["mi"] - 0.05

    def test_invalid_specs(self):
        with pytest.raises(ConstructionError):
            OracleSpec(np.full((2, 2), 0.5), [0.5, 0.4])
        with pytest.raises(ConstructionError):
            OracleSpec(np.full((2, 2), 1.5), [0.5, 0.5])

    def test_random_spec_valid(self):
        s = random_oracle_spec(6, 5, seed=9)
        assert s.k == 6 and s.m == 5 and abs(s.cluster_prior.sum() - 1) < 1e-12


@pytest.fixture(scope="module")
def data():
    return gen_group_structured(GroupStructuredSpec(n_samples=20000, seed=0))


class TestGroupStructured:
    def test_shape(self, data):
        a, c, mi = data
        assert c.group_names == ["A", "B", "C"]
        assert c.n_concepts == 8 + 8 + 8
        assert mi["A"] == pytest.approx(math.log(8), abs=1e-12)
        assert mi["C"] == pytest.approx(0.0, abs=1e-12)
        assert 0 < mi["B"] < mi["A"]

    def test_isolated_groups(self, data):
        a, c, _ = data
        s = stratified_split(a, seed=0)
        top1 = {}
        for g in ("A", "C"):
            sel = c.select_groups([g])
            p = train_reverse_probe(sel, a, s)
            info = info_estimate(a, p, sel, s.test)
            top1[g] = np.mean(np.argmax(sel.bits[s.test] @ p.weights.T + p.bias, 1) == a.labels[s.test])
            if g == "C":
                assert abs(info.mi_lower_bound) <= 0.05
        assert top1["A"] >= 0.99

    def test_incremental_non_decreasing(self, data):
        a, c, _ = data
        x = embed_clusters(a, dim=8, separation=10.0, seed=0)
        cfg = RunConfig(k=8, n_clusterings=1, kmeans_restarts=3, seed=0)
        rows = run_breakdown(x, c, cfg, "incremental")
        top1 = [r["aggregate"]["top1"]["mean"] for r in rows]
        assert [r["groups"] for r in rows] == [["A"], ["A", "B"], ["A", "B", "C"]]
        assert all(b >= a - 0.01 for a, b in zip(top1, top1[1:]))


class TestToy:
    @pytest.mark.parametrize("layout", ["xor", "separable"])
    def test_attributes(self, layout):
        x, c, a = gen_toy(ToySpec(50, layout, seed=1))
        assert x.values.shape == (200, 2) and a.k == 4
        corners = np.round(x.values).astype(int)
        red = corners[:, 1] if layout == "separable" else corners[:, 0] ^ corners[:, 1]
        np.testing.assert_array_equal(c.bits[:, 0], red)
        np.testing.assert_array_equal(c.bits[:, 1], corners[:, 0])
        assert c.group_names == ["color", "shape"]

    def test_noise_bound(self):
        with pytest.raises(ConstructionError):
            ToySpec(noise_std=0.15)

    def test_deterministic(self):
        a, b = gen_toy(ToySpec(seed=4))[0], gen_toy(ToySpec(seed=4))[0]
        np.testing.assert_array_equal(a.values, b.values)
