import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from radloc.estimate import (
    Cluster,
    ahc_cluster,
    cluster,
    extract_candidates,
    id_cluster,
    mean_shift,
)
from radloc.filter import FilterConfig, ParticleSet, init_particles, run_inner_loop
from radloc.labeler import sweep_source
from radloc.model import SourceParams
from radloc.scenario import Environment, Scenario, lawnmower_trajectory, stream


def unit_set(points, weights=None, ids=None):
    """Particles whose sampling ranges are [0, 1], so features equal parameters."""
    pts = np.asarray(points, dtype=float)
    n, p = pts.shape
    lw = np.full(n, -np.log(n)) if weights is None else np.log(np.asarray(weights, dtype=float))
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return ParticleSet(pts, ids, lw, n, p - 1, np.zeros(p), np.ones(p))


def partition_ok(clusters, n):
    members = np.concatenate([c.members for c in clusters])
    return len(members) == n and set(members.tolist()) == set(range(n))


def blobs(rng, centers, n_each=200, sigma=0.01):
    return np.vstack([np.asarray(c) + rng.normal(0, sigma, (n_each, len(c))) for c in centers])


class TestMeanShift:
    def test_single_atom(self):
        cl = mean_shift(unit_set(np.tile([0.3, 0.4, 0.5], (50, 1))))
        assert len(cl) == 1
        assert cl[0].centroid.as_vector() == pytest.approx([0.3, 0.4, 0.5])
        assert cl[0].total_weight == pytest.approx(1.0)

    def test_two_blobs(self):
        rng = np.random.default_rng(0)
        centers = [[0.2, 0.2, 0.2], [0.7, 0.7, 0.7]]
        cl = mean_shift(unit_set(blobs(rng, centers)), 0.05)
        assert len(cl) == 2
        for c in centers:
            assert min(np.linalg.norm(k.centroid.as_vector() - c) for k in cl) < 0.025

    def test_rejects_nonpositive_bandwidth(self):
        with pytest.raises(ValueError):
            mean_shift(unit_set([[0.1, 0.1, 0.1]]), 0.0)

    def test_converged_run_may_over_segment(self):
        env = Environment(2, ((0, 1000), (0, 1000)))
        srcs = [SourceParams((200, 200), 12.0), SourceParams((800, 250), 10.0), SourceParams((480, 820), 14.0)]
        scn = Scenario(env, srcs, lawnmower_trajectory(env, 10, 10), 7)
        cfg = FilterConfig().resolve(env, 100.0)
        rng = stream(7, 0xF1)
        ps = init_particles(env, cfg, rng=rng)
        run_inner_loop(ps, sweep_source(scn), [], cfg, rng)
        assert len(extract_candidates(mean_shift(ps, 0.02))) > len(srcs)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        pts = blobs(rng, [[0.2, 0.3, 0.4], [0.6, 0.6, 0.1], [0.8, 0.2, 0.9]], 100, 0.03)
        w = rng.uniform(0.5, 1.5, len(pts))
        perm = rng.permutation(len(pts))
        a = mean_shift(unit_set(pts, w))
        b = mean_shift(unit_set(pts[perm], w[perm]))
        key = lambda cl: sorted((tuple(c.centroid.as_vector()), c.total_weight) for c in cl)
        assert key(a) == key(b)

    def test_strength_scaling(self):
        rng = np.random.default_rng(2)
        pts = blobs(rng, [[0.2, 0.3, 0.2], [0.7, 0.6, 0.3]], 100, 0.02)
        doubled = pts.copy()
        doubled[:, 2] *= 2
        a = mean_shift(unit_set(pts), [0.05, 0.05, 0.05])
        b = mean_shift(unit_set(doubled), [0.05, 0.05, 0.10])
        assert len(a) == len(b)
        for ca, cb in zip(a, b):
            np.testing.assert_allclose(ca.centroid.position, cb.centroid.position, atol=1e-9)


class TestAhc:
    def test_small_distance_singletons(self):
        pts = np.random.default_rng(3).uniform(0, 1, (30, 3))
        gap = pdist(pts).min()
        assert len(ahc_cluster(unit_set(pts), gap / 2)) == 30

    def test_large_distance_one_cluster(self):
        pts = np.random.default_rng(4).uniform(0, 1, (30, 3))
        assert len(ahc_cluster(unit_set(pts), 10.0)) == 1

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            ahc_cluster(unit_set([[0.1, 0.1, 0.1]]), 0.0)

    @given(st.integers(2, 200), st.floats(0.01, 0.3), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_equals_graph_components(self, n, dist, seed):
        pts = np.random.default_rng(seed).uniform(0, 1, (n, 3))
        adj = csr_matrix(squareform(pdist(pts)) <= dist)
        n_comp, labels = connected_components(adj, directed=False)
        got = ahc_cluster(unit_set(pts), dist)
        assert len(got) == n_comp
        for c in got:
            assert len(set(labels[c.members].tolist())) == 1

    def test_average_linkage_option(self):
        rng = np.random.default_rng(5)
        pts = blobs(rng, [[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]], 50, 0.01)
        assert len(ahc_cluster(unit_set(pts), 0.1, linkage="average")) == 2


class TestIdCluster:
    def test_fresh_set_singletons(self):
        env = Environment(2, ((0, 1000), (0, 1000)))
        ps = init_particles(env, FilterConfig(n_particles=200).resolve(env, 100.0), rng=stream(0))
        assert len(id_cluster(ps)) == 200

    def test_collapsed_lineages(self):
        ids = np.repeat([4, 9, 17], 10)
        pts = np.random.default_rng(6).uniform(0, 1, (30, 3))
        assert len(id_cluster(unit_set(pts, ids=ids))) == 3

    def test_sparse_two_source_lineages(self):
        env = Environment(2, ((0, 3000), (0, 3000)))
        srcs = [SourceParams((800, 900), 20.0), SourceParams((2200, 2100), 20.0)]
        scn = Scenario(env, srcs, lawnmower_trajectory(env, 15, 15), 3)
        cfg = FilterConfig().resolve(env, 200.0)
        rng = stream(3, 0xF1)
        ps = init_particles(env, cfg, rng=rng)
        run_inner_loop(ps, sweep_source(scn), [], cfg, rng)
        strong = [c for c in extract_candidates(id_cluster(ps), 0.005) if c.params.strength >= 5.0]
        assert len(strong) == 2


@pytest.mark.parametrize("backend", ["meanshift", "ahc", "id"])
def test_backends_partition(backend):
    rng = np.random.default_rng(7)
    pts = rng.uniform(0, 1, (150, 3))
    cl = cluster(unit_set(pts, ids=rng.integers(0, 20, 150)), backend)
    assert partition_ok(cl, 150)
    for c in cl:
        m = pts[c.members]
        v = c.centroid.as_vector()
        assert np.all(v >= m.min(axis=0) - 1e-12) and np.all(v <= m.max(axis=0) + 1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        cluster(unit_set([[0.1, 0.1, 0.1]]), "kmeans")


class TestExtractCandidates:
    def make(self, weights):
        return [Cluster(np.array([i]), SourceParams((i, i), 1.0), w) for i, w in enumerate(weights)]

    def test_single_full_cluster(self):
        (c,) = extract_candidates(self.make([1.0]))
        assert c.support == 1.0

    def test_zero_min_support_keeps_all(self):
        assert len(extract_candidates(self.make([0.5, 0.001, 0.499]), 0.0)) == 3

    def test_sorted_and_screened(self):
        out = extract_candidates(self.make([0.1, 0.01, 0.6, 0.29]), 0.02)
        assert [c.support for c in out] == [0.6, 0.29, 0.1]

    def test_seven_clusters_screened_to_three(self):
        out = extract_candidates(self.make([0.3, 0.25, 0.2, 0.1, 0.01, 0.005, 0.005]), 0.05)
        assert len(out) == 4


@given(st.integers(0, 2**32 - 1), st.sampled_from(["meanshift", "ahc", "id"]))
@settings(max_examples=30, deadline=None)
def test_permutation_invariance_bit_exact(seed, backend):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (80, 3))
    w = rng.uniform(0.1, 2.0, 80)
    ids = rng.integers(0, 10, 80)
    perm = rng.permutation(80)
    a = cluster(unit_set(pts, w, ids), backend)
    b = cluster(unit_set(pts[perm], w[perm], ids[perm]), backend)
    key = lambda cl, ix: sorted(
        (tuple(c.centroid.as_vector()), c.total_weight, tuple(sorted(ix[c.members].tolist()))) for c in cl
    )
    assert key(a, np.arange(80)) == key(b, perm)
