"""Candidate sources from the particle cloud.

Three interchangeable clusterers (weighted mean-shift, single-linkage
agglomeration, lineage id) all work in a feature-scaled parameter space where
each coordinate is divided by the width of its sampling range, so that cm,
uCi and uCi*cm are comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .filter import ParticleSet, logsumexp
from .model import SourceParams

DEFAULT_BANDWIDTH = 0.05
DEFAULT_MERGE_DISTANCE = 0.08
DEFAULT_MIN_SUPPORT = 0.02


@dataclass
class Cluster:
    members: np.ndarray
    centroid: SourceParams
    total_weight: float


@dataclass
class CandidateSource:
    params: SourceParams
    support: float
    confidence: Optional[float] = None


def _features(particles: ParticleSet) -> np.ndarray:
    return particles.params / particles.scale


def _weights(particles: ParticleSet) -> np.ndarray:
    """Normalized weights whose sum is taken over sorted log weights."""
    lw = particles.log_weights
    return np.exp(lw - logsumexp(np.sort(lw)))


def _canonical_order(particles: ParticleSet, subset: np.ndarray | None = None) -> np.ndarray:
    """A particle ordering that depends only on the particles' values."""
    idx = np.arange(len(particles)) if subset is None else subset
    params = particles.params[idx]
    keys = [particles.log_weights[idx], particles.ids[idx]] + [params[:, j] for j in range(params.shape[1])][::-1]
    return idx[np.lexsort(keys)]


def _make_cluster(particles: ParticleSet, members: np.ndarray, w: np.ndarray) -> Cluster:
    """Cluster of ``members`` with its weighted centroid.

    When the particle set carries a ``fit`` score the centroid weights are
    mass times relative fit; members share nearly the same readings, so
    their fits are comparable even though fits across clusters are not.
    """
    # sums run in value order so the result is independent of particle order
    canon = _canonical_order(particles, members)
    members = np.sort(members)
    pw = w[canon]
    tot = float(pw.sum())
    pts = particles.params[canon]
    cw = pw
    if particles.fit is not None:
        f = particles.fit[canon]
        cw = pw * np.exp(f - f.max())
    if cw.sum() > 0:
        c = (cw / cw.sum()) @ pts
    else:
        c = pts.mean(axis=0)
    c = np.clip(c, pts.min(axis=0), pts.max(axis=0))
    return Cluster(members, SourceParams.from_vector(c, particles.dim, particles.dipole), tot)


def _sorted_clusters(clusters: List[Cluster]) -> List[Cluster]:
    return sorted(clusters, key=lambda c: (-c.total_weight, int(c.members[0])))


def _labels_to_clusters(particles: ParticleSet, labels: np.ndarray) -> List[Cluster]:
    w = _weights(particles)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    return _sorted_clusters([_make_cluster(particles, g, w) for g in np.split(order, bounds)])


def mean_shift(
    particles: ParticleSet,
    bandwidths: Union[float, Sequence[float]] = DEFAULT_BANDWIDTH,
    max_iter: int = 300,
    tol: float = 1e-4,
) -> List[Cluster]:
    """Weighted Gaussian mean-shift.

    Every particle climbs the weighted kernel density estimate until its
    shift drops below ``tol`` (scaled units); converged modes closer than
    one bandwidth are merged and particles are grouped by mode.
    """
    bw = np.broadcast_to(np.asarray(bandwidths, dtype=float), (particles.params.shape[1],))
    if np.any(bw <= 0):
        raise ValueError("bandwidths must be > 0")
    order = _canonical_order(particles)
    X = _features(particles)[order] / bw
    w = _weights(particles)[order]
    n = len(X)
    x2 = np.einsum("ij,ij->i", X, X)

    modes = X.copy()
    active = np.arange(n)
    for _ in range(max_iter):
        if not len(active):
            break
        m = modes[active]
        d2 = np.einsum("ij,ij->i", m, m)[:, None] + x2[None, :] - 2.0 * (m @ X.T)
        K = np.exp(-0.5 * np.maximum(d2, 0.0)) * w
        s = K.sum(axis=1)
        ok = s > 0
        new = m.copy()
        new[ok] = (K[ok] @ X) / s[ok, None]
        shift = np.sqrt(np.einsum("ij,ij->i", new - m, new - m))
        modes[active] = new
        # tol is in scaled units, modes are in bandwidth units
        active = active[(shift * bw.min() >= tol) & ok]

    # greedy merge in canonical order: a mode joins the first center within one bandwidth
    centers = np.empty_like(modes)
    n_centers = 0
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        if n_centers:
            diff = centers[:n_centers] - modes[i]
            close = np.flatnonzero(np.einsum("ij,ij->i", diff, diff) <= 1.0)
            if len(close):
                labels[i] = close[0]
                continue
        centers[n_centers] = modes[i]
        labels[i] = n_centers
        n_centers += 1
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return _labels_to_clusters(particles, out)


def _single_linkage_labels(X: np.ndarray, merge_distance: float) -> np.ndarray:
    """Single-linkage flat clusters via Prim's minimum spanning tree.

    Cutting every MST edge longer than ``merge_distance`` leaves exactly the
    single-linkage clusters at that height; O(n^2) time, O(n) memory.
    """
    n = len(X)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1)
    labels = np.full(n, -1, dtype=np.int64)
    edges = []
    cur = 0
    for _ in range(n):
        in_tree[cur] = True
        d = np.sqrt(np.sum((X - X[cur]) ** 2, axis=1))
        upd = (~in_tree) & (d < best)
        best[upd] = d[upd]
        parent[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        if in_tree[nxt]:
            break
        edges.append((int(parent[nxt]), nxt, best[nxt]))
        cur = nxt
    # union-find over the short MST edges
    root = np.arange(n)

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    for a, b, d in edges:
        if d <= merge_distance:
            ra, rb = find(a), find(b)
            if ra != rb:
                root[max(ra, rb)] = min(ra, rb)
    for i in range(n):
        labels[i] = find(i)
    return labels


def ahc_cluster(
    particles: ParticleSet, merge_distance: float = DEFAULT_MERGE_DISTANCE, linkage: str = "single"
) -> List[Cluster]:
    """Agglomerative clustering, stopping once no two clusters are within ``merge_distance``."""
    if not merge_distance > 0:
        raise ValueError("merge_distance must be > 0")
    X = _features(particles)
    if linkage == "single":
        labels = _single_linkage_labels(X, merge_distance)
    elif linkage == "average":
        from scipy.cluster.hierarchy import fcluster, linkage as sp_linkage

        if len(X) == 1:
            labels = np.zeros(1, dtype=np.int64)
        else:
            labels = fcluster(sp_linkage(X, "average"), merge_distance, criterion="distance")
    else:
        raise ValueError(f"unknown linkage {linkage!r}")
    return _labels_to_clusters(particles, np.asarray(labels))


def id_cluster(particles: ParticleSet) -> List[Cluster]:
    """One cluster per surviving lineage id."""
    return _labels_to_clusters(particles, particles.ids.copy())


def cluster(particles: ParticleSet, backend: str = "meanshift", **kw) -> List[Cluster]:
    if backend == "meanshift":
        return mean_shift(particles, kw.get("bandwidth", DEFAULT_BANDWIDTH))
    if backend == "ahc":
        return ahc_cluster(particles, kw.get("merge_distance", DEFAULT_MERGE_DISTANCE))
    if backend == "id":
        return id_cluster(particles)
    raise ValueError(f"unknown clustering backend {backend!r}")


def extract_candidates(clusters: Sequence[Cluster], min_support: float = DEFAULT_MIN_SUPPORT) -> List[CandidateSource]:
    """Cluster centroids with at least ``min_support`` weight, heaviest first."""
    out = [CandidateSource(c.centroid, c.total_weight) for c in clusters if c.total_weight >= min_support]
    return sorted(out, key=lambda c: -c.support)
