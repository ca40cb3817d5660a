"""Feature-space partitioning.

Bottom-up agglomerative clustering with average linkage over Euclidean
distances. Cluster ids follow the usual dendrogram convention: leaves are
0..n-1, the merge at step t creates id n+t. Linkage is maintained as a matrix
of summed pairwise point distances so a merge is exact addition, which keeps
the engine's merge sequence aligned with a brute-force oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FingerprintMismatchError, ShapeError

log = logging.getLogger(__name__)


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(features, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


@dataclass(frozen=True)
class Dendrogram:
    n_leaves: int
    # (id_a, id_b, average distance, new id) per merge, id_a < id_b
    merges: tuple = ()

    def max_distance(self) -> float:
        return max((m[2] for m in self.merges), default=0.0)


@dataclass(frozen=True)
class ClusterCut:
    labels: np.ndarray
    n_clusters: int
    threshold: float


@dataclass(frozen=True)
class PrototypeSet:
    centroids: np.ndarray  # (N, d)
    threshold: float
    encoder_fingerprint: int
    sizes: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.centroids.shape[0]


def agglomerate(features: np.ndarray) -> Dendrogram:
    """Full average-linkage merge tree.

    Ties on the linkage value resolve to the lexicographically smallest
    (min id, max id) pair, which the ascending scan order gives for free."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (n,d), got {x.shape}")
    n = x.shape[0]
    if n < 1:
        raise DataError("cannot cluster an empty feature set")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    if n == 1:
        return Dendrogram(1, ())
    # compact state, kept sorted by cluster id: slot i holds cluster ids[i]
    ids = list(range(n))
    sizes = np.ones(n, dtype=np.int64)
    sums = pairwise_distances(x)  # sum of point distances between clusters
    merges = []
    for step in range(n - 1):
        m = len(ids)
        avg = sums / np.outer(sizes, sizes)
        iu = np.triu_indices(m, k=1)
        flat = avg[iu]
        best = flat.min()
        # first hit in row-major upper-triangle order is the lex-smallest pair
        pos = int(np.flatnonzero(flat == best)[0])
        i, j = int(iu[0][pos]), int(iu[1][pos])
        new_id = n + step
        merges.append((ids[i], ids[j], float(best), new_id))
        keep = [k for k in range(m) if k != i and k != j]
        new_sums = sums[i, keep] + sums[j, keep]
        sums = sums[np.ix_(keep, keep)]
        sums = np.pad(sums, ((0, 1), (0, 1)))
        sums[-1, :-1] = new_sums
        sums[:-1, -1] = new_sums
        new_size = sizes[i] + sizes[j]
        sizes = np.append(sizes[keep], new_size)
        ids = [ids[k] for k in keep] + [new_id]
    return Dendrogram(n, tuple(merges))


def cut(dendrogram: Dendrogram, tau: float, max_clusters: int | None = None) -> ClusterCut:
    """Stop merging at the first linkage above tau; if that leaves more than
    max_clusters groups, keep merging in dendrogram order down to the cap."""
    if tau <= 0:
        raise DataError(f"threshold must be positive, got {tau}")
    if max_clusters is not None and max_clusters < 1:
        raise DataError(f"max_clusters must be >= 1, got {max_clusters}")
    n = dendrogram.n_leaves
    parent = {}

    def root(cid):
        while cid in parent:
            cid = parent[cid]
        return cid

    applied = 0
    for a, b, dist, new_id in dendrogram.merges:
        if dist > tau:
            break
        parent[a] = parent[b] = new_id
        applied += 1
    remaining = dendrogram.merges[applied:]
    k = n - applied
    if max_clusters is not None:
        for a, b, dist, new_id in remaining:
            if k <= max_clusters:
                break
            parent[a] = parent[b] = new_id
            k -= 1
    roots = [root(i) for i in range(n)]
    order = {}
    for r in roots:
        if r not in order:
            order[r] = len(order)
    # harmless relabeling: clusters numbered by smallest member id
    labels = np.asarray([order[r] for r in roots], dtype=np.int64)
    return ClusterCut(labels, len(order), float(tau))


def prototypes(features: np.ndarray, cut_result: ClusterCut,
               encoder_fingerprint: int = 0) -> PrototypeSet:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != cut_result.labels.shape[0]:
        raise ShapeError(f"{x.shape[0]} features vs {cut_result.labels.shape[0]} labels")
    cents = np.empty((cut_result.n_clusters, x.shape[1]))
    sizes = np.empty(cut_result.n_clusters, dtype=np.int64)
    for c in range(cut_result.n_clusters):
        members = cut_result.labels == c
        sizes[c] = members.sum()
        cents[c] = x[members].mean(axis=0)
    return PrototypeSet(cents, cut_result.threshold, encoder_fingerprint, sizes)


def route(feature: np.ndarray, protos: PrototypeSet) -> int:
    """Nearest prototype by squared Euclidean distance, ties to lowest index."""
    return int(route_batch(np.asarray(feature, dtype=np.float64)[None, :], protos)[0])


def route_batch(features: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != protos.centroids.shape[1]:
        raise ShapeError(f"features {x.shape} vs prototypes {protos.centroids.shape}")
    diff = x[:, None, :] - protos.centroids[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


def partition(dataset, encoder, protos: PrototypeSet) -> np.ndarray:
    """Assign every sample to a prototype using prompt-free features."""
    if protos.encoder_fingerprint and protos.encoder_fingerprint != encoder.fingerprint:
        raise FingerprintMismatchError(
            f"prototypes built against encoder {protos.encoder_fingerprint:#x}, "
            f"got {encoder.fingerprint:#x}")
    feats = encoder.forward_features(dataset.images)
    return route_features(feats, protos)


def route_features(feats: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    out = np.empty(feats.shape[0], dtype=np.int64)
    for start in range(0, feats.shape[0], 512):
        out[start:start + 512] = route_batch(feats[start:start + 512], protos)
    return out


def probe_indices(n: int, probe_size: int, seed) -> np.ndarray:
    take = min(n, probe_size)
    if take == n:
        return np.arange(n, dtype=np.int64)
    return np.sort(np.random.default_rng(seed).choice(n, size=take, replace=False))


def calibrate_threshold(encoder, reference, probe_size: int = 1000,
                        seed: int = 0) -> float:
    """Distance scale from a designated single-mode reference dataset.

    Finds the smallest tau (binary search, 1e-3 resolution) at which the
    probe collapses to one cluster, then backs off to 0.8 of it."""
    if len(reference) < 2:
        raise DataError(f"calibration needs >= 2 samples, got {len(reference)}")
    ids = probe_indices(len(reference), probe_size, [seed, 0xCA11])
    feats = encoder.forward_features(reference.images[ids])
    dend = agglomerate(feats)
    hi = dend.max_distance()
    if hi <= 0:
        # all probe points identical; any positive threshold collapses them
        return 0.8 * 1e-3
    lo = 0.0
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if cut(dend, mid).n_clusters == 1:
            hi = mid
        else:
            lo = mid
    return 0.8 * hi
