import numpy as np
import pytest

from _helpers import oracle_agglomerate
from frameprompt import clustering as C
from frameprompt.errors import DataError, ShapeError


class IdentityEncoder:
    """Stands in for a feature extractor in clustering-only tests."""

    fingerprint = 0

    def forward_features(self, images):
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(images.shape[0], -1)


def blob_dataset(centers, per, spread, seed):
    rng = np.random.default_rng(seed)
    feats = []
    for c in centers:
        feats.append(np.asarray(c) + spread * rng.standard_normal((per, len(c))))
    return np.concatenate(feats)


def test_worked_example_two_tight_pairs():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    dend = C.agglomerate(pts)
    assert [m[:2] for m in dend.merges] == [(0, 1), (2, 3)] + [(4, 5)]
    assert dend.merges[0][2] == pytest.approx(1.0, abs=1e-12)
    assert dend.merges[1][2] == pytest.approx(1.0, abs=1e-12)
    # mean of the four cross distances, frozen from the brute-force oracle
    assert dend.merges[2][2] == pytest.approx(14.15099101046353, abs=1e-9)
    assert C.cut(dend, 5.0).n_clusters == 2
    assert C.cut(dend, 15.0).n_clusters == 1


def test_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(20):
        n = int(rng.integers(2, 40))
        d = int(rng.integers(1, 6))
        x = rng.standard_normal((n, d)) * rng.uniform(0.5, 3)
        got = C.agglomerate(x).merges
        want = oracle_agglomerate(x)
        assert [m[:2] for m in got] == [m[:2] for m in want]
        assert [m[3] for m in got] == [m[3] for m in want]
        for g, w in zip(got, want):
            assert g[2] == pytest.approx(w[2], abs=1e-9)


def test_tie_break_prefers_smallest_ids():
    # four identical points: every pair distance is 0
    x = np.ones((4, 3))
    merges = C.agglomerate(x).merges
    assert merges[0][:2] == (0, 1)
    assert merges[1][:2] == (2, 3)
    assert merges[2][:2] == (4, 5)


def test_merge_distances_nondecreasing():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.standard_normal((30, 4))
        dists = [m[2] for m in C.agglomerate(x).merges]
        assert all(b >= a - 1e-12 for a, b in zip(dists, dists[1:]))


def test_cluster_count_nonincreasing_in_tau():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 3))
    dend = C.agglomerate(x)
    taus = np.linspace(1e-3, dend.max_distance() * 1.1, 25)
    counts = [C.cut(dend, t).n_clusters for t in taus]
    assert all(b <= a for a, b in zip(counts, counts[1:]))
    assert counts[-1] == 1


def test_cut_stops_at_first_gap_then_caps():
    feats = blob_dataset([(0, 0), (50, 0), (0, 50), (50, 50)], 5, 0.1, seed=3)
    dend = C.agglomerate(feats)
    free = C.cut(dend, 5.0)
    assert free.n_clusters == 4
    capped = C.cut(dend, 5.0, max_clusters=2)
    assert capped.n_clusters == 2
    tiny = C.cut(dend, 1e-9)
    assert tiny.n_clusters == len(feats)
    assert C.cut(dend, 5.0, max_clusters=10).n_clusters == 4  # cap not binding


def test_cut_rejects_bad_tau():
    dend = C.agglomerate(np.zeros((2, 2)))
    with pytest.raises(DataError):
        C.cut(dend, 0.0)
    with pytest.raises(DataError):
        C.cut(dend, -1.0)


def test_labels_are_canonical_partition():
    feats = blob_dataset([(0, 0), (30, 30)], 6, 0.2, seed=4)
    cut = C.cut(C.agglomerate(feats), 5.0)
    assert cut.labels.shape == (12,)
    assert set(cut.labels) == {0, 1}
    assert cut.labels[0] == 0  # numbered by smallest member id


def test_permutation_invariance_up_to_bijection():
    feats = blob_dataset([(0, 0), (20, 0), (0, 20)], 7, 0.3, seed=5)
    cut_a = C.cut(C.agglomerate(feats), 4.0)
    rng = np.random.default_rng(6)
    perm = rng.permutation(len(feats))
    cut_b = C.cut(C.agglomerate(feats[perm]), 4.0)
    assert cut_a.n_clusters == cut_b.n_clusters
    mapping = {}
    for i, p in enumerate(perm):
        a, b = cut_a.labels[p], cut_b.labels[i]
        assert mapping.setdefault(a, b) == b


def test_prototypes_are_exact_means():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((50, 8))
    cut = C.cut(C.agglomerate(feats), 2.0)
    protos = C.prototypes(feats, cut, encoder_fingerprint=123)
    for t in range(cut.n_clusters):
        want = feats[cut.labels == t].mean(axis=0)
        assert np.abs(protos.centroids[t] - want).max() < 1e-9
    assert protos.encoder_fingerprint == 123
    assert protos.sizes.sum() == 50


def test_route_nearest_and_tie_to_lowest():
    protos = C.PrototypeSet(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), 1.0, 0)
    assert C.route(np.array([0.1, 0.0]), protos) == 0
    assert C.route(np.array([1.9, 0.1]), protos) == 1
    # equidistant between 1 and 2 only: lowest of the tied pair wins
    assert C.route(np.array([2.0, 2.0]), protos) == 1
    dup = C.PrototypeSet(np.array([[1.0, 1.0], [1.0, 1.0]]), 1.0, 0)
    assert C.route(np.array([5.0, -3.0]), dup) == 0


def test_route_batch_matches_scalar_route():
    rng = np.random.default_rng(8)
    protos = C.PrototypeSet(rng.standard_normal((6, 5)), 1.0, 0)
    feats = rng.standard_normal((40, 5))
    batched = C.route_batch(feats, protos)
    for i in range(40):
        assert batched[i] == C.route(feats[i], protos)


def test_partition_covers_every_sample():
    class DS:
        def __init__(self, images):
            self.images = images

        def __len__(self):
            return len(self.images)

    rng = np.random.default_rng(9)
    images = rng.standard_normal((25, 1, 2, 2))
    enc = IdentityEncoder()
    feats = enc.forward_features(images)
    cut = C.cut(C.agglomerate(feats), 2.5)
    protos = C.prototypes(feats, cut, enc.fingerprint)
    assign = C.partition(DS(images), enc, protos)
    assert assign.shape == (25,)
    assert assign.min() >= 0 and assign.max() < protos.n
    sizes = np.bincount(assign, minlength=protos.n)
    assert sizes.sum() == 25


def test_partition_checks_fingerprint():
    class DS:
        images = np.zeros((3, 1, 2, 2))

        def __len__(self):
            return 3

    enc = IdentityEncoder()
    enc.fingerprint = 7
    protos = C.PrototypeSet(np.zeros((1, 4)), 1.0, encoder_fingerprint=8)
    from frameprompt.errors import FingerprintMismatchError
    with pytest.raises(FingerprintMismatchError):
        C.partition(DS(), enc, protos)


def test_empty_and_bad_features_rejected():
    with pytest.raises(DataError):
        C.agglomerate(np.zeros((0, 3)))
    with pytest.raises(DataError):
        C.agglomerate(np.array([[np.nan, 0.0]]))
    with pytest.raises(ShapeError):
        C.agglomerate(np.zeros(5))
    assert C.agglomerate(np.zeros((1, 3))).merges == ()


class _WrapDataset:
    def __init__(self, images):
        self.images = images

    def __len__(self):
        return len(self.images)


def test_calibrate_finds_single_mode_scale():
    # one tight blob: every merge is small, so tau* is small
    feats = blob_dataset([(0.0, 0.0, 0.0)], 30, 0.05, seed=10)
    ds = _WrapDataset(feats.reshape(30, 1, 1, 3))
    tau = C.calibrate_threshold(IdentityEncoder(), ds, probe_size=100, seed=0)
    dend = C.agglomerate(feats)
    # 0.8 x (smallest tau giving one cluster, within the search resolution)
    assert tau <= 0.8 * (dend.max_distance() + 1e-3)
    assert tau >= 0.8 * (dend.max_distance() - 1e-3)
    assert C.cut(dend, tau / 0.8 + 1e-3).n_clusters == 1


def test_calibrate_is_deterministic_per_seed():
    feats = blob_dataset([(0, 0)], 500, 0.3, seed=11)
    ds = _WrapDataset(feats.reshape(-1, 1, 1, 2))
    a = C.calibrate_threshold(IdentityEncoder(), ds, probe_size=64, seed=5)
    b = C.calibrate_threshold(IdentityEncoder(), ds, probe_size=64, seed=5)
    c = C.calibrate_threshold(IdentityEncoder(), ds, probe_size=64, seed=6)
    assert a == b
    assert a != c  # different probe subsample


def test_calibrate_needs_two_samples():
    ds = _WrapDataset(np.zeros((1, 1, 1, 2)))
    with pytest.raises(DataError):
        C.calibrate_threshold(IdentityEncoder(), ds)
