"""Class activation subspaces, merged null projectors, and their cache."""

import numpy as np
import numpy.testing as npt
import pytest

from conftest import blob_splits, trained_dense_net
from nullspace_unlearn import nn, subspace


@pytest.fixture(scope="module")
def fitted():
    net, sp = trained_dense_net(seed=40)
    subs = {
        c: subspace.class_subspace(net, sp.train.class_filter((c,), keep=True))
        for c in range(3)
    }
    return net, sp, subs


# ---------------------------------------------------------------------------
# class_subspace
# ---------------------------------------------------------------------------


def test_class_subspace_bases_are_orthonormal(fitted):
    _, _, subs = fitted
    for sub in subs.values():
        assert len(sub.bases) == 2
        for b, s in zip(sub.bases, sub.singular_values):
            npt.assert_allclose(b.T @ b, np.eye(b.shape[1]), atol=1e-8)
            assert (np.diff(s) <= 0.0).all()
            assert (s >= 0.0).all()


def test_class_subspace_shapes_follow_the_trace(fitted):
    net, sp, subs = fitted
    batch = sp.train.class_filter((1,), keep=True)
    _, trace = nn.forward(net, batch.features, record=True)
    sub = subs[1]
    assert sub.class_id == 1
    assert sub.sample_count == len(batch)
    for b, r in zip(sub.bases, trace.per_layer):
        assert b.shape[0] == r.shape[0]
        assert b.shape[1] == min(r.shape)


def test_class_subspace_reconstructs_activations(fitted):
    net, sp, subs = fitted
    batch = sp.train.class_filter((2,), keep=True)
    _, trace = nn.forward(net, batch.features, record=True)
    for b, s, r in zip(subs[2].bases, subs[2].singular_values, trace.per_layer):
        # The full basis spans the recorded activations exactly.
        npt.assert_allclose(b @ (b.T @ r), r, atol=1e-8)


def test_class_subspace_rejects_mixed_or_empty(fitted):
    net, sp, _ = fitted
    with pytest.raises(ValueError, match="mixes labels"):
        subspace.class_subspace(net, sp.train)
    with pytest.raises(ValueError, match="empty"):
        subspace.class_subspace(net, sp.train.subset(np.array([], dtype=int)))


# ---------------------------------------------------------------------------
# merge_null_projector
# ---------------------------------------------------------------------------


def test_merged_projector_properties(fitted):
    _, _, subs = fitted
    proj = subspace.merge_null_projector([subs[1], subs[2]], 0.99, excluded_classes=(0,))
    assert proj.merged_classes == (1, 2)
    assert proj.excluded_classes == (0,)
    assert len(proj.projectors) == 2
    for p, k in zip(proj.projectors, proj.ranks):
        npt.assert_allclose(p @ p, p, atol=1e-10)
        npt.assert_array_equal(p, p.T)
        assert round(np.trace(p)) == p.shape[0] - k


def test_merge_is_order_invariant(fitted):
    _, _, subs = fitted
    ab = subspace.merge_null_projector([subs[1], subs[2]], 0.99)
    ba = subspace.merge_null_projector([subs[2], subs[1]], 0.99)
    assert ab.ranks == ba.ranks
    for pa, pb in zip(ab.projectors, ba.projectors):
        npt.assert_allclose(pa, pb, atol=1e-8)


def test_full_energy_projector_annihilates_build_activations(fitted):
    net, sp, subs = fitted
    proj = subspace.merge_null_projector([subs[1], subs[2]], 1.0)
    for c in (1, 2):
        batch = sp.train.class_filter((c,), keep=True)
        _, trace = nn.forward(net, batch.features, record=True)
        for p, r in zip(proj.projectors, trace.per_layer):
            assert np.linalg.norm(p @ r) <= 1e-8 * np.linalg.norm(r)


def test_rank_grows_with_epsilon(fitted):
    _, _, subs = fitted
    pair = [subs[1], subs[2]]
    ranks = [subspace.merge_null_projector(pair, eps).ranks for eps in (0.5, 0.99, 1.0)]
    for lo, hi in zip(ranks, ranks[1:]):
        assert all(a <= b for a, b in zip(lo, hi))


def test_merge_validation(fitted):
    _, _, subs = fitted
    with pytest.raises(ValueError, match="duplicate"):
        subspace.merge_null_projector([subs[1], subs[1]], 0.99)
    with pytest.raises(ValueError, match="at least one"):
        subspace.merge_null_projector([], 0.99)
    with pytest.raises(ValueError, match="epsilon"):
        subspace.merge_null_projector([subs[1]], 0.0)
    with pytest.raises(ValueError, match="epsilons for"):
        subspace.merge_null_projector([subs[1]], (0.9,) * 3)


def test_per_layer_epsilons(fitted):
    _, _, subs = fitted
    proj = subspace.merge_null_projector([subs[1], subs[2]], (0.5, 1.0))
    assert proj.epsilons == (0.5, 1.0)
    loose = subspace.merge_null_projector([subs[1], subs[2]], (0.5, 0.5))
    assert loose.ranks[1] <= proj.ranks[1]


def test_retained_energy_bounds(fitted):
    net, sp, subs = fitted
    proj = subspace.merge_null_projector([subs[1], subs[2]], 1.0)
    batch = sp.train.class_filter((1,), keep=True)
    _, trace = nn.forward(net, batch.features, record=True)
    removed = subspace.retained_energy(proj, trace)
    for frac in removed:
        assert 0.0 <= frac <= 1.0 + 1e-12
    # Full-energy merge removes essentially all of a merged class's activations.
    assert min(removed) >= 1.0 - 1e-10


# ---------------------------------------------------------------------------
# ProjectorCache
# ---------------------------------------------------------------------------


def test_cache_builds_once_and_matches_direct_merge(fitted):
    _, _, subs = fitted
    cache = subspace.ProjectorCache(subs, 0.99)
    first = cache.for_excluded(0)
    assert cache.for_excluded(0) is first
    direct = subspace.merge_null_projector([subs[1], subs[2]], 0.99, excluded_classes=(0,))
    assert first.merged_classes == direct.merged_classes
    for pa, pb in zip(first.projectors, direct.projectors):
        npt.assert_array_equal(pa, pb)


def test_cache_validation(fitted):
    _, _, subs = fitted
    with pytest.raises(ValueError, match="no subspace recorded"):
        subspace.ProjectorCache(subs, 0.99).for_excluded(7)
    with pytest.raises(ValueError, match="only recorded class"):
        subspace.ProjectorCache({1: subs[1]}, 0.99).for_excluded(1)
    with pytest.raises(ValueError, match="carries class_id"):
        subspace.ProjectorCache({0: subs[1]}, 0.99)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_subspace_round_trip_is_bit_exact(fitted, tmp_path):
    _, _, subs = fitted
    path = tmp_path / "sub.json"
    subspace.save_subspace(subs[0], path, epsilon=0.99, source_checkpoint_hash="abc123")
    back = subspace.load_subspace(path)
    assert back.class_id == subs[0].class_id
    assert back.sample_count == subs[0].sample_count
    for b0, b1 in zip(subs[0].bases, back.bases):
        npt.assert_array_equal(b0, b1)
    for s0, s1 in zip(subs[0].singular_values, back.singular_values):
        npt.assert_array_equal(s0, s1)
    # Rewriting the loaded artifact reproduces the bytes.
    path2 = tmp_path / "sub2.json"
    subspace.save_subspace(back, path2, epsilon=0.99, source_checkpoint_hash="abc123")
    assert path.read_bytes() == path2.read_bytes()


def test_subspace_load_rejects_unknown_version(fitted, tmp_path):
    _, _, subs = fitted
    path = tmp_path / "sub.json"
    subspace.save_subspace(subs[0], path)
    path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 2'))
    with pytest.raises(ValueError, match="format_version"):
        subspace.load_subspace(path)
