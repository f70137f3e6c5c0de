import itertools

import numpy as np
import pytest

from astn.fusion import FusionWeights, astn_weights, fuse, fuse_soft, majority_vote, staple

from oracles import staple_reference


def square(n=8, r0=2, r1=6, c0=2, c1=6):
    m = np.zeros((n, n))
    m[r0:r1, c0:c1] = 1
    return m


def test_identical_warped_labels_get_equal_weights():
    s = square()
    w = astn_weights(s, [s, s, s])
    assert w.dsc == (1.0, 1.0, 1.0)
    assert len(set(w.v)) == 1
    assert w.total() == pytest.approx(1, abs=1e-12)


def test_disjoint_label_gets_zero_weight():
    s = square(r0=0, r1=3, c0=0, c1=3)
    far = square(r0=5, r1=8, c0=5, c1=8)
    w = astn_weights(s, [s, far])
    assert w.v[1] == 0


def test_worked_example_two_elements():
    # D = (1, 0.5): DSC of one pixel against three is 2 / (1 + 3)
    s = np.zeros((4, 4))
    s[0, :3] = 1
    one = np.zeros((4, 4))
    one[0, 0] = 1
    w = astn_weights(s, [s, one])
    assert w.dsc == (1.0, 0.5)
    np.testing.assert_allclose(w.as_array(), [0.2895, 0.4737, 0.2368], atol=5e-5)


def test_all_zero_dsc_reduces_to_initial():
    s = square(r0=0, r1=2, c0=0, c1=2)
    far = square(r0=6, r1=8, c0=6, c1=8)
    w = astn_weights(s, [far, far])
    assert w.v0 == 1.0 and w.v == (0.0, 0.0)
    np.testing.assert_array_equal(fuse(s, [far, far], w), s)


def test_fuse_convex_and_validates():
    rng = np.random.default_rng(0)
    L = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
    for v in ([0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.0, 0.5, 0.5]):
        np.testing.assert_array_equal(fuse(L, [L, L], FusionWeights(v[0], tuple(v[1:]))), L)
    soft = [rng.uniform(size=(6, 6)) for _ in range(3)]
    out = fuse_soft(soft[0], soft[1:], FusionWeights(0.2, (0.3, 0.5)))
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        fuse(L, [L], FusionWeights(0.7, (0.7,)))


def test_weights_permutation_equivariant():
    rng = np.random.default_rng(1)
    s = (rng.uniform(size=(8, 8)) > 0.4).astype(float)
    warped = [(rng.uniform(size=(8, 8)) > t).astype(float) for t in (0.3, 0.5, 0.7)]
    w = astn_weights(s, warped)
    perm = [2, 0, 1]
    wp = astn_weights(s, [warped[i] for i in perm])
    np.testing.assert_allclose(wp.v, [w.v[i] for i in perm], atol=1e-15)
    np.testing.assert_array_equal(fuse(s, warped, w), fuse(s, [warped[i] for i in perm], wp))


def test_majority_vote_rules():
    one, zero = np.ones((1, 1)), np.zeros((1, 1))
    assert majority_vote([one, one, zero])[0, 0] == 1
    assert majority_vote([one, zero])[0, 0] == 0
    L = square()
    np.testing.assert_array_equal(majority_vote([L, L, L]), L)


@pytest.mark.parametrize("R", [1, 3, 5])
def test_majority_vote_matches_uniform_fusion(R):
    # every vote pattern as one pixel column
    patterns = np.array(list(itertools.product([0, 1], repeat=R)), dtype=float).T  # [R, 2^R]
    labels = [row.reshape(1, -1) for row in patterns]
    mv = majority_vote(labels)
    expected = (patterns.sum(axis=0) > R / 2).astype(np.uint8)
    np.testing.assert_array_equal(mv[0], expected)
    uniform = FusionWeights(0.0, tuple([1.0 / R] * R))
    np.testing.assert_array_equal(fuse(np.zeros_like(labels[0]), labels, uniform), mv)


def test_staple_unanimous():
    L = square()
    out, model = staple([L, L, L])
    np.testing.assert_array_equal(out, L)
    np.testing.assert_allclose(model.sensitivity, 1 - 1e-6)
    np.testing.assert_allclose(model.specificity, 1 - 1e-6)


def test_staple_label_and_complement():
    L = square()
    out, model = staple([L, 1 - L])
    assert np.all(model.posterior == 0.5)
    assert out.all()


def test_staple_needs_two():
    with pytest.raises(ValueError):
        staple([square()])


def test_staple_matches_reference_small():
    rng = np.random.default_rng(2)
    for _ in range(50):
        labels = [(rng.uniform(size=(4, 4)) > rng.uniform(0.3, 0.7)).astype(int) for _ in range(3)]
        out, model = staple(labels)
        ref, p, q = staple_reference([l.ravel().tolist() for l in labels])
        np.testing.assert_array_equal(out.ravel(), ref)
        assert model.sensitivity.tolist() == p and model.specificity.tolist() == q


def test_staple_loglik_non_decreasing():
    rng = np.random.default_rng(3)
    for _ in range(10):
        truth = rng.uniform(size=(8, 8)) > 0.5
        labels = [np.where(rng.uniform(size=(8, 8)) < 0.2, ~truth, truth) for _ in range(4)]
        _, model = staple(labels, tol=0)
        ll = np.array(model.log_likelihood)
        assert np.all(np.diff(ll) >= -1e-9)
