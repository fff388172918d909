import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irk.errors import ContractError, NumericError, ShapeError
from irk.losses import (TripletBatch, adaptive_triplet_loss, contrastive_loss, identity_loss,
                        match_labels, match_loss, mine_triplets, relatedness, relatedness_matrix,
                        t2i_pairs, total_loss_retrieval)
from irk.tensor import Tensor, l2_normalize, precision


def triplet_on_distances(d1, d2, b1, b2, m):
    """Single triple whose squared distances are exactly d1 and d2."""
    with precision(np.float64):
        feats = Tensor(np.array([[0.0], [np.sqrt(d1)], [np.sqrt(d2)]]))
        return float(adaptive_triplet_loss(feats, TripletBatch([[0, 1, 2]], [[b1, b2]], m)).data)


def test_hand_case_equal_relatedness_is_zero():
    assert triplet_on_distances(1.0, 0.5, 0.7, 0.7, 0.3) == 0.0


def test_hand_case_positive_gap():
    assert abs(triplet_on_distances(1.0, 0.5, 1.0, 0.0, 0.3) - 0.8) <= 1e-12


def test_hand_case_negative_gap():
    assert abs(triplet_on_distances(0.2, 0.5, 0.0, 1.0, 0.3) - 0.6) <= 1e-12


def classic_triplet(f, triples, m):
    a, p, n = triples.T
    dp = ((f[a] - f[p]) ** 2).sum(1)
    dn = ((f[a] - f[n]) ** 2).sum(1)
    return np.maximum(dp - dn + m, 0).mean()


def adaptive_oracle(f, triples, betas, m):
    total = 0.0
    for (a, r1, r2), (b1, b2) in zip(triples, betas):
        d1 = sum((f[a][k] - f[r1][k]) ** 2 for k in range(f.shape[1]))
        d2 = sum((f[a][k] - f[r2][k]) ** 2 for k in range(f.shape[1]))
        s = int(b1 > b2) - int(b1 < b2)
        total += max(s * (d1 + (b1 - b2) * m - d2), 0.0)
    return total / len(triples)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_reduces_to_classic_triplet(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(3, 12))
    f = r.normal(size=(n, 4))
    triples = np.stack([r.choice(n, 3, replace=False) for _ in range(int(r.integers(1, 20)))])
    betas = np.tile([1.0, 0.0], (len(triples), 1))
    with precision(np.float64):
        got = float(adaptive_triplet_loss(Tensor(f), TripletBatch(triples, betas, 0.3)).data)
    assert got == classic_triplet(f, triples, 0.3)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(3, 10))
    f = r.normal(size=(n, 3))
    triples = np.stack([r.choice(n, 3, replace=False) for _ in range(8)])
    betas = r.choice([-0.5, 0.0, 0.3, 1.0], size=(8, 2))
    with precision(np.float64):
        got = float(adaptive_triplet_loss(Tensor(f), TripletBatch(triples, betas, 0.25)).data)
    assert got == pytest.approx(adaptive_oracle(f, triples, betas, 0.25), abs=1e-12)
    assert got >= 0


def test_empty_triplets_warn_and_return_zero():
    with pytest.warns(RuntimeWarning):
        out = adaptive_triplet_loss(Tensor(np.ones((2, 2))), TripletBatch())
    assert float(out.data) == 0.0


def test_triplet_contracts():
    with pytest.raises(ContractError):
        TripletBatch([[0, 1, 2]], [[1, 0]], margin=-1)
    with pytest.raises(ShapeError):
        TripletBatch([[0, 1, 2]], np.zeros((2, 2)))
    with pytest.raises(ContractError):
        adaptive_triplet_loss(Tensor(np.ones((2, 2))), TripletBatch([[0, 1, 5]], [[1, 0]]))


def test_relatedness_definition():
    assert relatedness(1, 2, [1, 0], [1, 0]) == 0.0
    assert relatedness(1, 1, [1, 0], [0, 1]) == 0.0
    assert relatedness(1, 1, [1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(NumericError):
        relatedness(1, 1, [0, 0], [1, 0])


def test_relatedness_matrix_matches_scalar(rng):
    labels = np.array([0, 0, 1, 1, 1])
    v = rng.normal(size=(5, 4))
    mat = relatedness_matrix(labels, v)
    for i in range(5):
        for j in range(5):
            assert mat[i, j] == pytest.approx(relatedness(labels[i], labels[j], v[i], v[j]), abs=1e-12)
    np.testing.assert_array_equal(relatedness_matrix(labels), labels[:, None] == labels[None])


def test_mine_all_enumerates_every_triple():
    labels = np.array([0, 0, 1, 1])
    batch = mine_triplets(labels)
    # 4 anchors x 1 positive x 2 remaining samples
    assert batch.count == 8
    for a, r1, r2 in batch.triples:
        assert labels[a] == labels[r1] and len({a, r1, r2}) == 3


def test_mine_hard_picks_extremes():
    labels = np.array([0, 0, 0, 1])
    feats = np.array([[0.0], [1.0], [3.0], [2.0]])
    with pytest.warns(RuntimeWarning):
        batch = mine_triplets(labels, mode="hard", features=feats)
    assert batch.triples[0].tolist() == [0, 2, 3]
    with pytest.raises(ContractError):
        mine_triplets(labels[:3], mode="hard")
    with pytest.raises(ContractError):
        mine_triplets(labels[:3], mode="semi")


def test_lonely_anchor_warns():
    with pytest.warns(RuntimeWarning):
        mine_triplets(np.array([0, 0, 1]))


def test_identity_loss_uniform_logits():
    with precision(np.float64):
        loss = identity_loss(Tensor(np.zeros((3, 2))), [0, 1, 2], Tensor(np.ones((2, 4))))
    assert float(loss.data) == pytest.approx(np.log(4))
    with pytest.raises(ContractError):
        identity_loss(Tensor(np.zeros((1, 2))), [4], Tensor(np.ones((2, 4))))


def contrastive_oracle(img, txt, tau, labels):
    s = img @ txt.T / tau
    b = len(s)
    total = 0.0
    for sim in (s, s.T):
        for i in range(b):
            keep = [j for j in range(b) if j == i or labels[j] != labels[i]]
            row = sim[i, keep]
            total += -(sim[i, i] - np.log(np.exp(row).sum()))
    return total / (2 * b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_contrastive_matches_oracle(seed):
    r = np.random.default_rng(seed)
    img = r.normal(size=(5, 4))
    txt = r.normal(size=(5, 4))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    txt /= np.linalg.norm(txt, axis=1, keepdims=True)
    labels = r.integers(0, 3, 5)
    with precision(np.float64):
        got = float(contrastive_loss(Tensor(img), Tensor(txt), 0.1, labels).data)
    assert got == pytest.approx(contrastive_oracle(img, txt, 0.1, labels), rel=1e-10)


def test_contrastive_perfect_alignment_is_small():
    e = np.eye(4)
    with precision(np.float64):
        loss = float(contrastive_loss(l2_normalize(Tensor(e)), Tensor(e), 0.01).data)
    assert loss < 1e-30 + 4 * np.exp(-100)
    with pytest.raises(ContractError):
        contrastive_loss(Tensor(e[:1]), Tensor(e[:1]))
    with pytest.raises(ContractError):
        contrastive_loss(Tensor(e), Tensor(e), 0.0)


def test_match_loss_hand_value():
    y = match_labels([True, False])
    assert y.tolist() == [[0, 1], [1, 0]]
    with precision(np.float64):
        loss = float(match_loss(Tensor([[0.0, 0.0], [np.log(3.0), 0.0]]), y).data)
    assert loss == pytest.approx((np.log(2) + np.log(4 / 3)) / 2)
    with pytest.raises(ContractError):
        match_loss(Tensor(np.zeros((2, 2))), [[1, 1], [0, 1]])


def test_t2i_pairs(rng):
    img, txt, pos = t2i_pairs(np.array([0, 0, 1]), rng)
    assert pos[:3].all() and (~pos[3:]).all()
    assert len(img) == 6
    labels = np.array([0, 0, 1])
    for i, t, p in zip(img, txt, pos):
        assert (labels[i] == labels[t]) == p or p


def test_retrieval_assembly_sums_terms(rng):
    with precision(np.float64):
        f, fo = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
        heads = [(Tensor(rng.normal(size=(3, 2))), None), (Tensor(rng.normal(size=(3, 2))), None)]
        labels = np.array([0, 0, 1, 1])
        batch = mine_triplets(labels)
        total, terms = total_loss_retrieval(f, fo, labels, batch, heads[0], heads[1])
    assert float(total.data) == pytest.approx(sum(terms.values()), rel=1e-12)
    assert set(terms) == {"atri", "id", "atri_out", "id_out"}
