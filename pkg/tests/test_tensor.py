import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isotn.tensor import (
    ContractionError,
    ContractionSpec,
    MatricizationSplit,
    contract,
    decompose,
    eigh_sym,
    matricize,
    norm,
    pairwise_plan,
    qr,
    random_isometry,
    svd,
    unmatricize,
)


def test_contract_matches_einsum_on_chain():
    rng = np.random.default_rng(0)
    a, b, c = (rng.standard_normal(s) for s in [(3, 4), (4, 5, 2), (5, 3)])
    got = contract("ij,jkl,km->iml", a, b, c)
    assert np.allclose(got, np.einsum("ij,jkl,km->iml", a, b, c))


def test_scalar_output_and_trace_free_pair():
    a = np.arange(6.0).reshape(2, 3)
    assert contract("ij,ij->", a, a) == pytest.approx(np.sum(a * a))
    assert contract("ij->ji", a).shape == (3, 2)


@pytest.mark.parametrize("subs,shapes,msg", [
    ("ij,jk", [(2, 3), (3, 2)], "missing"),
    ("ij,jk->ik", [(2, 3), (4, 2)], "dimensions"),
    ("ij,jk->ikj", [(2, 3), (3, 2)], "exactly one"),
    ("ij,jk,jl->ikl", [(2, 3), (3, 2), (3, 2)], "appears 3"),
    ("ii->", [(2, 2)], "repeated label"),
    ("ijk->i", [(2, 2)], "rank"),
])
def test_invalid_contractions_rejected(subs, shapes, msg):
    ops = [np.zeros(s) for s in shapes]
    with pytest.raises(ContractionError, match=msg):
        contract(subs, *ops)


def test_pairwise_plan_covers_all_operands():
    shapes = ((4, 5), (5, 6, 7), (7, 4), (6, 3))
    plan = pairwise_plan("ab,bcd,da,ce->e", shapes)
    assert len(plan) == 3
    ops = [np.random.default_rng(i).standard_normal(s) for i, s in enumerate(shapes)]
    for i, j, sub in plan:
        x, y = ops[i], ops[j]
        ops = [o for k, o in enumerate(ops) if k not in (i, j)] + [np.einsum(sub, x, y)]
    assert np.allclose(ops[0], np.einsum("ab,bcd,da,ce->e", *[
        np.random.default_rng(i).standard_normal(s) for i, s in enumerate(shapes)]))


def test_spec_roundtrip_string():
    spec = ContractionSpec.parse("ab, bc -> ac")
    assert str(spec) == "ab,bc->ac"


def test_norm_is_frobenius():
    t = np.arange(24.0).reshape(2, 3, 4)
    assert norm(t) == pytest.approx(np.linalg.norm(t.ravel()))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=4), st.data())
def test_matricize_roundtrip(shape, data):
    t = np.random.default_rng(len(shape)).standard_normal(shape)
    perm = data.draw(st.permutations(range(len(shape))))
    k = data.draw(st.integers(0, len(shape)))
    split = MatricizationSplit(tuple(perm[:k]), tuple(perm[k:]))
    m = matricize(t, split)
    assert m.shape[0] * m.shape[1] == t.size
    assert np.array_equal(unmatricize(m, split, t.shape), t)


def test_bad_split_rejected():
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2, 2)), MatricizationSplit((0,), (0, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000))
def test_svd_reconstructs_and_is_deterministic(n, p, seed):
    m = np.random.default_rng(seed).standard_normal((n, p))
    u, s, v = svd(m)
    assert np.allclose(u @ np.diag(s) @ v.T, m, atol=1e-12)
    assert np.all(np.diff(s) <= 1e-12)
    u2, _, v2 = svd(m.copy())
    assert np.array_equal(u, u2) and np.array_equal(v, v2)


def test_truncated_svd_is_best_rank_k():
    m = np.random.default_rng(3).standard_normal((8, 6))
    u, s, v = svd(m, 3)
    full = np.linalg.svd(m, compute_uv=False)
    err = np.linalg.norm(m - u @ np.diag(s) @ v.T)
    assert err == pytest.approx(np.sqrt(np.sum(full[3:] ** 2)))


def test_qr_has_nonnegative_diagonal():
    m = np.random.default_rng(1).standard_normal((6, 4))
    q, r = qr(m)
    assert np.all(np.diag(r) >= 0)
    assert np.allclose(q @ r, m)
    assert np.allclose(q.T @ q, np.eye(4))


def test_eigh_sym_descending_and_rejects_asymmetric():
    a = np.random.default_rng(2).standard_normal((5, 5))
    vals, vecs = eigh_sym(a + a.T)
    assert np.all(np.diff(vals) <= 0)
    assert np.allclose(vecs @ np.diag(vals) @ vecs.T, a + a.T)
    with pytest.raises(ValueError):
        eigh_sym(a)


def test_decompose_dispatch():
    t = np.random.default_rng(4).standard_normal((2, 3, 4))
    split = MatricizationSplit.leading(3, 2)
    u, s, v = decompose(t, split, "svd_truncated", chi=2)
    assert u.shape == (6, 2)
    with pytest.raises(ValueError):
        decompose(t, split, "svd_truncated")
    with pytest.raises(ValueError):
        decompose(t, split, "lu")


def test_random_isometry():
    x = random_isometry(np.random.default_rng(5), 9, 4)
    assert np.allclose(x.T @ x, np.eye(4), atol=1e-14)
    with pytest.raises(ValueError):
        random_isometry(np.random.default_rng(5), 2, 3)
