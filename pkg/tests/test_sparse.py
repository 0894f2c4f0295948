import numpy as np
import pytest

import oracles
from resmatch.attention import AttentionParams, Bypass, attend
from resmatch.errors import ConfigError
from resmatch.kernel import Param, Tape, Var, grad_check
from resmatch import sparse
from resmatch.sparse import (
    NeighborIndex,
    attention_macs,
    gathered_mix,
    gathered_scores,
    knn_mine,
    neighbor_budgets,
    sparse_attend,
)

T = Tape(record=False)


class TestKnnMine:
    def test_top_two(self):
        assert knn_mine(np.array([[3.0, 1.0, 2.0]]), 2).indices.tolist() == [[0, 2]]

    def test_all_sorted(self):
        s = np.array([[0.1, 0.9, 0.5, 0.7]])
        assert knn_mine(s, 4).indices.tolist() == [[1, 3, 2, 0]]

    def test_tie_goes_to_lower_index(self):
        assert knn_mine(np.array([[5.0, 5.0, 1.0]]), 1).indices.tolist() == [[0]]
        assert knn_mine(np.array([[1.0, 5.0, 5.0, 5.0]]), 2).indices.tolist() == [[1, 2]]

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            knn_mine(np.zeros((2, 3)), 4)

    def test_rows_unique_and_in_range(self, rng):
        idx = knn_mine(rng.normal(size=(10, 12)), 5).indices
        assert idx.shape == (10, 5)
        assert all(len(set(r)) == 5 for r in idx.tolist())
        assert idx.min() >= 0 and idx.max() < 12

    def test_permutation(self, rng):
        s = rng.normal(size=(6, 9))
        base = knn_mine(s, 3).indices
        pr, pc = rng.permutation(6), rng.permutation(9)
        mined = knn_mine(s[pr][:, pc], 3).indices
        np.testing.assert_array_equal(pc[mined], base[pr])


class TestBudgets:
    def test_reference_values(self):
        assert neighbor_budgets("pre_adjust", 64) == (64, 32)
        assert neighbor_budgets("post_adjust", 64) == (64, 16)

    def test_small(self):
        assert neighbor_budgets("pre_adjust", 8) == (8, 4)

    def test_not_divisible(self):
        with pytest.raises(ConfigError):
            neighbor_budgets("pre_adjust", 10)


@pytest.fixture
def params(rng):
    return AttentionParams.init(rng, 8, 2)


def _bypass(rng, nq, nk):
    return Bypass(Var(rng.normal(size=(nq, nk))), Var(np.array([0.8, 1.5])), Var(np.array([0.1, -0.2])))


def test_full_neighbourhood_equals_dense(rng, params):
    x, y = rng.normal(size=(6, 8)), rng.normal(size=(7, 8))
    byp = _bypass(rng, 6, 7)
    nbrs = knn_mine(byp.raw.value, 7)
    dense = attend(T, Var(x), Var(y), params, byp).value
    np.testing.assert_allclose(sparse_attend(T, Var(x), Var(y), params, byp, nbrs).value, dense, atol=1e-10)


def test_k1_attends_to_top_neighbour(rng, params):
    x, y = rng.normal(size=(5, 8)), rng.normal(size=(6, 8))
    byp = _bypass(rng, 5, 6)
    nbrs = knn_mine(byp.raw.value, 1)
    cap = {}
    sparse_attend(T, Var(x), Var(y), params, byp, nbrs, cap)
    np.testing.assert_array_equal(cap["weights"], 1.0)
    np.testing.assert_array_equal(cap["indices"][:, 0], byp.raw.value.argmax(axis=1))


def test_masked_softmax_oracle(rng, params):
    x = rng.normal(size=(8, 8))
    byp = _bypass(rng, 8, 8)
    nbrs = knn_mine(byp.raw.value, 4)
    mask = np.zeros((8, 8), dtype=bool)
    np.put_along_axis(mask, nbrs.indices, True, axis=1)
    expected = oracles.attention(x, x, params, oracles.modulated(byp.raw.value, byp.lam.value, byp.beta.value), mask)
    np.testing.assert_allclose(sparse_attend(T, Var(x), Var(x), params, byp, nbrs).value, expected, atol=1e-12)


def test_without_bypass(rng, params):
    x, y = rng.normal(size=(4, 8)), rng.normal(size=(5, 8))
    nbrs = NeighborIndex(np.tile(np.arange(5), (4, 1)))
    np.testing.assert_allclose(
        sparse_attend(T, Var(x), Var(y), params, None, nbrs).value, attend(T, Var(x), Var(y), params).value, atol=1e-12
    )


def test_out_of_range_index_is_a_bug(rng, params):
    x = Var(rng.normal(size=(2, 8)))
    with pytest.raises(AssertionError):
        sparse_attend(T, x, x, params, None, NeighborIndex(np.array([[0], [5]])))


def test_gradient_check_through_gather(rng, params):
    x = Var(rng.normal(size=(5, 8)), requires_grad=True)
    y = Var(rng.normal(size=(6, 8)), requires_grad=True)
    raw = Var(rng.normal(size=(5, 6)), requires_grad=True)
    lam, beta = Param(np.array([0.7, 1.3]), name="lam"), Param(np.array([0.2, -0.1]), name="beta")
    nbrs = knn_mine(raw.value, 3)  # constant during differencing
    w = rng.normal(size=(5, 8))

    def loss(tape):
        return tape.sum(tape.mul(sparse_attend(tape, x, y, params, Bypass(raw, lam, beta), nbrs), w))

    report = grad_check(loss, {**params.params(), "x": x, "y": y, "bypass": raw, "lam": lam, "beta": beta}, 1e-4)
    assert report.passed, report.summary()


def test_scatter_add_order_independent(rng, params):
    """Duplicate gather targets accumulate identically whatever the query order."""
    x = rng.normal(size=(6, 8))
    y = Var(rng.normal(size=(4, 8)), requires_grad=True)
    nbrs = NeighborIndex(np.tile([0, 1], (6, 1)))
    grads = []
    for perm in (np.arange(6), rng.permutation(6)):
        y.grad = None
        tape = Tape()
        out = sparse_attend(tape, Var(x[perm]), y, params, None, NeighborIndex(nbrs.indices[perm]))
        tape.backward(tape.sum(out))
        grads.append(y.grad.copy())
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)


class TestFusedGather:
    H = 2

    def _inputs(self, rng, nq=7, nk=5, kk=4, c=6):
        idx = rng.integers(0, nk, size=(nq, kk))  # repeats allowed
        return rng.normal(size=(nq, c)), rng.normal(size=(nk, c)), rng.normal(size=(self.H, nq, kk)), idx

    def _naive_scores(self, q, k, idx):
        d = q.shape[1] // self.H
        out = np.zeros((self.H,) + idx.shape)
        for h in range(self.H):
            cols = slice(h * d, (h + 1) * d)
            for i, row in enumerate(idx):
                for j, m in enumerate(row):
                    out[h, i, j] = q[i, cols] @ k[m, cols]
        return out

    def _naive_mix(self, w, v, idx):
        d = v.shape[1] // self.H
        out = np.zeros((idx.shape[0], v.shape[1]))
        for h in range(self.H):
            cols = slice(h * d, (h + 1) * d)
            for i, row in enumerate(idx):
                for j, m in enumerate(row):
                    out[i, cols] += w[h, i, j] * v[m, cols]
        return out

    @pytest.mark.parametrize("chunk", [1, 30, 1 << 16])
    def test_scores_oracle(self, rng, monkeypatch, chunk):
        monkeypatch.setattr(sparse, "CHUNK_ELEMS", chunk)
        q, k, _, idx = self._inputs(rng)
        got = gathered_scores(T, Var(q), Var(k), idx, self.H).value
        np.testing.assert_allclose(got, self._naive_scores(q, k, idx), atol=1e-13)

    @pytest.mark.parametrize("chunk", [1, 30, 1 << 16])
    def test_mix_oracle(self, rng, monkeypatch, chunk):
        monkeypatch.setattr(sparse, "CHUNK_ELEMS", chunk)
        _, v, w, idx = self._inputs(rng)
        np.testing.assert_allclose(gathered_mix(T, Var(w), Var(v), idx).value, self._naive_mix(w, v, idx), atol=1e-13)

    @pytest.mark.parametrize("chunk", [1, 1 << 16])
    def test_gradient_check(self, rng, monkeypatch, chunk):
        monkeypatch.setattr(sparse, "CHUNK_ELEMS", chunk)
        q, k, w, idx = self._inputs(rng)
        qv, kv, wv = (Var(a, requires_grad=True) for a in (q, k, w))
        g1, g2 = rng.normal(size=w.shape), rng.normal(size=q.shape)

        def loss(tape):
            s = tape.sum(tape.mul(gathered_scores(tape, qv, kv, idx, self.H), g1))
            return tape.add(s, tape.sum(tape.mul(gathered_mix(tape, wv, kv, idx), g2)))

        report = grad_check(loss, {"q": qv, "k": kv, "w": wv}, 1e-6)
        assert report.passed, report.summary()


@pytest.mark.parametrize("n", [256, 512, 1024])
def test_mac_scaling(n):
    c, k = 32, 16
    assert attention_macs(2 * n, 2 * n, c, k) / attention_macs(n, n, c, k) <= 2.2
    assert attention_macs(2 * n, 2 * n, c) / attention_macs(n, n, c) >= 3.5
