import numpy as np
import pytest

import oracles
from resmatch.errors import ShapeError, UsageError
from resmatch.kernel import Linear, Mlp, Param, Tape, Var, grad_check
from resmatch.residual import (
    BypassParams,
    BypassState,
    adjust,
    descriptor_similarity,
    initial_state,
    modulate,
    position_similarity,
)

T = Tape(record=False)


def identity_mlp(c):
    return Mlp([Linear(np.eye(c))])


def unit_rows(rng, n, c):
    d = rng.normal(size=(n, c))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestDescriptorSimilarity:
    def test_orthonormal_gives_identity(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        s = descriptor_similarity(T, q, q, identity_mlp(6)).value
        np.testing.assert_allclose(s, np.eye(6), atol=1e-12)

    def test_unit_diagonal(self, rng):
        d = unit_rows(rng, 5, 8)
        s = descriptor_similarity(T, d, d, identity_mlp(8)).value
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-12)

    def test_composition_oracle(self, rng):
        f4 = Mlp.init(rng, [8, 8, 2])
        da, db = unit_rows(rng, 4, 8), unit_rows(rng, 6, 8)
        expected = oracles.mlp(f4, da) @ oracles.mlp(f4, db).T
        np.testing.assert_allclose(descriptor_similarity(T, da, db, f4).value, expected, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        f4 = Mlp.init(rng, [8, 8, 2])
        da, db = unit_rows(rng, 4, 8), unit_rows(rng, 6, 8)
        s = descriptor_similarity(T, da, db, f4).value
        pa, pb = rng.permutation(4), rng.permutation(6)
        np.testing.assert_allclose(descriptor_similarity(T, da[pa], db[pb], f4).value, s[pa][:, pb], atol=1e-14)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            descriptor_similarity(T, unit_rows(rng, 2, 8), unit_rows(rng, 2, 4), identity_mlp(8))


class TestPositionSimilarity:
    def test_single_point(self, rng):
        f5 = Mlp.init(rng, [2, 8, 2])
        p = np.array([[0.3, -0.2]])
        s = position_similarity(T, p, f5).value
        e = oracles.mlp(f5, p)
        assert s.shape == (1, 1)
        assert s[0, 0] == pytest.approx(float(e[0] @ e[0])) and s[0, 0] >= 0

    def test_identical_points(self, rng):
        s = position_similarity(T, np.array([[0.1, 0.2], [0.1, 0.2]]), Mlp.init(rng, [2, 8, 2])).value
        assert np.all(s == s[0, 0])

    def test_symmetric_and_oracle(self, rng):
        f5 = Mlp.init(rng, [2, 8, 2])
        p = rng.uniform(-1, 1, size=(7, 2))
        s = position_similarity(T, p, f5).value
        np.testing.assert_allclose(s, s.T, atol=1e-12)
        e = oracles.mlp(f5, p)
        np.testing.assert_allclose(s, e @ e.T, atol=1e-12)


class TestModulate:
    def test_unit_affine_positive_scores(self, rng):
        s = rng.uniform(0.1, 2.0, size=(3, 4))
        out = modulate(T, Var(s), Var([1.0]), Var([0.0])).value
        np.testing.assert_array_equal(out[0], s)

    def test_zero_affine_is_zero(self, rng):
        out = modulate(T, Var(rng.normal(size=(3, 4))), Var([0.0, 0.0]), Var([0.0, 0.0])).value
        assert out.shape == (2, 3, 4)
        assert np.all(out == 0.0)

    def test_direct_formula(self):
        out = modulate(T, Var([[0.25]]), Var([2.0]), Var([-1.0])).value
        assert out[0, 0, 0] == pytest.approx(-0.005, abs=1e-15)

    def test_per_head_parameters(self, rng):
        s = rng.normal(size=(3, 3))
        lam, beta = np.array([0.5, -2.0, 1.0]), np.array([0.1, 0.0, -0.3])
        np.testing.assert_allclose(modulate(T, Var(s), Var(lam), Var(beta)).value, oracles.modulated(s, lam, beta))


class TestAdjust:
    def _state(self, rng, na=4, nb=5, c=8):
        params = BypassParams.init(rng, c)
        da, db = unit_rows(rng, na, c), unit_rows(rng, nb, c)
        pa, pb = rng.uniform(-1, 1, (na, 2)), rng.uniform(-1, 1, (nb, 2))
        return params, initial_state(T, da, db, pa, pb, params)

    def test_zero_decoders_keep_scores(self, rng):
        params, state = self._state(rng)
        zero = Mlp([Linear(np.zeros((2, 8)))])
        new = adjust(T, state, Var(rng.normal(size=(4, 8))), Var(rng.normal(size=(5, 8))), zero, zero)
        assert new.adjusted and not state.adjusted
        for a, b in ((new.s_d, state.s_d), (new.s_p_a, state.s_p_a), (new.s_p_b, state.s_p_b)):
            np.testing.assert_array_equal(a.value, b.value)

    def test_element_oracle_and_symmetry(self, rng):
        params, state = self._state(rng)
        xa, xb = rng.normal(size=(4, 8)), rng.normal(size=(5, 8))
        new = adjust(T, state, Var(xa), Var(xb), params.f6, params.f7)
        np.testing.assert_allclose(
            new.s_d.value,
            state.s_d.value + oracles.mlp(params.f6, xa) @ oracles.mlp(params.f6, xb).T,
            atol=1e-12,
        )
        np.testing.assert_allclose(
            new.s_p_a.value,
            state.s_p_a.value + oracles.mlp(params.f7, xa) @ oracles.mlp(params.f7, xa).T,
            atol=1e-12,
        )
        for s in (state.s_p_a, state.s_p_b, new.s_p_a, new.s_p_b):
            np.testing.assert_allclose(s.value, s.value.T, atol=1e-9)

    def test_double_adjust_rejected(self, rng):
        params, state = self._state(rng)
        xa, xb = Var(rng.normal(size=(4, 8))), Var(rng.normal(size=(5, 8)))
        once = adjust(T, state, xa, xb, params.f6, params.f7)
        with pytest.raises(UsageError):
            adjust(T, once, xa, xb, params.f6, params.f7)


def test_bypass_gradient_check(rng):
    params = BypassParams.init(rng, 8)
    da, db = unit_rows(rng, 3, 8), unit_rows(rng, 4, 8)
    pa, pb = rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (4, 2))
    xa, xb = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    lam, beta = Param(np.array([0.9, 1.1]), name="lam"), Param(np.array([0.1, -0.1]), name="beta")
    w = [rng.normal(size=s) for s in ((2, 3, 4), (2, 3, 3), (2, 4, 4))]

    def loss(tape):
        st = adjust(tape, initial_state(tape, da, db, pa, pb, params), Var(xa), Var(xb), params.f6, params.f7)
        total = None
        for s, wi in zip((st.s_d, st.s_p_a, st.s_p_b), w):
            term = tape.sum(tape.mul(modulate(tape, s, lam, beta), wi))
            total = term if total is None else tape.add(total, term)
        return total

    report = grad_check(loss, {**params.params(), "lam": lam, "beta": beta}, 1e-4)
    assert report.passed, report.summary()


def test_state_is_immutable(rng):
    params = BypassParams.init(rng, 8)
    st = initial_state(T, unit_rows(rng, 2, 8), unit_rows(rng, 2, 8), np.zeros((2, 2)), np.zeros((2, 2)), params)
    assert isinstance(st, BypassState)
    with pytest.raises(AttributeError):
        st.adjusted = True
