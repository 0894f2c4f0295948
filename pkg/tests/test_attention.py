import numpy as np
import pytest

import oracles
from resmatch.attention import AttentionParams, Bypass, attend, cross_attend, self_attend
from resmatch.errors import ShapeError
from resmatch.kernel import Param, Tape, Var, grad_check


def run(x, y, params, bypass=None, capture=None):
    return attend(Tape(record=False), Var(x), Var(y), params, bypass, capture).value


@pytest.fixture
def params(rng):
    p = AttentionParams.init(rng, 8, 2)
    for prm in p.params().values():  # non-zero biases exercise every term
        if prm.name.endswith("bias"):
            prm.value[...] = rng.normal(scale=0.1, size=prm.shape)
    return p


def test_single_key_gets_all_weight(rng, params):
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(1, 8))
    cap = {}
    out = run(x, y, params, capture=cap)
    np.testing.assert_array_equal(cap["weights"], np.ones((2, 3, 1)))
    v = y @ params.value.weight.value.T + params.value.bias.value
    v = np.repeat(v, 3, axis=0)
    merged = v @ params.merge.weight.value.T + params.merge.bias.value
    np.testing.assert_allclose(out, x + oracles.mlp(params.f3, np.hstack([x, merged])), atol=1e-12)


def test_identical_keys_uniform(rng, params):
    x = rng.normal(size=(4, 8))
    y = np.tile(rng.normal(size=(1, 8)), (5, 1))
    cap = {}
    run(x, y, params, capture=cap)
    np.testing.assert_allclose(cap["weights"], 0.2, atol=1e-15)


def test_zero_bypass_is_identity(rng, params):
    x = rng.normal(size=(6, 8))
    plain = run(x, x, params)
    raw = Var(rng.normal(size=(6, 6)))
    zero = Bypass(raw, Var(np.zeros(2)), Var(np.zeros(2)))
    np.testing.assert_array_equal(run(x, x, params, zero), plain)


def test_matches_brute_force(rng, params):
    x, y = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    np.testing.assert_allclose(run(x, y, params), oracles.attention(x, y, params), atol=1e-12)


def test_matches_brute_force_with_bypass(rng, params):
    x, y = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    raw = rng.normal(size=(5, 7))
    lam, beta = np.array([0.7, -1.3]), np.array([0.2, -0.4])
    byp = Bypass(Var(raw), Var(lam), Var(beta))
    expected = oracles.attention(x, y, params, oracles.modulated(raw, lam, beta))
    np.testing.assert_allclose(run(x, y, params, byp), expected, atol=1e-12)


def test_self_attend_single_point(rng, params):
    x = rng.normal(size=(1, 8))
    out = self_attend(Tape(record=False), Var(x), params).value
    np.testing.assert_allclose(out, oracles.attention(x, x, params), atol=1e-12)


def test_cross_with_same_inputs_is_self(rng, params):
    x = rng.normal(size=(4, 8))
    t = Tape(record=False)
    np.testing.assert_array_equal(
        cross_attend(t, Var(x), Var(x), params).value, self_attend(t, Var(x), params).value
    )


def test_large_lambda_concentrates_on_one_key(rng, params):
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(6, 8))
    raw = np.zeros((3, 6))
    raw[:, 4] = 1.0
    cap = {}
    run(x, y, params, Bypass(Var(raw), Var(np.full(2, 50.0)), Var(np.zeros(2))), cap)
    assert np.all(cap["weights"][:, :, 4] > 0.99)


def test_rows_are_stochastic(rng, params):
    cap = {}
    run(rng.normal(size=(5, 8)) * 3, rng.normal(size=(9, 8)) * 3, params, capture=cap)
    np.testing.assert_allclose(cap["weights"].sum(axis=-1), 1.0, atol=1e-12)


def test_permutation_equivariance(rng, params):
    x, y = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    raw = rng.normal(size=(5, 7))
    byp = lambda r: Bypass(Var(r), Var(np.array([1.0, 0.5])), Var(np.array([0.1, 0.0])))
    base = run(x, y, params, byp(raw))
    pq, pk = rng.permutation(5), rng.permutation(7)
    np.testing.assert_allclose(run(x[pq], y, params, byp(raw[pq])), base[pq], atol=1e-12)
    np.testing.assert_allclose(run(x, y[pk], params, byp(raw[:, pk])), base, atol=1e-12)


def test_shape_errors(rng, params):
    with pytest.raises(ShapeError):
        run(rng.normal(size=(3, 8)), rng.normal(size=(3, 6)), params)
    wrong_heads = Bypass(Var(np.zeros((3, 3))), Var(np.ones(3)), Var(np.zeros(3)))
    with pytest.raises(ShapeError):
        run(rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), params, wrong_heads)
    with pytest.raises(ShapeError):
        AttentionParams.init(rng, 10, 4)


def test_block_gradient_check(rng, params):
    x = Var(rng.normal(size=(4, 8)), requires_grad=True)
    y = Var(rng.normal(size=(5, 8)), requires_grad=True)
    raw = Var(rng.normal(size=(4, 5)), requires_grad=True)
    lam = Param(np.array([0.8, 1.2]), name="lam")
    beta = Param(np.array([0.3, -0.2]), name="beta")
    weights = rng.normal(size=(4, 8))

    def loss(tape):
        out = attend(tape, x, y, params, Bypass(raw, lam, beta))
        return tape.sum(tape.mul(out, weights))

    wrt = {**params.params(), "x": x, "y": y, "bypass": raw, "lam": lam, "beta": beta}
    report = grad_check(loss, wrt, 1e-4)
    assert report.passed, report.summary()
