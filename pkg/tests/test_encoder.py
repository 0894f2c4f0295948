import numpy as np
import pytest

import oracles
from resmatch.encoder import EncoderParams, fuse
from resmatch.errors import ShapeError
from resmatch.kernel import Linear, Mlp, Tape, Var, grad_check

T = Tape(record=False)


def test_sum_of_two_embeddings(rng):
    params = EncoderParams.init(rng, 8)
    d, p = rng.normal(size=(5, 8)), rng.uniform(-1, 1, (5, 2))
    expected = oracles.mlp(params.f1, d) + oracles.mlp(params.f2, p)
    np.testing.assert_allclose(fuse(T, d, p, params).value, expected, atol=1e-12)


def test_zero_position_branch_passes_descriptor_embedding(rng):
    zero_pos = Mlp([Linear(np.zeros((4, 2)))])
    params = EncoderParams(f1=Mlp([Linear(np.eye(4))]), f2=zero_pos)
    d = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(fuse(T, d, rng.normal(size=(3, 2)), params).value, d)


def test_row_equivariance(rng):
    params = EncoderParams.init(rng, 8)
    d, p = rng.normal(size=(6, 8)), rng.uniform(-1, 1, (6, 2))
    perm = rng.permutation(6)
    np.testing.assert_allclose(fuse(T, d[perm], p[perm], params).value, fuse(T, d, p, params).value[perm], atol=1e-14)


@pytest.mark.parametrize("d_shape,p_shape", [((3, 6), (3, 2)), ((3, 8), (3, 3)), ((3, 8), (4, 2))])
def test_shape_errors(rng, d_shape, p_shape):
    with pytest.raises(ShapeError):
        fuse(T, np.zeros(d_shape), np.zeros(p_shape), EncoderParams.init(rng, 8))


def test_gradient_check(rng):
    params = EncoderParams.init(rng, 8)
    d = Var(rng.normal(size=(4, 8)), requires_grad=True)
    p = Var(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
    w = rng.normal(size=(4, 8))
    report = grad_check(lambda t: t.sum(t.mul(fuse(t, d, p, params), w)), {**params.params(), "d": d, "p": p}, 1e-6)
    assert report.passed, report.summary()
