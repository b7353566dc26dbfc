import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capegraph import autodiff as ad
from capegraph.autodiff import Tensor
from capegraph.encoder import encode, init_encoder
from capegraph.nn import ParamSet

C, H, W = 16, 3, 4


def setup(seed=0, k=5, layers=2):
    rng = np.random.default_rng(seed)
    p = ParamSet()
    init_encoder(p, rng, C, layers)
    return p, rng.standard_normal((k, C)), rng.standard_normal((H * W, C))


def run(p, s, q, valid, layers=2):
    f_s, f_q = encode(Tensor(s), Tensor(q), valid, p, H, W, layers)
    return f_s.data, f_q.data


def test_output_shapes_and_finite():
    p, s, q = setup()
    f_s, f_q = run(p, s, q, np.ones(5, bool))
    assert f_s.shape == (5, C) and f_q.shape == (H * W, C)
    assert np.all(np.isfinite(f_s)) and np.all(np.isfinite(f_q))


def test_channel_mismatch_rejected():
    p, s, q = setup()
    with pytest.raises(ad.ShapeError):
        encode(Tensor(s), Tensor(q[:, :8]), np.ones(5, bool), p, H, W, 2)


def test_identical_rows_stay_identical():
    p, s, q = setup()
    s[3] = s[1]
    f_s, _ = run(p, s, q, np.ones(5, bool))
    assert np.array_equal(f_s[1], f_s[3])


def test_invalid_rows_zero_and_never_attended():
    p, s, q = setup()
    valid = np.array([True, False, True, True, False])
    a_s, a_q = run(p, s, q, valid)
    s2 = s.copy()
    s2[~valid] = 100.0 * np.random.default_rng(7).standard_normal((2, C))
    b_s, b_q = run(p, s2, q, valid)
    assert not a_s[~valid].any()
    assert np.array_equal(a_s, b_s) and np.array_equal(a_q, b_q)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_support_permutation_equivariance(seed):
    p, s, q = setup(seed % 1000)
    rng = np.random.default_rng(seed)
    valid = rng.random(5) < 0.7
    valid[0] = True
    perm = rng.permutation(5)
    a_s, a_q = run(p, s, q, valid)
    ps, pv = np.empty_like(s), np.empty_like(valid)
    ps[perm], pv[perm] = s, valid
    b_s, b_q = run(p, ps, q, pv)
    assert np.abs(b_s[perm] - a_s).max() < 1e-9
    assert np.abs(b_q - a_q).max() < 1e-9
