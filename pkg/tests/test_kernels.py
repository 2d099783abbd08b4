import os
import subprocess
import sys

import numpy as np
import pytest

from setadapt import kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def pair(name):
    return getattr(K, name + "_numpy"), getattr(K, name + "_numba")


@pytest.fixture
def data(rng):
    x = rng.standard_normal((7, 5)) * 3
    g = rng.standard_normal((7, 5))
    return x, g


def test_softmax_parity(data):
    x, g = data
    fn, fb = pair("softmax_rows")
    y = fn(x)
    assert np.allclose(y, fb(x), rtol=0, atol=1e-15)
    bn, bb = pair("softmax_rows_backward")
    assert np.allclose(bn(y, g), bb(y, g), atol=1e-14)


def test_layer_norm_parity(data, rng):
    x, g = data
    gain, bias = rng.standard_normal((1, 5)), rng.standard_normal((1, 5))
    fn, fb = pair("layer_norm")
    a, b = fn(x, gain, bias, 1e-5), fb(x, gain, bias, 1e-5)
    for u, v in zip(a, b):
        assert np.allclose(u, v, atol=1e-13)
    bn, bb = pair("layer_norm_backward")
    for u, v in zip(bn(g, a[1], a[2], gain), bb(g, a[1], a[2], gain)):
        assert np.allclose(u, v, atol=1e-12)


def test_sq_dists_parity(rng):
    a, b = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
    fn, fb = pair("sq_dists")
    assert np.allclose(fn(a, b), fb(a, b), atol=1e-12)
    assert np.all(fn(a, a) >= 0) and np.all(fb(a, a) >= 0)


def test_complement_max_parity_including_ties(rng):
    h = rng.integers(0, 3, size=(6, 4)).astype(np.float64)  # many ties
    fn, fb = pair("complement_max")
    (vn, in_), (vb, ib) = fn(h), fb(h)
    assert np.array_equal(vn, vb) and np.array_equal(in_, ib)
    g = rng.standard_normal((6, 4))
    bn, bb = pair("complement_max_backward")
    assert np.allclose(bn(g, in_, 6), bb(g, ib, 6))
    assert np.array_equal(fb(h[:1])[0], np.zeros((1, 4)))


def test_lstm_parity(rng):
    x = rng.standard_normal((5, 3))
    wx, wh, b = rng.standard_normal((3, 8)), rng.standard_normal((2, 8)), rng.standard_normal((1, 8))
    fn, fb = pair("lstm_forward")
    out_n, out_b = fn(x, wx, wh, b), fb(x, wx, wh, b)
    for u, v in zip(out_n, out_b):
        assert np.allclose(u, v, atol=1e-13)
    dh = rng.standard_normal((5, 2))
    bn, bb = pair("lstm_backward")
    for u, v in zip(bn(dh, x, wx, wh, *out_n), bb(dh, x, wx, wh, *out_b)):
        assert np.allclose(u, v, atol=1e-12)


def test_kernels_leave_inputs_untouched(data):
    x, g = data
    x0 = x.copy()
    for name in ("softmax_rows", "complement_max"):
        for f in pair(name):
            f(x)
    assert np.array_equal(x, x0)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, SETADAPT_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from setadapt import kernels; print(kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
