import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octselfnet import _kernels as K

needs_numba = pytest.mark.skipif(K.numba is None, reason="numba not installed")


def loop_col2im(dcols, hp, wp, stride):
    n, ho, wo, c, k, _ = dcols.shape
    out = np.zeros((n, c, hp, wp))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                out[b, :, i * stride:i * stride + k, j * stride:j * stride + k] += dcols[b, i, j]
    return out


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**31))
def test_col2im_paths_agree(n, c, k, stride, seed):
    rng = np.random.default_rng(seed)
    ho = 4
    hp = (ho - 1) * stride + k
    dcols = rng.normal(size=(n, ho, ho, c, k, k))
    a, b = np.zeros((n, c, hp, hp)), np.zeros((n, c, hp, hp))
    K.col2im_numba(dcols, a, stride)
    K.col2im_numpy(dcols, b, stride)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, loop_col2im(dcols, hp, hp, stride), rtol=0, atol=1e-12)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_maxpool_paths_agree(seed, ties):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, (2, 3, 10, 10)).astype(float) if ties else rng.normal(size=(2, 3, 10, 10))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ya, arga = K.maxpool_fwd_numba(xp, 3, 2, 5, 5)
    yb, argb = K.maxpool_fwd_numpy(xp, 3, 2, 5, 5)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(arga, argb)
    ref = np.array([[[[xp[b, c, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max() for j in range(5)] for i in range(5)]
                     for c in range(3)] for b in range(2)])
    np.testing.assert_array_equal(ya, ref)
    g = rng.normal(size=ya.shape)
    ga, gb = np.zeros_like(xp), np.zeros_like(xp)
    K.maxpool_bwd_numba(g, arga, ga)
    K.maxpool_bwd_numpy(g, argb, gb)
    np.testing.assert_array_equal(ga, gb)
    assert abs(ga.sum() - g.sum()) < 1e-10


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_bilinear_paths_agree(seed, zero_pad):
    rng = np.random.default_rng(seed)
    img = rng.random((7, 9))
    ys, xs = rng.uniform(-2, 10, (2, 5, 6))
    np.testing.assert_array_equal(K.bilinear_numba(img, ys, xs, zero_pad), K.bilinear_numpy(img, ys, xs, zero_pad))


def test_bilinear_integer_grid_is_lookup():
    img = np.arange(12.0).reshape(3, 4)
    yy, xx = np.meshgrid(np.arange(3.0), np.arange(4.0), indexing="ij")
    np.testing.assert_array_equal(K.bilinear_sample(img, yy, xx), img)


def test_env_flag_selects_numpy():
    code = "from octselfnet import _kernels as K; print(K.BACKEND)"
    env = dict(os.environ, OCTSN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_numba
def test_end_to_end_backends_match(tmp_path):
    # one resnet-desk training step under each backend gives identical weights
    code = """
import hashlib, numpy as np
from octselfnet import tensor as T
from octselfnet.backbones import build_classifier
from octselfnet.optim import AdamW
m = build_classifier("resnet-desk", 0, in_chans=3)
x = np.random.default_rng(0).normal(size=(2, 3, 32, 32))
T.backward(T.cross_entropy(m(T.Tensor(x)), np.array([0, 1])))
opt = AdamW(m, 1e-3); opt.step()
h = hashlib.sha256()
for k, v in sorted(m.state_dict().items()):
    h.update(v.tobytes())
print(h.hexdigest())
"""
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, OCTSN_DISABLE_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                                   check=True).stdout)
    assert outs[0] == outs[1]
