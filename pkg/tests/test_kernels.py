import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from assocdetr import kernels
from assocdetr.autodiff import ops
from assocdetr.autodiff.tensor import Tape, Tensor, backward

needs_numba = pytest.mark.skipif("numba" not in kernels.available_backends(), reason="numba not importable")
NP = kernels._BACKENDS["numpy"]


def _pair(name, *args):
    a = getattr(NP, name)(*args)
    b = getattr(kernels._BACKENDS["numba"], name)(*args)
    return a, b


def _assert_same(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _assert_same(x, y)
        return
    assert a.shape == b.shape and a.dtype == b.dtype
    assert np.array_equal(a, b)


@needs_numba
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_backends_bitwise_equal(n, cg, groups, hw, k, stride, seed):
    if k > hw:
        return
    rng = np.random.default_rng(seed)
    c = cg * groups
    xp = rng.standard_normal((n, c, hw, hw))
    w = rng.standard_normal((2 * groups, cg, k, k))
    _assert_same(*_pair("conv2d_forward", xp, w, stride, groups))
    cols = NP.im2col(xp, k, k, stride)
    _assert_same(cols, kernels._BACKENDS["numba"].im2col(xp, k, k, stride))
    g = rng.standard_normal(cols.shape)
    _assert_same(*_pair("col2im", g, xp.shape, k, k, stride))
    pooled, arg = NP.maxpool_forward(xp, k, k, stride)
    _assert_same((pooled, arg), kernels._BACKENDS["numba"].maxpool_forward(xp, k, k, stride))
    gp = rng.standard_normal(pooled.shape)
    _assert_same(*_pair("maxpool_backward", gp, arg, xp.shape))
    _assert_same(*_pair("avgpool_forward", xp, k, k, stride))
    _assert_same(*_pair("avgpool_backward", gp, xp.shape, k, k, stride))


@needs_numba
def test_maxpool_tie_break_matches():
    xp = np.zeros((1, 1, 3, 3))
    a = NP.maxpool_forward(xp, 2, 2, 1)
    b = kernels._BACKENDS["numba"].maxpool_forward(xp, 2, 2, 1)
    _assert_same(a, b)
    assert a[1].reshape(-1).tolist() == [0, 1, 3, 4]


@needs_numba
def test_gradients_identical_under_both_backends():
    def run():
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        with Tape() as tape:
            y = ops.conv2d(x, w, stride=1, padding=1, groups=2)
            y = ops.pool("max", y, 2, 2)
            root = ops.sum(ops.mul(y, y))
        backward(root, tape)
        return root.data, x.grad, w.grad
    with kernels.use_backend("numpy"):
        a = run()
    with kernels.use_backend("numba"):
        b = run()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_use_backend_restores_previous():
    before = kernels.get_backend()
    with kernels.use_backend("numpy"):
        assert kernels.get_backend() == "numpy"
        assert kernels.conv2d_forward is NP.conv2d_forward
    assert kernels.get_backend() == before


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@pytest.mark.parametrize("flag,expect", [("numpy", "numpy"), ("bogus", "numpy")])
def test_environment_flag_selects_backend(flag, expect):
    env = dict(os.environ, ASSOCDETR_KERNELS=flag)
    out = subprocess.run([sys.executable, "-c", "from assocdetr import kernels; print(kernels.get_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expect


@needs_numba
def test_default_backend_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "ASSOCDETR_KERNELS"}
    out = subprocess.run([sys.executable, "-c", "from assocdetr import kernels; print(kernels.get_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
