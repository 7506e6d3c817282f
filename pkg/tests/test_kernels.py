import os
import subprocess
import sys

import numpy as np
import pytest

from branchycsi import kernels
from branchycsi.kernels import _load

pytestmark = pytest.mark.skipif("compiled" not in kernels.available(), reason="compiled kernels not built")


def both(fn_name, *args, outs):
    """Run a kernel on both backends with fresh copies of the output arrays."""
    results = []
    for backend in ("compiled", "python"):
        bufs = [o.copy() for o in outs]
        getattr(_load(backend), fn_name)(*args, *bufs)
        results.append(bufs)
    return results


@pytest.mark.parametrize("stride,pad,mult,k", [(1, 1, 1, 3), (2, 1, 1, 3), (2, 2, 1, 5), (1, 1, 2, 3)])
def test_depthwise_kernels_agree(rng, stride, pad, mult, k):
    x = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
    w = rng.standard_normal((3 * mult, k, k)).astype(np.float32)
    Ho, Wo = (9 + 2 * pad - k) // stride + 1, (11 + 2 * pad - k) // stride + 1
    (a,), (b,) = both("dw_forward", x, w, stride, pad, mult, outs=[np.empty((2, 3 * mult, Ho, Wo), np.float32)])
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    gy = rng.standard_normal((2, 3 * mult, Ho, Wo)).astype(np.float32)
    (a,), (b,) = both("dw_backward_input", gy, w, stride, pad, mult, outs=[np.zeros_like(x)])
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)
    (a,), (b,) = both("dw_backward_weight", x, gy, stride, pad, mult, outs=[np.empty_like(w)])
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)


def test_im2col_col2im_agree_and_are_adjoint(rng):
    x = rng.standard_normal((2, 3, 6, 7))
    Ho, Wo = 6, 7
    (a,), (b,) = both("im2col", x, 3, 3, 1, 1, Ho, Wo, outs=[np.empty((2, 27, Ho * Wo))])
    np.testing.assert_array_equal(a, b)
    cols = rng.standard_normal((2, 27, Ho * Wo))
    (ga,), (gb,) = both("col2im", cols, 3, 3, 1, 1, Ho, Wo, outs=[np.zeros_like(x)])
    np.testing.assert_allclose(ga, gb, atol=1e-12)
    # <im2col(x), cols> == <x, col2im(cols)>
    assert np.sum(a * cols) == pytest.approx(np.sum(x * ga), rel=1e-10)


def test_batch_norm_kernels_agree(rng):
    x = rng.standard_normal((3, 4, 5, 6)).astype(np.float32)
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    outs = [np.empty_like(x), np.empty(4), np.empty(4)]
    (oa, ma, va), (ob, mb, vb) = both("bn_train_forward", x, gamma, beta, 1e-5, True, outs=outs)
    np.testing.assert_allclose(oa, ob, atol=1e-5)
    np.testing.assert_allclose(ma, mb, rtol=1e-12)
    np.testing.assert_allclose(va, vb, rtol=1e-10)
    g = rng.standard_normal(x.shape).astype(np.float32)
    istd = 1 / np.sqrt(va + 1e-5)
    outs = [np.empty_like(x), np.empty(4), np.empty(4)]
    ra, rb = both("bn_backward", x, g, oa, ma, istd, gamma, True, True, outs=outs)
    for u, v in zip(ra, rb):
        np.testing.assert_allclose(u, v, rtol=1e-4, atol=1e-4)


def test_compiled_reductions_are_deterministic(rng):
    x = rng.standard_normal((4, 8, 20, 30)).astype(np.float32)
    k = _load("compiled")
    runs = []
    for _ in range(3):
        out, mean, var = np.empty_like(x), np.empty(8), np.empty(8)
        k.bn_train_forward(x, np.ones(8), np.zeros(8), 1e-5, False, out, mean, var)
        runs.append((out.tobytes(), mean.tobytes(), var.tobytes()))
    assert runs[0] == runs[1] == runs[2]


def test_using_restores_backend():
    before = kernels.name()
    with kernels.using("python"):
        assert kernels.name() == "python"
        assert kernels.impl().__name__.endswith("_kernels_py")
    assert kernels.name() == before
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@pytest.mark.parametrize("value,expected", [("python", "python"), ("compiled", "compiled"), ("", "compiled")])
def test_environment_selects_backend_at_import(value, expected):
    env = {**os.environ, kernels.ENV_VAR: value}
    out = subprocess.run([sys.executable, "-c", "from branchycsi import kernels; print(kernels.name())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_environment_rejects_unknown_backend():
    env = {**os.environ, kernels.ENV_VAR: "gpu"}
    proc = subprocess.run([sys.executable, "-c", "import branchycsi.kernels"], env=env, capture_output=True)
    assert proc.returncode != 0
