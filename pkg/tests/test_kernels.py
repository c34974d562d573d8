"""Compiled and pure-Python kernels must agree."""

import numpy as np
import pytest

from fedmac import _pykernels as py
from fedmac import kernels

ck = pytest.importorskip("fedmac._ckernels")


def _vec(rng, n=257, scale=1.0):
    return rng.standard_normal(n) * scale


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "numpy")


@pytest.mark.parametrize("rho", [1e-4, 1e-2, 1.0])
def test_logcosh_and_tanh_match(rng, rho):
    x = _vec(rng, scale=10 * rho)
    np.testing.assert_allclose(ck.logcosh_excess(x, rho), py.logcosh_excess(x, rho), rtol=1e-14, atol=0)
    np.testing.assert_allclose(ck.tanh_scaled(x, rho), py.tanh_scaled(x, rho), rtol=1e-14, atol=1e-300)


def test_update_steps_match(rng):
    n = 300
    args = [_vec(rng, n) for _ in range(3)]
    for name, extra in [("theta_step", (0.05, 3e-4, 1e-4, 1e-4)),
                        ("prox_step", (0.05, 3e-4, 15.0, 1e-4)),
                        ("w_step", (0.02, 15.0, 1e-8, 1e-4))]:
        a = args[0].copy()
        b = args[0].copy()
        if name == "w_step":
            ok1 = getattr(ck, name)(a, args[1], *extra)
            ok2 = getattr(py, name)(b, args[1], *extra)
        else:
            ok1 = getattr(ck, name)(a, args[1], args[2], *extra)
            ok2 = getattr(py, name)(b, args[1], args[2], *extra)
        assert ok1 and ok2
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15, err_msg=name)


def test_step_reports_nonfinite(rng):
    x = _vec(rng, 10)
    g = np.full(10, np.inf)
    for mod in (ck, py):
        assert not mod.prox_step(x.copy(), g, x, 0.1, 0.0, 0.0, 1e-4)


def test_softmax_xent_match(rng):
    logits = rng.standard_normal((40, 10)) * 30
    labels = rng.integers(0, 10, 40)
    ga, gb = logits.copy(), logits.copy()
    la = ck.softmax_xent(ga, labels)
    lb = py.softmax_xent(gb, labels)
    assert la == pytest.approx(lb, rel=1e-13)
    np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-15)


def test_ista_and_box_match(rng):
    th = _vec(rng)
    g = _vec(rng)
    a, b = th.copy(), th.copy()
    ck.ista_step(a, g, 0.1, 0.05)
    py.ista_step(b, g, 0.1, 0.05)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=0)
    G = rng.standard_normal((50, 64))
    lo = -np.abs(rng.standard_normal(64))
    hi = lo + np.abs(rng.standard_normal(64))
    np.testing.assert_allclose(ck.box_sq_dist(G, lo, hi), py.box_sq_dist(G, lo, hi), rtol=1e-13)
