import os
import subprocess
import sys

import numpy as np
import pytest

from prefdistill import _kernels as K

numba_only = pytest.mark.skipif(not hasattr(K, "dense_forward_nb"), reason="numba missing")


def _dense_case(seed, n=6, k=5, m=4):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, k)), rng.standard_normal((m, k)), rng.standard_normal(m),
            rng.standard_normal((n, m)))


@numba_only
@pytest.mark.parametrize("act", [K.ACT_IDENTITY, K.ACT_TANH, K.ACT_RELU])
def test_dense_paths_agree(act):
    for seed in range(10):
        x, w, b, up = _dense_case(seed)
        out_np = K.dense_forward_np(x, w, b, act)
        out_nb = K.dense_forward_nb(x, w, b, act)
        assert np.allclose(out_np, out_nb, rtol=0, atol=1e-13)
        for a, c in zip(K.dense_backward_np(x, w, out_np, act, up),
                        K.dense_backward_nb(x, w, out_np, act, up)):
            assert np.allclose(a, c, rtol=0, atol=1e-13)


@numba_only
def test_mixture_paths_agree():
    rng = np.random.default_rng(3)
    for m in (1, 2, 5):
        x = rng.standard_normal((7, 12)) * 2
        mu = rng.standard_normal((m, 12))
        var = rng.uniform(0.01, 2.0, (m, 12))
        lw = np.log(rng.dirichlet(np.ones(m)))
        e1, l1 = K.mixture_eps_np(x, mu, var, lw, 0.6, 0.8)
        e2, l2 = K.mixture_eps_nb(x, mu, var, lw, 0.6, 0.8)
        assert np.allclose(e1, e2, rtol=0, atol=1e-12)
        assert np.allclose(l1, l2, rtol=1e-13, atol=1e-12)


def test_mixture_stays_finite_far_from_every_component():
    x = np.full((1, 4), 1e3)
    eps, logp = K.mixture_eps_np(x, np.zeros((2, 4)), np.full((2, 4), 1e-3),
                                 np.log([0.5, 0.5]), 1.0, 1e-3)
    assert np.all(np.isfinite(eps)) and np.isfinite(logp[0])


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        K._select("fortran")


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_env_flag_selects_backend(backend):
    code = "from prefdistill import _kernels as K; print(K.BACKEND, K.dense_forward.__name__)"
    env = dict(os.environ, PREFDISTILL_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    assert out[0] == backend
    assert out[1] == ("dense_forward_nb" if backend == "numba" else "dense_forward_np")
