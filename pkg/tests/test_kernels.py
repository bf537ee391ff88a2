import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stlconf import _kernels as K

pytestmark = pytest.mark.skipif(K.numba is None, reason="numba not installed")


def _case(seed, n_rows=7, width=9):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, width + 1, n_rows).astype(np.int64)
    X = rng.normal(size=(n_rows, width))
    X[np.arange(width)[None, :] >= lengths[:, None]] = 0.0
    starts = np.array([rng.integers(0, n) for n in lengths], dtype=np.int64)
    ends = np.array([s + rng.integers(0, n) for s, n in zip(starts, lengths)], dtype=np.int64)
    return X, lengths, starts, ends


@given(st.integers(0, 2**31), st.booleans())
def test_hard_backends_agree(seed, use_max):
    X, L, s, e = _case(seed)
    assert np.array_equal(K.window_hard_np(X, L, s, e, use_max), K.window_hard_nb(X, L, s, e, use_max))


@given(st.integers(0, 2**31), st.booleans(), st.sampled_from([1.0, 20.0, 1000.0]))
def test_soft_backends_agree(seed, use_max, tau):
    X, L, s, e = _case(seed)
    a = K.window_soft_np(X, L, s, e, tau, use_max)
    b = K.window_soft_nb(X, L, s, e, tau, use_max)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    adj = np.random.default_rng(seed).normal(size=X.shape)
    ga = K.window_soft_grad_np(X, a, adj, L, s, e, tau, use_max)
    gb = K.window_soft_grad_nb(X, a, adj, L, s, e, tau, use_max)
    np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-12)


def test_padding_is_zero():
    X, L, s, e = _case(1)
    out = K.window_hard(X, L, s, e, False)
    assert np.all(out[np.arange(X.shape[1])[None, :] >= L[:, None]] == 0.0)


def test_window_clamps_to_last_step():
    X = np.array([[3.0, 1.0, 2.0]])
    out = K.window_hard(X, np.array([3]), np.array([1]), np.array([5]), True)
    assert out.tolist() == [[2.0, 2.0, 2.0]]


@pytest.mark.parametrize("flag,want", [("0", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, want):
    env = dict(os.environ, STLCONF_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from stlconf import _kernels; print(_kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == want


def test_numpy_backend_end_to_end_matches():
    code = (
        "from stlconf import synth, stl; from stlconf.trace import SignalBatch;"
        "d = synth.generate('sharp_drop', 40, 1); b = SignalBatch.from_instances(d);"
        "phi, _ = stl.parse_formula('(G 0.0 0.5 (F 0.0 0.5 (le d -0.2)))');"
        "print(repr(stl.scalar_robustness(phi, b).tolist())); print(repr(stl.scalar_robustness(phi, b, tau=20.0).tolist()))"
    )
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, STLCONF_NUMBA=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout)
    hard = [eval(o.splitlines()[0]) for o in outs]
    soft = [eval(o.splitlines()[1]) for o in outs]
    assert hard[0] == hard[1]
    np.testing.assert_allclose(soft[0], soft[1], rtol=1e-12)
