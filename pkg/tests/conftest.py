"""Shared test setup: pin BLAS threads before numpy loads so results are
deterministic, and provide the small independent oracles used across the
suite."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.PCG64(1234))


def naive_conv(x, w, groups=1, stride=1, padding=0, pad_value=0.0):
    """Direct 6-loop cross-correlation; the conv oracle."""
    n, c, h, wd = x.shape
    oc, icg, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.full((n, c, h + 2 * padding, wd + 2 * padding), pad_value, dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ocg = oc // groups
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for o in range(oc):
            g = o // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(icg):
                        cin = g * icg + ci
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[ni, cin, i * stride + ki, j * stride + kj]
                                    * w[o, ci, ki, kj]
                                )
                    out[ni, o, i, j] = acc
    return out


def naive_avg_pool(x, window, stride):
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[
                :, :, i * stride : i * stride + window, j * stride : j * stride + window
            ].mean(axis=(2, 3))
    return out


def fd_gradient(f, x, indices, h=1e-6):
    """Central finite differences of scalar f(x) at selected flat indices."""
    flat = x.ravel()
    out = {}
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out
