"""Shared test helpers: the finite-difference gradient oracle."""

import numpy as np

import pytest


def numeric_grad(build, leaf, h=1e-5):
    """Central-difference gradient of the scalar build() w.r.t. one leaf tensor.

    build() must reconstruct the graph from the same leaf objects each call;
    leaf.data is perturbed in place and restored.
    """
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(build().data)
        flat[i] = orig - h
        lo = float(build().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def assert_grads_match(build, leaves, tol=1e-4, h=1e-5):
    """Backprop through build() and compare every leaf against finite differences.

    The error measure is |analytic - numeric| / max(1, |numeric|), elementwise:
    relative where gradients are large, absolute near zero.
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = build()
    out.backward()
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numeric_grad(build, leaf, h=h)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        assert err.max() < tol, f"gradient mismatch {err.max():.3e} on leaf {leaf.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
