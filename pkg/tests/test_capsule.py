import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsnet_lstm.capsule import (
    CapsuleLayer,
    Squash,
    capsule_layer_forward,
    primary_caps_forward,
    routing_by_agreement,
    squash,
    squash_backward,
)
from capsnet_lstm.errors import ArgumentError, DimensionError
from capsnet_lstm.layers import Conv2D
from capsnet_lstm.tensor import grad_check, seeded_rng

from conftest import layer_grad_error


def routing_oracle(u_hat, iterations):
    """Step-by-step scalar loops over plain Python floats."""
    nin, nout, dim = u_hat.shape
    b = [[0.0] * nout for _ in range(nin)]
    v = None
    for it in range(iterations):
        c = []
        for i in range(nin):
            m = max(b[i])
            e = [math.exp(b[i][j] - m) for j in range(nout)]
            c.append([x / sum(e) for x in e])
        v = []
        for j in range(nout):
            s = [sum(c[i][j] * float(u_hat[i, j, d]) for i in range(nin)) for d in range(dim)]
            n2 = sum(x * x for x in s)
            scale = n2 / (1 + n2) / (math.sqrt(n2) + 1e-7)
            v.append([scale * x for x in s])
        if it < iterations - 1:
            for i in range(nin):
                for j in range(nout):
                    b[i][j] += sum(float(u_hat[i, j, d]) * v[j][d] for d in range(dim))
    return np.array(v)


# -- squash ---------------------------------------------------------------------


def test_squash_examples():
    assert not squash(np.zeros(4)).any()
    v = squash(np.array([1.0, 0.0]))
    assert np.linalg.norm(v) == pytest.approx(0.5, abs=1e-6)
    s = np.array([0.0, 3.0, 0.0])
    v = squash(s)
    assert np.linalg.norm(v) == pytest.approx(0.9, abs=1e-6)
    assert np.dot(v, s) / (np.linalg.norm(v) * 3) == pytest.approx(1.0, abs=1e-12)


def test_squash_norm_grid_monotone_below_one():
    norms = np.linspace(0, 10, 1001)
    out = np.linalg.norm(squash(norms[:, None] * np.array([0.6, 0.8])), axis=1)
    assert np.all(out < 1)
    assert np.all(np.diff(out) > 0)


def test_squash_many_random_vectors():
    s = seeded_rng(0).normal(size=(5000, 8)) * seeded_rng(1).uniform(0, 10, size=(5000, 1))
    v = squash(s)
    nv, ns = np.linalg.norm(v, axis=1), np.linalg.norm(s, axis=1)
    assert np.all(nv < 1)
    order = np.argsort(ns)
    assert np.all(np.diff(nv[order]) >= 0)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)))
def test_squash_direction_preserved(s):
    n = np.linalg.norm(s)
    v = squash(s)
    assert np.linalg.norm(v) < 1
    if n > 1e-6:
        assert np.dot(s, v) / (n * np.linalg.norm(v)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 1.0, 4.0])
def test_squash_backward_grad_check(scale):
    s = seeded_rng(2).normal(size=(3, 5)) * scale
    w = seeded_rng(3).normal(size=(3, 5))
    assert grad_check(lambda v: (float(np.sum(squash(v) * w)), squash_backward(v, w)), s) < 1e-4


def test_squash_backward_at_zero_is_finite():
    g = squash_backward(np.zeros((2, 4)), np.ones((2, 4)))
    assert np.all(np.isfinite(g))


def test_squash_layer_grad_check():
    assert layer_grad_error(Squash("sq"), seeded_rng(4).normal(size=(2, 6, 4))) < 1e-4


# -- primary capsules -------------------------------------------------------------


def test_primary_caps_full_size_shape():
    feats = np.zeros((120, 120, 256), np.float32)
    conv = Conv2D("primarycap_conv2d", 256, 256, 9, 2)
    poses = primary_caps_forward(feats[None], 8, conv)[0]
    assert poses.shape == (100352, 8)
    assert not poses.any()


def test_primary_caps_norms_below_one():
    poses = primary_caps_forward(seeded_rng(5).normal(size=(10, 10, 80)) * 5, 8)
    assert poses.shape == (1000, 8)
    assert np.all(np.linalg.norm(poses, axis=1) < 1)


def test_primary_caps_indivisible():
    with pytest.raises(ArgumentError):
        primary_caps_forward(np.zeros((4, 4, 10)), 8)


# -- routing ------------------------------------------------------------------------


def test_routing_first_iteration_uniform():
    _, state = routing_by_agreement(seeded_rng(0).normal(size=(5, 2, 3)), 3)
    np.testing.assert_array_equal(state.couplings[0], 0.5)
    assert state.iteration == 3 and len(state.couplings) == 3


def test_routing_single_input_single_iteration():
    u = seeded_rng(1).normal(size=(1, 1, 4))
    v, _ = routing_by_agreement(u, 1)
    np.testing.assert_allclose(v, squash(u[0]), atol=1e-15)
    # with several outputs the uniform couplings divide the prediction by Nout
    u = seeded_rng(1).normal(size=(1, 3, 4))
    np.testing.assert_allclose(routing_by_agreement(u, 1)[0], squash(u[0] / 3), atol=1e-15)


def test_routing_matches_scalar_oracle():
    u = seeded_rng(2).normal(size=(4, 2, 3))
    v, _ = routing_by_agreement(u, 3)
    assert np.max(np.abs(v - routing_oracle(u, 3))) <= 1e-6


@pytest.mark.parametrize("r", [1, 2, 5])
def test_routing_oracle_other_iterations(r):
    u = seeded_rng(3).normal(size=(6, 3, 4))
    np.testing.assert_allclose(routing_by_agreement(u, r)[0], routing_oracle(u, r), atol=1e-12)


def test_routing_zero_iterations_rejected():
    with pytest.raises(ArgumentError):
        routing_by_agreement(np.zeros((2, 2, 2)), 0)
    with pytest.raises(ArgumentError):
        CapsuleLayer("c", 2, 2, 2, 2, iterations=0)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 4))
def test_routing_couplings_are_distributions(seed, nin, nout):
    u = seeded_rng(seed).normal(size=(nin, nout, 3)) * 3
    _, state = routing_by_agreement(u, 3)
    for c in state.couplings:
        np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((c > 0) & (c < 1))


def test_routing_permutation_equivariant():
    # identical up to float reassociation in the sum over inputs
    rng = seeded_rng(4)
    u = rng.normal(size=(9, 8))
    W = rng.normal(size=(9, 2, 4, 8))
    perm = rng.permutation(9)
    v1, _ = capsule_layer_forward(u, W)
    v2, _ = capsule_layer_forward(u[perm], W[perm])
    np.testing.assert_allclose(v1, v2, rtol=0, atol=1e-12)


def test_routing_backward_grad_check():
    layer = CapsuleLayer("c", 5, 3, 2, 4, iterations=3, rng=seeded_rng(5))
    x = seeded_rng(6).normal(size=(2, 5, 3))
    assert layer_grad_error(layer, x) < 1e-4


# -- capsule layer ---------------------------------------------------------------


def test_capsule_layer_full_size_count():
    assert CapsuleLayer("secondarycap", 100352, 8, 2, 16).param_count() == 25_690_112


def test_capsule_layer_zero_weights():
    layer = CapsuleLayer("c", 6, 4, 2, 3)
    assert not layer.forward(seeded_rng(7).normal(size=(2, 6, 4)).astype(np.float32)).any()


def test_capsule_layer_tiny_grad_check():
    layer = CapsuleLayer("c", 3, 2, 2, 2, rng=seeded_rng(8))
    assert layer_grad_error(layer, seeded_rng(9).normal(size=(1, 3, 2))) < 1e-4


def test_capsule_layer_matches_functional_form():
    layer = CapsuleLayer("c", 4, 3, 2, 5, rng=seeded_rng(10), dtype=np.float64)
    u = seeded_rng(11).normal(size=(3, 4, 3))
    out = layer.forward(u)
    for n in range(3):
        np.testing.assert_allclose(out[n], capsule_layer_forward(u[n], layer.params["W"])[0], atol=1e-12)


def test_capsule_layer_dimension_errors():
    with pytest.raises(DimensionError):
        capsule_layer_forward(np.zeros((3, 2)), np.zeros((4, 2, 2, 2)))
    with pytest.raises(DimensionError):
        CapsuleLayer("c", 3, 2, 2, 2).forward(np.zeros((1, 3, 3)))
