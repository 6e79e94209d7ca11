"""Prompt pool: gating values, synthesis algebra, fusion semantics."""

import numpy as np
import pytest

from scprompt import Graph, grad_check
from scprompt.errors import ConfigError, ShapeError
from scprompt.rng import RngStream
from scprompt.softprompt import (PromptPool, bind, condition, fuse, gate,
                                 permuted_pool, synthesize)


def _pool(rng, tokens=3, channels=4, l=4):
    return PromptPool.init(rng, tokens=tokens, channels=channels, l=l)


def _run(pool, features, mode="concat"):
    """One forward pass; returns (weights, prompt, fused) values."""
    g = Graph()
    b = bind(g, pool)
    f = g.input(features, "features")
    w = gate(g, b, f)
    p = synthesize(g, b, w)
    out = fuse(g, f, p, mode)
    return w.value, p.value, out.value


# ----------------------------------------------------------------- gating


def test_zero_gate_parameters_give_half_weights():
    pool = PromptPool(experts=np.zeros((3, 2, 4)),
                      gate_weight=np.zeros((4, 3)), gate_bias=np.zeros(3))
    w, _, _ = _run(pool, np.random.default_rng(0).normal(size=(5, 2, 4)))
    np.testing.assert_array_equal(w, np.full((5, 3), 0.5))


def test_saturated_bias_pins_weights():
    pool = PromptPool(experts=np.zeros((2, 2, 4)),
                      gate_weight=np.zeros((4, 2)),
                      gate_bias=np.array([40.0, -40.0]))
    w, _, _ = _run(pool, np.random.default_rng(1).normal(size=(3, 2, 4)))
    np.testing.assert_allclose(w[:, 0], 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w[:, 1], 0.0, rtol=0, atol=1e-12)


def test_gate_matches_direct_evaluation():
    rng = np.random.default_rng(2)
    features = rng.normal(size=(3, 5, 2))
    weight = rng.normal(size=(2, 2))
    bias = rng.normal(size=2)
    pool = PromptPool(experts=np.zeros((2, 5, 2)), gate_weight=weight,
                      gate_bias=bias)
    w, _, _ = _run(pool, features)
    want = 1.0 / (1.0 + np.exp(-(features.mean(axis=1) @ weight + bias)))
    np.testing.assert_allclose(w, want, rtol=0, atol=1e-15)


def test_gate_weights_strictly_inside_unit_interval():
    rng = RngStream(3)
    pool = _pool(rng.child("pool"))
    for scale in (1.0, 100.0, 1e4):
        feats = rng.child("f", int(scale)).normal((4, 3, 4), std=scale)
        w, _, _ = _run(pool, feats)
        assert np.all(w > 0.0) and np.all(w < 1.0)


def test_gate_rejects_channel_mismatch():
    pool = _pool(RngStream(0), channels=4)
    g = Graph()
    b = bind(g, pool)
    f = g.input(np.zeros((2, 3, 5)), "features")
    with pytest.raises(ShapeError, match="channels"):
        gate(g, b, f)


# -------------------------------------------------------------- synthesis


def test_uniform_half_gate_halves_expert_sum():
    rng = RngStream(4)
    pool = _pool(rng, l=3)
    g = Graph()
    b = bind(g, pool)
    w = g.input(np.full((2, 3), 0.5), "w")
    p = synthesize(g, b, w).value
    want = 0.5 * pool.experts.sum(axis=0)
    np.testing.assert_allclose(p[0], want, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p[1], want, rtol=0, atol=1e-15)


def test_zero_experts_synthesize_zero():
    pool = PromptPool(experts=np.zeros((4, 2, 3)),
                      gate_weight=np.zeros((3, 4)), gate_bias=np.ones(4))
    g = Graph()
    b = bind(g, pool)
    w = g.input(np.random.default_rng(0).uniform(size=(3, 4)), "w")
    np.testing.assert_array_equal(synthesize(g, b, w).value, 0.0)


def test_basis_experts_recover_weights():
    pool = PromptPool(experts=np.array([[[1.0, 0.0]], [[0.0, 1.0]]]),
                      gate_weight=np.zeros((2, 2)), gate_bias=np.zeros(2))
    g = Graph()
    b = bind(g, pool)
    w = g.input(np.array([[0.3, 0.7]]), "w")
    np.testing.assert_allclose(synthesize(g, b, w).value,
                               [[[0.3, 0.7]]], rtol=0, atol=1e-16)


def test_synthesize_rejects_expert_count_mismatch():
    pool = _pool(RngStream(1), l=4)
    g = Graph()
    b = bind(g, pool)
    w = g.input(np.zeros((2, 3)), "w")
    with pytest.raises(ShapeError, match="expert counts"):
        synthesize(g, b, w)


# ------------------------------------------------------------------ fusion


def test_fuse_add_with_zero_prompt_is_identity():
    g = Graph()
    f = g.input(np.random.default_rng(0).normal(size=(2, 3, 4)), "f")
    p = g.input(np.zeros((2, 3, 4)), "p")
    np.testing.assert_array_equal(fuse(g, f, p, "add").value, f.value)


def test_fuse_mul_with_ones_prompt_is_identity():
    g = Graph()
    f = g.input(np.random.default_rng(1).normal(size=(2, 3, 4)), "f")
    p = g.input(np.ones((2, 3, 4)), "p")
    np.testing.assert_array_equal(fuse(g, f, p, "mul").value, f.value)


def test_fuse_concat_appends_prompt_tokens():
    g = Graph()
    f = g.input(np.random.default_rng(2).normal(size=(2, 3, 4)), "f")
    p = g.input(np.random.default_rng(3).normal(size=(2, 3, 4)), "p")
    out = fuse(g, f, p, "concat").value
    assert out.shape == (2, 6, 4)
    np.testing.assert_array_equal(out[:, :3], f.value)
    np.testing.assert_array_equal(out[:, 3:], p.value)


def test_fuse_rejects_unknown_mode():
    g = Graph()
    f = g.input(np.zeros((1, 2, 2)), "f")
    with pytest.raises(ConfigError, match="fuse mode"):
        fuse(g, f, f, "stack")


# ---------------------------------------------------------------- algebra


def test_expert_permutation_leaves_prompt_bit_identical():
    rng = RngStream(5)
    for trial in range(20):
        r = rng.child("trial", trial)
        l = int(r.integers(1, 9))
        pool = _pool(r.child("pool"), tokens=2, channels=3, l=l)
        feats = r.child("feats").normal((3, 2, 3))
        perm = r.child("perm").permutation(l)
        _, p1, _ = _run(pool, feats)
        _, p2, _ = _run(permuted_pool(pool, perm), feats)
        assert p1.tobytes() == p2.tobytes()


def test_pool_scaling_is_exactly_linear_for_radix2_scalars():
    # alpha a power of two: scaling then rounding commute, so exact
    # equality is achievable; arbitrary reals would round differently
    rng = RngStream(6)
    for trial in range(20):
        r = rng.child("trial", trial)
        alpha = 2.0 ** int(r.integers(-3, 4))
        pool = _pool(r.child("pool"), l=3)
        feats = r.child("feats").normal((2, 3, 4))
        g = Graph()
        b = bind(g, pool)
        w = gate(g, b, g.input(feats, "f"))
        p = synthesize(g, b, w)
        scaled_pool = PromptPool(experts=alpha * pool.experts,
                                 gate_weight=pool.gate_weight,
                                 gate_bias=pool.gate_bias)
        g2 = Graph()
        b2 = bind(g2, scaled_pool)
        w2 = gate(g2, b2, g2.input(feats, "f"))
        p2 = synthesize(g2, b2, w2)
        assert (alpha * p.value).tobytes() == p2.value.tobytes()


# -------------------------------------------------------------- gradients


def test_every_expert_entry_receives_a_gradient():
    rng = RngStream(7)
    pool = _pool(rng.child("pool"))
    g = Graph()
    b = bind(g, pool)
    f = g.input(rng.child("f").normal((2, 3, 4)), "features")
    out = condition(g, b, f, "concat")
    loss = g.mean(g.mul(out, out))
    g.backward(loss)
    for node in (b.experts, b.gate_weight, b.gate_bias):
        assert node.grad is not None
        assert node.grad.shape == node.value.shape
        assert np.all(np.isfinite(node.grad))


@pytest.mark.parametrize("mode", ["concat", "add", "mul"])
def test_grad_check_through_gate_synthesize_fuse(mode):
    rng = RngStream(8).child(mode)
    pool = _pool(rng.child("pool"), tokens=3, channels=4, l=4)
    g = Graph()
    b = bind(g, pool)
    f = g.input(rng.child("f").normal((2, 3, 4)), "features")
    out = condition(g, b, f, mode)
    proj = g.input(rng.child("proj").uniform(out.value.shape, 0.5, 1.5))
    loss = g.sum(g.mul(out, proj))
    report = grad_check(g, loss, epsilon=1e-5, tolerance=1e-5)
    assert report.passed, report.summary()


def test_default_expert_count_is_eight():
    pool = PromptPool.init(RngStream(9), tokens=2, channels=3)
    assert pool.l == 8
