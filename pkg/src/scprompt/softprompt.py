"""Gated prompt-expert pool and prompt-feature fusion.

The pool holds l input-invariant prompt experts, each a token sequence
of shape S x C. A gating network averages an input's tokens, pushes the
result through a dense map and a sigmoid, and uses the l resulting
weights to blend the experts into one input-specific prompt. The gate
weights are independent values in (0, 1), not a distribution over
experts; several experts can be fully active at once, or none.

The synthesized prompt joins the features by token concatenation
(default), element-wise addition, or element-wise multiplication.

Everything here builds onto a :class:`~scprompt.autodiff.Graph`, so the
experts and the gating network train jointly with the rest of the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, ShapeError
from .rng import RngStream

FUSE_MODES = ("concat", "add", "mul")


@dataclass
class PromptPool:
    """The learnable state: l experts plus the gating parameters.

    experts: (l, S, C); gate_weight: (C, l); gate_bias: (l,).
    """

    experts: np.ndarray
    gate_weight: np.ndarray
    gate_bias: np.ndarray

    def __post_init__(self):
        e, w, b = self.experts, self.gate_weight, self.gate_bias
        if e.ndim != 3:
            raise ShapeError(f"experts must be (l, S, C); got {e.shape}")
        if w.shape != (e.shape[2], e.shape[0]) or b.shape != (e.shape[0],):
            raise ShapeError(
                f"gate shapes {w.shape}/{b.shape} do not match experts "
                f"{e.shape} (want ({e.shape[2]}, {e.shape[0]}) and "
                f"({e.shape[0]},))")

    @property
    def l(self) -> int:
        return self.experts.shape[0]

    @property
    def tokens(self) -> int:
        return self.experts.shape[1]

    @property
    def channels(self) -> int:
        return self.experts.shape[2]

    @classmethod
    def init(cls, rng: RngStream, tokens: int, channels: int,
             l: int = 8, std: float = 0.02) -> "PromptPool":
        """Fresh pool: Gaussian experts and gate weights, zero gate bias.

        Zero bias puts every initial gate at exactly 0.5, a neutral blend.
        """
        if l < 1:
            raise ConfigError(f"expert count l must be >= 1; got {l}")
        return cls(
            experts=rng.normal((l, tokens, channels), std=std),
            gate_weight=rng.normal((channels, l), std=std),
            gate_bias=np.zeros(l),
        )


@dataclass
class BoundPool:
    """Pool parameters registered as nodes of one graph."""

    experts: Node
    gate_weight: Node
    gate_bias: Node


def bind(g: Graph, pool: PromptPool, prefix: str = "prompt") -> BoundPool:
    return BoundPool(
        experts=g.param(pool.experts, f"{prefix}.experts"),
        gate_weight=g.param(pool.gate_weight, f"{prefix}.gate_weight"),
        gate_bias=g.param(pool.gate_bias, f"{prefix}.gate_bias"),
    )


def gate(g: Graph, bound: BoundPool, features: Node) -> Node:
    """Per-input expert weights: sigmoid(mean over tokens @ W + b).

    features is (B, S, C); the result is (B, l) with every entry
    strictly inside (0, 1).
    """
    if features.value.ndim != 3:
        raise ShapeError(
            f"gate input '{features.name}' must be (B, S, C); got "
            f"{features.value.shape}")
    c = bound.gate_weight.value.shape[0]
    if features.value.shape[2] != c:
        raise ShapeError(
            f"gate input '{features.name}' has {features.value.shape[2]} "
            f"channels; gating network expects {c}")
    pooled = g.mean(features, axis=1)
    return g.sigmoid(g.affine(pooled, bound.gate_weight, bound.gate_bias))


def synthesize(g: Graph, bound: BoundPool, weights: Node) -> Node:
    """Blend the pool into one prompt per input: P*[b] = sum_k w[b,k] P_k.

    The expert contributions are summed in value-sorted order, so
    relabeling the experts (with their gate columns) can never change
    the output bits.
    """
    return g.mix_experts(weights, bound.experts)


def fuse(g: Graph, features: Node, prompt: Node, mode: str = "concat") -> Node:
    """Join features (B, S, C) with a prompt.

    concat appends the prompt tokens after the feature tokens, giving
    (B, S + S_p, C); add and mul are element-wise and need equal shapes.
    """
    if mode not in FUSE_MODES:
        raise ConfigError(f"unknown fuse mode '{mode}' (want one of {FUSE_MODES})")
    if mode == "concat":
        return g.concat([features, prompt], axis=1)
    if mode == "add":
        return g.add(features, prompt)
    return g.mul(features, prompt)


def condition(g: Graph, bound: BoundPool, features: Node,
              mode: str = "concat") -> Node:
    """The full pipeline: gate, synthesize, fuse."""
    return fuse(g, features, synthesize(g, bound, gate(g, bound, features)),
                mode)


def permuted_pool(pool: PromptPool, perm: np.ndarray) -> PromptPool:
    """Relabel the experts (and matching gate columns) by a permutation."""
    return PromptPool(
        experts=pool.experts[perm].copy(),
        gate_weight=pool.gate_weight[:, perm].copy(),
        gate_bias=pool.gate_bias[perm].copy(),
    )
