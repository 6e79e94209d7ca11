"""The recognition network: encoder, temporal head, classifiers.

A video batch flattens into frames. Each frame is cut into patches,
linearly embedded, given a position embedding, optionally conditioned
by the prompt pool, and mixed by a small stack of attention blocks.
Frame tokens pool into per-frame features, frames average within each
temporal clip, and a shared recurrent cell folds the clip sequence into
one state: h_1 = f_a(x_1), h_{i+1} = f_a(h_i + x_{i+1}). The final
state is classified with a single dense layer.

Multi-agent mode instead samples each agent's box from the token grid
with bilinear ROI alignment, projects the flattened crop back to the
channel width, and runs the same temporal head per agent with shared
parameters; logits come out per agent.

Parameters live in a :class:`ModelParams` registry with a stable, flat
name order, which is what makes exhaustive gradient checking and
checkpointing straightforward.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, ShapeError
from .losses import bce_with_logits, cross_entropy, one_hot
from .rng import RngStream
from .softprompt import BoundPool, PromptPool, condition

PROMPT_MODES = ("none", "scp-concat", "scp-add", "scp-mul")
AR_NONLINEARITIES = ("tanh", "identity")


@dataclass
class EncoderConfig:
    patch_size: int = 8
    channels: int = 32
    depth: int = 1
    heads: int = 2
    prompt_mode: str = "none"

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(
                f"prompt_mode '{self.prompt_mode}' not one of {PROMPT_MODES}")
        if self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}")
        if self.depth < 0 or self.patch_size < 1 or self.heads < 1:
            raise ConfigError("encoder dims must be positive (depth >= 0)")


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    n_classes: int = 8
    in_channels: int = 3
    m_clips: int = 4
    experts: int = 8
    agents: int = 1
    roi_size: int = 5
    ar_nonlinearity: str = "tanh"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        p = self.encoder.patch_size
        if self.height % p or self.width % p:
            raise ConfigError(
                f"patch_size {p} does not divide frame {self.height}x"
                f"{self.width}")
        if self.ar_nonlinearity not in AR_NONLINEARITIES:
            raise ConfigError(
                f"ar_nonlinearity '{self.ar_nonlinearity}' not one of "
                f"{AR_NONLINEARITIES}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.agents < 1 or self.m_clips < 1 or self.experts < 1:
            raise ConfigError("agents, m_clips, and experts must be >= 1")

    @property
    def grid_shape(self) -> tuple:
        p = self.encoder.patch_size
        return self.height // p, self.width // p

    @property
    def grid_tokens(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(
                f"unknown model config keys {sorted(unknown)}; known keys "
                f"are {sorted(known)}")
        data = dict(data)
        if "encoder" in data and isinstance(data["encoder"], dict):
            enc_known = set(EncoderConfig.__dataclass_fields__)
            enc_unknown = set(data["encoder"]) - enc_known
            if enc_unknown:
                raise ConfigError(
                    f"unknown encoder config keys {sorted(enc_unknown)}; "
                    f"known keys are {sorted(enc_known)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Flat, ordered name -> array registry of every learnable tensor.

    Iteration order is creation order and never changes for a given
    config, giving gradient checks and checkpoints a stable parameter
    enumeration. Arrays are held by reference: an in-place optimizer
    update is visible to the next graph built from this registry.
    """

    def __init__(self, arrays: dict | None = None):
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})

    def add(self, name: str, value: np.ndarray):
        if name in self.arrays:
            raise ConfigError(f"duplicate parameter name '{name}'")
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def n_scalars(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def pool(self) -> PromptPool | None:
        if "prompt.experts" not in self.arrays:
            return None
        return PromptPool(experts=self.arrays["prompt.experts"],
                          gate_weight=self.arrays["prompt.gate_weight"],
                          gate_bias=self.arrays["prompt.gate_bias"])


INIT_SCHEMES = ("flat", "fan-in")


def init_params(config: ModelConfig, rng: RngStream, std: float = 0.02,
                scheme: str = "flat") -> ModelParams:
    """Draw the parameter registry for a model configuration.

    "flat" uses std directly for every gaussian tensor. "fan-in"
    divides by sqrt(input dimension) for weight matrices, treating std
    as a gain, which keeps each layer's output at the scale of its
    input and the recurrence's tanh out of its flat tails.
    """
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"init scheme '{scheme}' not one of {INIT_SCHEMES}")
    enc = config.encoder
    c = enc.channels
    s = config.grid_tokens
    patch_dim = enc.patch_size * enc.patch_size * config.in_channels
    params = ModelParams()

    def gauss(name, shape, fan_in=None):
        scale = std
        if scheme == "fan-in" and fan_in is not None:
            scale = std / np.sqrt(fan_in)
        params.add(name, rng.child("param", name).normal(shape, std=scale))

    gauss("embed.w", (patch_dim, c), patch_dim)
    params.add("embed.b", np.zeros(c))
    # token-mean pooling cancels patch content rearrangement exactly, so
    # position only reaches the pooled feature through attention reading
    # these embeddings; they stay at full gain rather than fan-in scale
    gauss("embed.pos", (s, c))
    if scheme == "fan-in":
        # mean-free filters and a centered position table keep the
        # pooled features near zero, which keeps the recurrence's tanh
        # in its linear range instead of saturating on a constant
        # offset before training starts
        for name in ("embed.w", "embed.pos"):
            arr = params[name]
            arr -= arr.mean(axis=0, keepdims=True)
    if enc.prompt_mode != "none":
        pool_std = std / np.sqrt(c) if scheme == "fan-in" else std
        pool = PromptPool.init(rng.child("param", "prompt"), tokens=s,
                               channels=c, l=config.experts, std=pool_std)
        params.add("prompt.experts", pool.experts)
        params.add("prompt.gate_weight", pool.gate_weight)
        params.add("prompt.gate_bias", pool.gate_bias)
        if scheme == "fan-in":
            # start the synthesized prompt near the fusion identity so
            # the prompt path cannot drown the feature stream before its
            # gradients have shaped it, but keep a small random component
            # as the symmetry breaker; for mul the experts sit around 2/l
            # (fresh gates are sigmoid(0) = 1/2, putting P* near ones)
            experts = params["prompt.experts"]
            experts *= 0.2
            if enc.prompt_mode == "mul":
                experts += 2.0 / config.experts
    # layer norm rescales whatever the residual branches emit back to
    # unit size, so random attention/MLP output at full gain buries the
    # tiny sample-to-sample signal under sample-independent clutter and
    # saturates the recurrence; fan-in mode therefore starts the branch
    # output projections small and the recurrence gentle, and lets the
    # classifier grow from zero
    branch = 0.25 if scheme == "fan-in" else 1.0
    for d in range(enc.depth):
        params.add(f"block{d}.ln1.gain", np.ones(c))
        params.add(f"block{d}.ln1.bias", np.zeros(c))
        for proj in ("wq", "wk", "wv"):
            gauss(f"block{d}.attn.{proj}", (c, c), c)
        gauss(f"block{d}.attn.wo", (c, c), c)
        wo = params[f"block{d}.attn.wo"]
        wo *= branch
        params.add(f"block{d}.ln2.gain", np.ones(c))
        params.add(f"block{d}.ln2.bias", np.zeros(c))
        gauss(f"block{d}.mlp.w1", (c, 2 * c), c)
        params.add(f"block{d}.mlp.b1", np.zeros(2 * c))
        gauss(f"block{d}.mlp.w2", (2 * c, c), 2 * c)
        w2 = params[f"block{d}.mlp.w2"]
        w2 *= branch
        params.add(f"block{d}.mlp.b2", np.zeros(c))
    if config.agents > 1:
        roi_dim = config.roi_size * config.roi_size * c
        gauss("roi.w", (roi_dim, c), roi_dim)
        params.add("roi.b", np.zeros(c))
    # near-identity start keeps the recurrence from washing out or
    # blowing up before the first updates land
    if scheme == "fan-in":
        ar_diag, ar_std = 0.2, 0.4 * std / np.sqrt(c)
    else:
        ar_diag, ar_std = 0.5, std
    ar = ar_diag * np.eye(c) + rng.child("param", "ar.w").normal((c, c),
                                                                 std=ar_std)
    params.add("ar.w", ar)
    params.add("ar.b", np.zeros(c))
    if scheme == "fan-in":
        params.add("head.w", np.zeros((c, config.n_classes)))
    else:
        gauss("head.w", (c, config.n_classes), c)
    params.add("head.b", np.zeros(config.n_classes))
    return params


def bind_params(g: Graph, params: ModelParams) -> dict:
    return {name: g.param(arr, name) for name, arr in params.items()}


def _bound_pool(nodes: dict) -> BoundPool:
    return BoundPool(experts=nodes["prompt.experts"],
                     gate_weight=nodes["prompt.gate_weight"],
                     gate_bias=nodes["prompt.gate_bias"])


# ----------------------------------------------------------- graph pieces


def _patch_embed(g: Graph, nodes: dict, config: ModelConfig,
                 frames: Node) -> Node:
    """(N, H, W, Cin) frames -> (N, S, C) tokens in row-major grid order."""
    n = frames.value.shape[0]
    p = config.encoder.patch_size
    gh, gw = config.grid_shape
    c = config.encoder.channels
    patch_dim = p * p * config.in_channels
    x = g.reshape(frames, (n, gh, p, gw, p, config.in_channels))
    x = g.transpose(x, (0, 1, 3, 2, 4, 5))
    x = g.reshape(x, (n * gh * gw, patch_dim))
    x = g.affine(x, nodes["embed.w"], nodes["embed.b"])
    x = g.reshape(x, (n, gh * gw, c))
    pos = g.reshape(nodes["embed.pos"], (1, gh * gw, c))
    return g.add(x, g.broadcast_to(pos, (n, gh * gw, c)))


def _attention_block(g: Graph, nodes: dict, config: ModelConfig, d: int,
                     x: Node) -> Node:
    n, s, c = x.value.shape
    h = config.encoder.heads
    dh = c // h

    def proj(t, name):
        flat = g.reshape(t, (n * s, c))
        out = g.matmul(flat, nodes[f"block{d}.attn.{name}"])
        return g.transpose(g.reshape(out, (n, s, h, dh)), (0, 2, 1, 3))

    normed = g.layer_norm(x, nodes[f"block{d}.ln1.gain"],
                          nodes[f"block{d}.ln1.bias"])
    q = proj(normed, "wq")
    k = proj(normed, "wk")
    v = proj(normed, "wv")
    scores = g.mul_const(g.matmul(q, g.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(dh))
    att = g.softmax(scores, axis=-1)
    mixed = g.transpose(g.matmul(att, v), (0, 2, 1, 3))
    mixed = g.matmul(g.reshape(mixed, (n * s, c)), nodes[f"block{d}.attn.wo"])
    x = g.add(x, g.reshape(mixed, (n, s, c)))

    normed = g.layer_norm(x, nodes[f"block{d}.ln2.gain"],
                          nodes[f"block{d}.ln2.bias"])
    flat = g.reshape(normed, (n * s, c))
    hidden = g.relu(g.affine(flat, nodes[f"block{d}.mlp.w1"],
                             nodes[f"block{d}.mlp.b1"]))
    out = g.affine(hidden, nodes[f"block{d}.mlp.w2"],
                   nodes[f"block{d}.mlp.b2"])
    return g.add(x, g.reshape(out, (n, s, c)))


def _encode(g: Graph, nodes: dict, config: ModelConfig, frames: Node) -> Node:
    """Frames (N, H, W, Cin) -> tokens (N, S', C); S' includes prompt
    tokens when the prompt mode concatenates."""
    tokens = _patch_embed(g, nodes, config, frames)
    mode = config.encoder.prompt_mode
    if mode != "none":
        tokens = condition(g, _bound_pool(nodes), tokens,
                           mode.removeprefix("scp-"))
    for d in range(config.encoder.depth):
        tokens = _attention_block(g, nodes, config, d, tokens)
    return tokens


def _clip_features(g: Graph, config: ModelConfig, per_frame: Node,
                   batch: int) -> Node:
    """(N, C) per-frame features -> (B, m, C) clip features."""
    c = per_frame.value.shape[-1]
    n = per_frame.value.shape[0]
    k = n // (batch * config.m_clips)
    x = g.reshape(per_frame, (batch, config.m_clips, k, c))
    return g.mean(x, axis=2)


def _ar_reason(g: Graph, nodes: dict, config: ModelConfig,
               clip_feats: Node) -> Node:
    """Fold (B, m, C) into the final recurrent state (B, C)."""
    m = clip_feats.value.shape[1]

    def cell(z):
        out = g.affine(z, nodes["ar.w"], nodes["ar.b"])
        return g.tanh(out) if config.ar_nonlinearity == "tanh" else out

    state = cell(g.select(clip_feats, axis=1, index=0))
    for i in range(1, m):
        state = cell(g.add(state, g.select(clip_feats, axis=1, index=i)))
    return state


def _classify(g: Graph, nodes: dict, state: Node) -> Node:
    return g.affine(state, nodes["head.w"], nodes["head.b"])


def _roi_project(g: Graph, nodes: dict, config: ModelConfig, tokens: Node,
                 boxes: np.ndarray) -> Node:
    """Grid tokens (N, S', C) + per-frame boxes (N, 4) -> (N, C)."""
    n = tokens.value.shape[0]
    c = config.encoder.channels
    gh, gw = config.grid_shape
    grid_only = tokens
    if tokens.value.shape[1] != config.grid_tokens:
        grid_only = g.slice_axis(tokens, axis=1, start=0,
                                 stop=config.grid_tokens)
    grid = g.reshape(grid_only, (n, gh, gw, c))
    crops = g.roi_align(grid, boxes, out_size=config.roi_size)
    flat = g.reshape(crops, (n, config.roi_size * config.roi_size * c))
    return g.affine(flat, nodes["roi.w"], nodes["roi.b"])


# ------------------------------------------------------------ entry points


@dataclass
class ForwardBatch:
    graph: Graph
    nodes: dict
    logits: Node
    loss: Node | None


def forward_batch(params: ModelParams, config: ModelConfig,
                  videos: np.ndarray, labels: np.ndarray | None = None,
                  boxes: np.ndarray | None = None) -> ForwardBatch:
    """Build the full differentiable graph for one batch.

    videos: (B, T, H, W, Cin) with T divisible by m_clips. Single-agent
    mode classifies the pooled token stream; labels are (B,) class ids.
    Multi-agent mode (config.agents > 1) needs boxes (B, T, A, 4) and
    labels (B, A); logits come back (B, A, n_classes) under a one-hot
    binary cross-entropy.
    """
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim != 5:
        raise ShapeError(f"videos must be (B, T, H, W, C); got {videos.shape}")
    b, t = videos.shape[:2]
    if videos.shape[2:] != (config.height, config.width, config.in_channels):
        raise ShapeError(
            f"frames {videos.shape[2:]} do not match configured "
            f"{(config.height, config.width, config.in_channels)}")
    if t % config.m_clips:
        raise ShapeError(
            f"{t} frames not divisible into {config.m_clips} clips")
    n = b * t

    g = Graph()
    nodes = bind_params(g, params)
    frames = g.reshape(g.input(videos, "videos"),
                       (n, config.height, config.width, config.in_channels))
    tokens = _encode(g, nodes, config, frames)

    if config.agents == 1:
        per_frame = g.mean(tokens, axis=1)
        state = _ar_reason(g, nodes, config,
                           _clip_features(g, config, per_frame, b))
        logits = _classify(g, nodes, state)
        loss = None
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (b,):
                raise ShapeError(
                    f"labels {labels.shape} do not match batch {b}")
            loss = cross_entropy(g, logits, labels)
        return ForwardBatch(g, nodes, logits, loss)

    if boxes is None:
        raise ShapeError("multi-agent forward needs per-agent boxes")
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.shape != (b, t, config.agents, 4):
        raise ShapeError(
            f"boxes {boxes.shape} do not match (B, T, agents, 4) = "
            f"{(b, t, config.agents, 4)}")
    per_agent_logits = []
    for a in range(config.agents):
        feat = _roi_project(g, nodes, config, tokens,
                            boxes[:, :, a].reshape(n, 4))
        state = _ar_reason(g, nodes, config,
                           _clip_features(g, config, feat, b))
        logits_a = _classify(g, nodes, state)
        per_agent_logits.append(
            g.reshape(logits_a, (b, 1, config.n_classes)))
    logits = g.concat(per_agent_logits, axis=1)
    loss = None
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (b, config.agents):
            raise ShapeError(
                f"labels {labels.shape} do not match (B, agents) = "
                f"{(b, config.agents)}")
        loss = bce_with_logits(g, logits,
                               one_hot(labels, config.n_classes))
    return ForwardBatch(g, nodes, logits, loss)


# ----------------------------------------------- single-item convenience


def encode_frame(params: ModelParams, config: ModelConfig,
                 frame: np.ndarray) -> np.ndarray:
    """Token matrix (S', C) for one (H, W, Cin) frame."""
    if frame.shape != (config.height, config.width, config.in_channels):
        raise ShapeError(
            f"frame {frame.shape} does not match configured "
            f"{(config.height, config.width, config.in_channels)}")
    g = Graph()
    nodes = bind_params(g, params)
    tokens = _encode(g, nodes, config, g.input(frame[None], "frame"))
    return tokens.value[0]


def roi_align_features(grid: np.ndarray, box, out_size: int = 5) -> np.ndarray:
    """Bilinear (out, out, C) crop of one (Hg, Wg, C) feature grid."""
    g = Graph()
    node = g.roi_align(g.input(grid[None], "grid"),
                       np.asarray(box, dtype=np.float64)[None],
                       out_size=out_size)
    return node.value[0]


def ar_reason(params: ModelParams, config: ModelConfig,
              sequence) -> np.ndarray:
    """Final recurrent state for a list of per-clip feature vectors."""
    seq = [np.asarray(x, dtype=np.float64) for x in sequence]
    if not seq:
        raise ShapeError("ar_reason needs at least one step")
    g = Graph()
    nodes = bind_params(g, params)
    stacked = g.input(np.stack(seq)[None], "sequence")   # (1, m, C)
    return _ar_reason(g, nodes, config, stacked).value[0]


def classify(params: ModelParams, state: np.ndarray) -> np.ndarray:
    """Logits for one (C,) state vector."""
    g = Graph()
    nodes = bind_params(g, params)
    return _classify(g, nodes, g.input(state[None], "state")).value[0]
