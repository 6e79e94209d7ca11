"""Optimizer, LR schedules, train/eval loops, checkpoints, ablation.

Everything here is deterministic given the run seed: batch order comes
from keyed child streams, parameters update in a fixed enumeration
order, and written artifacts carry no timestamps, so re-running a
config reproduces every file byte for byte.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import GenSpec, load_set
from .errors import ConfigError, DataFormatError, NonFiniteError, ScpromptError
from .model import (INIT_SCHEMES, EncoderConfig, ModelConfig, ModelParams,
                    forward_batch, init_params)
from .rng import RngStream
from .scpt import checksum_bytes, tensor_from_bytes, tensor_to_bytes
from .visual import ClipPartition, flow_prompt_video, mask_prompt_video, \
    provide_masks

PROMPT_CHOICES = ("none", "flow", "mask", "scp-concat", "scp-add", "scp-mul")
SCHEDULE_KINDS = ("cosine", "poly")
CHECKPOINT_FORMAT = "scpt-checkpoint"
CHECKPOINT_VERSION = 1


# -------------------------------------------------------------- schedules


@dataclass
class Schedule:
    kind: str = "cosine"
    base_lr: float = 0.025
    total_steps: int = 1
    power: float = 0.9

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(
                f"schedule kind '{self.kind}' not one of {SCHEDULE_KINDS}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive; got {self.base_lr}")
        if self.total_steps < 1:
            raise ConfigError(
                f"total_steps must be >= 1; got {self.total_steps}")
        if self.power <= 0:
            raise ConfigError(f"poly power must be positive; got {self.power}")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate for a 0-based step index.

    Valid for step < total_steps only; both curves hit zero at the
    closed right endpoint, which a real run never evaluates.
    """
    if not 0 <= step < schedule.total_steps:
        raise ConfigError(
            f"step {step} outside [0, {schedule.total_steps})")
    frac = step / schedule.total_steps
    if schedule.kind == "cosine":
        return schedule.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
    return schedule.base_lr * (1.0 - frac) ** schedule.power


# --------------------------------------------------------------- optimizer


class OptState:
    """Momentum buffers plus step bookkeeping for classical SGD."""

    def __init__(self, params: ModelParams, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(arr)
                         for name, arr in params.items()}
        self.step_count = 0


def sgd_step(params: ModelParams, grads: dict, opt: OptState, lr: float):
    """v <- momentum*v + (grad + wd*theta); theta <- theta - lr*v.

    Updates arrays in place so graphs bound to them see new values.
    All gradients are validated before any parameter moves, so a bad
    batch cannot leave the model half-stepped.
    """
    for name, theta in params.items():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(
                f"non-finite gradient at step {opt.step_count} in '{name}': "
                f"parameter norm {float(np.linalg.norm(theta)):.6e}, "
                f"{int(np.sum(~np.isfinite(g)))} bad entries")
    for name, theta in params.items():
        g = grads.get(name)
        v = opt.velocity[name]
        v *= opt.momentum
        if g is not None:
            v += g
        v += opt.weight_decay * theta
        theta -= lr * v
    opt.step_count += 1


# ------------------------------------------------------------- run config


_SCHEDULE_KEYS = {"kind": "cosine", "base_lr": 0.025, "power": 0.9}
_ENCODER_KEYS = ("patch_size", "channels", "depth", "heads")


@dataclass
class TrainRunConfig:
    data_dir: str
    out_dir: str
    prompt_mode: str = "none"
    experts: int = 8
    epochs: int = 150
    batch_size: int = 16
    m_clips: int = 4
    seed: int = 0
    init_std: float = 1.0
    init_scheme: str = "fan-in"
    momentum: float = 0.9
    weight_decay: float = 0.0
    ar_nonlinearity: str = "tanh"
    roi_size: int = 5
    flow_block_size: int = 4
    flow_radius: int = 2
    encoder: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_CHOICES:
            raise ConfigError(
                f"prompt_mode '{self.prompt_mode}' not one of "
                f"{PROMPT_CHOICES}")
        if self.epochs < 0 or self.batch_size < 1 or self.m_clips < 1:
            raise ConfigError(
                "epochs must be >= 0; batch_size and m_clips >= 1")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(
                f"init_scheme '{self.init_scheme}' not one of "
                f"{INIT_SCHEMES}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1); got "
                              f"{self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        unknown = set(self.encoder) - set(_ENCODER_KEYS)
        if "prompt_mode" in self.encoder:
            raise ConfigError(
                "set prompt_mode at the top level of the run config, not "
                "inside encoder")
        if unknown:
            raise ConfigError(
                f"unknown encoder keys {sorted(unknown)}; known keys are "
                f"{sorted(_ENCODER_KEYS)}")
        unknown = set(self.schedule) - set(_SCHEDULE_KEYS)
        if unknown:
            raise ConfigError(
                f"unknown schedule keys {sorted(unknown)}; known keys are "
                f"{sorted(_SCHEDULE_KEYS)}")
        self.encoder = dict(self.encoder)
        self.schedule = {**_SCHEDULE_KEYS, **self.schedule}
        # constructing these validates kinds, positivity, divisibility
        Schedule(total_steps=1, **self.schedule)
        EncoderConfig(**self.encoder)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainRunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(
                f"unknown run config keys {sorted(unknown)}; known keys are "
                f"{sorted(known)}")
        for key in ("data_dir", "out_dir"):
            if key not in data:
                raise ConfigError(f"run config is missing required '{key}'")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def build_model_config(config: TrainRunConfig, spec: GenSpec) -> ModelConfig:
    mode = config.prompt_mode
    enc = EncoderConfig(
        prompt_mode=mode if mode.startswith("scp-") else "none",
        **config.encoder)
    return ModelConfig(height=spec.height, width=spec.width,
                       n_classes=len(spec.classes), m_clips=config.m_clips,
                       experts=config.experts, agents=spec.agents,
                       roi_size=config.roi_size,
                       ar_nonlinearity=config.ar_nonlinearity, encoder=enc)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, params: ModelParams, model_config: ModelConfig):
    """One file: little-endian u64 index length, JSON index, then the
    parameter tensors as concatenated SCPT records in registry order."""
    index = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
             "model": model_config.to_dict(), "tensors": []}
    blobs = []
    for name, arr in params.items():
        blob = tensor_to_bytes(arr)
        index["tensors"].append({"name": name, "shape": list(arr.shape),
                                 "dtype": str(arr.dtype),
                                 "bytes": len(blob),
                                 "checksum": checksum_bytes(blob)})
        blobs.append(blob)
    head = json.dumps(index, sort_keys=True, indent=2).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 8:
        raise DataFormatError(f"checkpoint {path} is truncated")
    head_len = struct.unpack("<Q", data[:8])[0]
    if len(data) < 8 + head_len:
        raise DataFormatError(f"checkpoint {path} index is truncated")
    try:
        index = json.loads(data[8:8 + head_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"checkpoint {path} index unreadable: {exc}")
    if index.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path} is not a checkpoint file")
    if index.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"checkpoint {path} has unsupported version {index.get('version')}")
    params = ModelParams()
    offset = 8 + head_len
    for entry in index["tensors"]:
        blob = data[offset:offset + entry["bytes"]]
        if len(blob) != entry["bytes"]:
            raise DataFormatError(
                f"checkpoint {path} tensor '{entry['name']}' is truncated")
        if checksum_bytes(blob) != entry["checksum"]:
            raise DataFormatError(
                f"checkpoint {path} tensor '{entry['name']}' failed its "
                f"checksum")
        arr = tensor_from_bytes(blob)
        if list(arr.shape) != entry["shape"]:
            raise DataFormatError(
                f"checkpoint {path} tensor '{entry['name']}' shape "
                f"{arr.shape} does not match index {entry['shape']}")
        params.add(entry["name"], arr)
        offset += entry["bytes"]
    if offset != len(data):
        raise DataFormatError(
            f"checkpoint {path} has {len(data) - offset} trailing bytes")
    return params, ModelConfig.from_dict(index["model"])


# ------------------------------------------------------- input preparation


@dataclass
class PreparedSplit:
    videos: np.ndarray             # (N, T, H, W, 3), prompt-fused
    labels: np.ndarray             # (N,) single-agent or (N, A)
    boxes: np.ndarray | None       # (N, T, A, 4) when agents > 1


def prepare_split(clips, config: TrainRunConfig, agents: int) -> PreparedSplit:
    """Pack clips into batchable arrays, applying any pixel-level
    (non-learnable) prompt once up front."""
    if not clips:
        raise DataFormatError("split has no clips to prepare")
    t = clips[0].frames.shape[0]
    partition = ClipPartition.of(t, config.m_clips)
    videos = []
    for clip in clips:
        frames = clip.frames
        if config.prompt_mode == "flow":
            frames, _ = flow_prompt_video(frames, partition,
                                          config.flow_block_size,
                                          config.flow_radius)
        elif config.prompt_mode == "mask":
            frames = mask_prompt_video(frames, provide_masks(clip, "oracle"))
        videos.append(frames)
    videos = np.stack(videos)
    if agents == 1:
        labels = np.array([c.label for c in clips], dtype=np.int64)
        boxes = None
    else:
        labels = np.stack([c.labels for c in clips])
        boxes = np.stack([c.boxes for c in clips])
    return PreparedSplit(videos, labels, boxes)


# -------------------------------------------------------------- evaluation


def evaluate(params: ModelParams, model_cfg: ModelConfig,
             split: PreparedSplit, batch_size: int = 16) -> dict:
    """Loss plus ranking metrics over one prepared split.

    Single-agent: top-1 / top-5 with stable tie-break (equal logits
    rank lower class index first). Multi-agent: per-(clip, agent)
    argmax accuracy plus mean per-class accuracy over seen classes.
    """
    n = split.videos.shape[0]
    total_loss = 0.0
    logit_parts = []
    for i in range(0, n, batch_size):
        sl = slice(i, min(i + batch_size, n))
        out = forward_batch(params, model_cfg, split.videos[sl],
                            labels=split.labels[sl],
                            boxes=None if split.boxes is None
                            else split.boxes[sl])
        total_loss += float(out.loss.value) * (sl.stop - sl.start)
        logit_parts.append(out.logits.value)
    logits = np.concatenate(logit_parts)
    metrics = {"loss": total_loss / n}
    if split.boxes is None:
        ranks = np.argsort(-logits, axis=1, kind="stable")
        k = min(5, logits.shape[1])
        metrics["top1"] = float(np.mean(ranks[:, 0] == split.labels))
        metrics["top5"] = float(np.mean(
            np.any(ranks[:, :k] == split.labels[:, None], axis=1)))
    else:
        pred = np.argmax(logits, axis=2)
        metrics["label_acc"] = float(np.mean(pred == split.labels))
        per_class = []
        for c in range(logits.shape[2]):
            hits = split.labels == c
            if np.any(hits):
                per_class.append(float(np.mean(pred[hits] == c)))
        metrics["mean_class_acc"] = float(np.mean(per_class))
    return metrics


def metric_fields(agents: int) -> list:
    if agents == 1:
        return ["loss", "top1", "top5"]
    return ["loss", "label_acc", "mean_class_acc"]


# ---------------------------------------------------------------- training


def train(config: TrainRunConfig, progress=None) -> dict:
    """Full run: prepare, loop, checkpoint per epoch, write the report.

    Returns the report dict, including measured wall_time_s. Files in
    out_dir: checkpoint_{epoch}.ckpt (including the initial state as
    epoch 0), report.json, history.csv, curves.png. Everything written
    is byte-deterministic for a given config and seed, so wall time is
    returned but never serialized. progress, when given, is called with
    each completed epoch's metrics row.
    """
    from . import report as report_mod

    started = time.perf_counter()
    ds = load_set(config.data_dir)
    model_cfg = build_model_config(config, ds.spec)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = RngStream(config.seed)
    params = init_params(model_cfg, rng.child("init"), std=config.init_std,
                         scheme=config.init_scheme)
    train_split = prepare_split(ds.split("train"), config, ds.spec.agents)
    val_split = prepare_split(ds.split("val"), config, ds.spec.agents)

    n_train = train_split.videos.shape[0]
    steps_per_epoch = -(-n_train // config.batch_size)
    schedule = Schedule(total_steps=max(1, config.epochs * steps_per_epoch),
                        **config.schedule)
    opt = OptState(params, momentum=config.momentum,
                   weight_decay=config.weight_decay)

    rows = [{"epoch": 0, "train_loss": None,
             **evaluate(params, model_cfg, val_split, config.batch_size)}]
    save_checkpoint(out_dir / "checkpoint_000.ckpt", params, model_cfg)
    if progress is not None:
        progress(rows[0])

    for epoch in range(1, config.epochs + 1):
        order = rng.child("order", epoch).permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = forward_batch(
                params, model_cfg, train_split.videos[idx],
                labels=train_split.labels[idx],
                boxes=None if train_split.boxes is None
                else train_split.boxes[idx])
            loss_value = float(out.loss.value)
            if not np.isfinite(loss_value):
                raise NonFiniteError(
                    f"non-finite training loss at step {opt.step_count} "
                    f"(epoch {epoch}); last finished epoch's checkpoint is "
                    f"retained in {out_dir}")
            out.graph.backward(out.loss)
            grads = {name: node.grad for name, node in out.nodes.items()
                     if node.grad is not None}
            lr = lr_at(schedule, opt.step_count)
            sgd_step(params, grads, opt, lr)
            epoch_loss += loss_value * len(idx)
        rows.append({"epoch": epoch, "train_loss": epoch_loss / n_train,
                     **evaluate(params, model_cfg, val_split,
                                config.batch_size)})
        save_checkpoint(out_dir / f"checkpoint_{epoch:03d}.ckpt", params,
                        model_cfg)
        if progress is not None:
            progress(rows[-1])

    report = {
        "run": config.to_dict(),
        "model": model_cfg.to_dict(),
        "dataset": {"classes": list(ds.spec.classes),
                    "n_train": n_train,
                    "n_val": val_split.videos.shape[0],
                    "agents": ds.spec.agents},
        "rows": rows,
        "final": rows[-1],
    }
    fields = ["epoch", "train_loss"] + metric_fields(ds.spec.agents)
    report_mod.write_report_json(out_dir / "report.json", report)
    report_mod.write_history_csv(out_dir / "history.csv", rows, fields)
    report_mod.render_history_png(out_dir / "curves.png", rows,
                                  metric_fields(ds.spec.agents)[1:])
    # measured after the artifacts are on disk so reruns stay identical
    report["wall_time_s"] = time.perf_counter() - started
    return report


# ---------------------------------------------------------------- ablation


def ablate_experts(config: TrainRunConfig, l_values) -> list:
    """One training run per expert count; a failing row records its
    error and the remaining rows still run."""
    if not config.prompt_mode.startswith("scp-"):
        raise ConfigError(
            f"expert ablation needs an scp prompt mode; got "
            f"'{config.prompt_mode}'")
    rows = []
    for l in l_values:
        sub = replace(config, experts=int(l),
                      out_dir=str(Path(config.out_dir) / f"l{int(l)}"))
        try:
            report = train(sub)
            final = report["final"]
            accuracy = final.get("top1", final.get("label_acc"))
            rows.append({"l": int(l), "accuracy": accuracy, "error": ""})
        except ScpromptError as exc:
            rows.append({"l": int(l), "accuracy": None, "error": str(exc)})
    return rows
