"""Synthetic moving-sprites videos with ground-truth boxes and masks.

Classes are motion patterns of a textured square on a static
background. Appearance is drawn identically for every class, so nothing
but the motion separates them; a model must reason over time to do
better than chance. The renderer emits exact per-frame occupancy masks
and bounding boxes, which double as the mask-prompt oracle and the ROI
ground truth.

Determinism: every clip derives its own random stream from the spec
seed, the split name, and the clip index, so generation order and
parallelism cannot change the data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, GenerationError
from .rng import RngStream
from .scpt import read_tensor, write_tensor

CLASS_VOCABULARY = ("move-left", "move-right", "move-up", "move-down",
                    "circle-cw", "circle-ccw", "expand", "still")

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

_PLACEMENT_ATTEMPTS = 200


def _half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class GenSpec:
    """Everything that determines a generated dataset."""

    n_train: int = 200
    n_val: int = 100
    frames: int = 8
    height: int = 32
    width: int = 32
    classes: tuple = CLASS_VOCABULARY
    agents: int = 1
    background: str = "noise"      # flat | noise
    noise_sigma: float = 0.05
    sprite_size: int = 12
    contrast: float = 0.5
    speed: int = 2
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = [c for c in self.classes if c not in CLASS_VOCABULARY]
        if unknown:
            raise ConfigError(
                f"unknown classes {unknown}; vocabulary is {CLASS_VOCABULARY}")
        if not self.classes:
            raise ConfigError("class list is empty")
        if self.background not in ("flat", "noise"):
            raise ConfigError(
                f"background must be flat or noise; got '{self.background}'")
        for name in ("n_train", "n_val"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("frames", "height", "width", "agents", "sprite_size",
                     "speed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(
                f"unknown generator spec keys {sorted(unknown)}; "
                f"known keys are {sorted(known)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d


@dataclass
class Clip:
    """One generated video plus its ground truth."""

    clip_id: int
    split: str                      # train | val
    frames: np.ndarray              # (T, H, W, 3) float64 in [0, 1]
    labels: np.ndarray              # (A,) int64, per-agent class index
    boxes: np.ndarray               # (T, A, 4) normalized x0, y0, x1, y1
    masks: np.ndarray               # (T, H, W) uint8 occupancy

    @property
    def label(self) -> int:
        return int(self.labels[0])


@dataclass
class VideoClipSet:
    spec: GenSpec
    clips: list = field(default_factory=list)

    @property
    def classes(self) -> tuple:
        return self.spec.classes

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.split == name]


def _motion_path(cls_name: str, spec: GenSpec):
    """Per-frame top-left offsets (relative to the start) and sizes.

    All offsets are integers: sprites translate rigidly between frames,
    which keeps them trackable by integer block matching. The expand
    class grows by revealing more of a fixed texture (anchor drifts to
    keep the growth roughly centered); rescaling the texture instead
    would decorrelate consecutive frames.
    """
    t_idx = np.arange(spec.frames)
    s0 = spec.sprite_size
    sizes = np.full(spec.frames, s0, dtype=np.int64)
    off_x = np.zeros(spec.frames, dtype=np.int64)
    off_y = np.zeros(spec.frames, dtype=np.int64)
    if cls_name == "move-left":
        off_x = -spec.speed * t_idx
    elif cls_name == "move-right":
        off_x = spec.speed * t_idx
    elif cls_name == "move-up":
        off_y = -spec.speed * t_idx
    elif cls_name == "move-down":
        off_y = spec.speed * t_idx
    elif cls_name in ("circle-cw", "circle-ccw"):
        radius = spec.height / 6.0
        direction = 1.0 if cls_name == "circle-cw" else -1.0
        phi = 2.0 * np.pi * t_idx / spec.frames
        off_x = np.array([_half_up(radius * np.sin(direction * p))
                          for p in phi], dtype=np.int64)
        off_y = np.array([_half_up(radius * (1.0 - np.cos(p)))
                          for p in phi], dtype=np.int64)
    elif cls_name == "expand":
        denom = max(spec.frames - 1, 1)
        sizes = np.array([_half_up(s0 * (1.0 + 0.5 * t / denom))
                          for t in t_idx], dtype=np.int64)
        off_x = -((sizes - s0) // 2)
        off_y = off_x.copy()
    elif cls_name != "still":
        raise ConfigError(f"unknown motion class '{cls_name}'")
    return off_x, off_y, sizes


def _placement_range(off, sizes, limit):
    """Valid start coordinates keeping the whole path 1 px inside."""
    lo = 1 - int(off.min())
    hi = limit - 1 - int((off + sizes).max())
    return lo, hi


def _path_bbox(x0, y0, off_x, off_y, sizes):
    return (x0 + int(off_x.min()), y0 + int(off_y.min()),
            x0 + int((off_x + sizes).max()), y0 + int((off_y + sizes).max()))


def _disjoint(a, b):
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def generate(spec: GenSpec) -> VideoClipSet:
    """Render the full dataset described by a spec."""
    root = RngStream(spec.seed).child("sprites")
    clips = []
    clip_id = 0
    for split, count in (("train", spec.n_train), ("val", spec.n_val)):
        # one label permutation per agent slot keeps each slot's class
        # counts balanced to within one clip
        split_rng = root.child("labels", split)
        slot_perm = [split_rng.permutation(len(spec.classes))
                     for _ in range(spec.agents)]
        for idx in range(count):
            rng = root.child(split, idx)
            labels = np.array(
                [slot_perm[a][idx % len(spec.classes)]
                 for a in range(spec.agents)], dtype=np.int64)
            clips.append(_render_clip(spec, rng, clip_id, split, labels))
            clip_id += 1
    return VideoClipSet(spec=spec, clips=clips)


def _render_clip(spec: GenSpec, rng: RngStream, clip_id: int, split: str,
                 labels: np.ndarray) -> Clip:
    h, w, t = spec.height, spec.width, spec.frames
    if spec.background == "flat":
        background = np.full((h, w, 3), 0.5)
    else:
        background = np.clip(
            0.5 + spec.noise_sigma * rng.normal((h, w, 3)), 0.0, 1.0)

    agents = []
    taken = []
    for a in range(spec.agents):
        cls_name = spec.classes[labels[a]]
        off_x, off_y, sizes = _motion_path(cls_name, spec)
        base = rng.uniform((1, 1, 3), 0.3, 0.9)
        smax = int(sizes.max())
        texture = np.clip(
            base + spec.contrast * rng.uniform((smax, smax, 3), -0.5, 0.5),
            0.0, 1.0)
        x_lo, x_hi = _placement_range(off_x, sizes, w)
        y_lo, y_hi = _placement_range(off_y, sizes, h)
        if x_lo > x_hi or y_lo > y_hi:
            raise GenerationError(
                f"class '{cls_name}' cannot stay inside a {h}x{w} frame "
                f"(sprite {spec.sprite_size}, speed {spec.speed})")
        for attempt in range(_PLACEMENT_ATTEMPTS):
            x0 = int(rng.integers(x_lo, x_hi + 1))
            y0 = int(rng.integers(y_lo, y_hi + 1))
            bbox = _path_bbox(x0, y0, off_x, off_y, sizes)
            if all(_disjoint(bbox, other) for other in taken):
                break
        else:
            raise GenerationError(
                f"could not place {spec.agents} non-overlapping sprite "
                f"paths in a {h}x{w} frame (clip {clip_id})")
        taken.append(bbox)
        agents.append((x0, y0, off_x, off_y, sizes, texture))

    frames = np.empty((t, h, w, 3))
    masks = np.zeros((t, h, w), dtype=np.uint8)
    boxes = np.empty((t, spec.agents, 4))
    for ti in range(t):
        frame = background.copy()
        for a, (x0, y0, off_x, off_y, sizes, texture) in enumerate(agents):
            x = x0 + int(off_x[ti])
            y = y0 + int(off_y[ti])
            s = int(sizes[ti])
            frame[y:y + s, x:x + s] = texture[:s, :s]
            masks[ti, y:y + s, x:x + s] = 1
            boxes[ti, a] = (x / w, y / h, (x + s) / w, (y + s) / h)
        frames[ti] = frame
    return Clip(clip_id=clip_id, split=split, frames=frames, labels=labels,
                boxes=boxes, masks=masks)


# ------------------------------------------------------------- persistence


def save_set(clip_set: VideoClipSet, out_dir) -> Path:
    """Write manifest plus one SCPT file per tensor; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clip_set.clips:
        stem = f"{clip.clip_id:04d}"
        files = {
            "frames": (f"clip_{stem}.scpt", clip.frames),
            "masks": (f"masks_{stem}.scpt", clip.masks),
            "boxes": (f"boxes_{stem}.scpt", clip.boxes),
        }
        entry = {"id": clip.clip_id, "split": clip.split,
                 "labels": [int(x) for x in clip.labels]}
        for kind, (name, arr) in files.items():
            entry[kind] = name
            entry[f"{kind}_checksum"] = write_tensor(out / name, arr)
        entries.append(entry)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "spec": clip_set.spec.to_dict(),
        "classes": list(clip_set.spec.classes),
        "clips": entries,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_set(data_dir) -> VideoClipSet:
    data = Path(data_dir)
    manifest_path = data / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataFormatError(f"{manifest_path}: missing manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise DataFormatError(f"{manifest_path}: not valid JSON ({err})")
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise DataFormatError(
            f"{manifest_path}: manifest version {version} not supported "
            f"(expected {MANIFEST_VERSION})")
    spec = GenSpec.from_dict(manifest["spec"])
    clips = []
    for entry in manifest["clips"]:
        tensors = {}
        for kind in ("frames", "masks", "boxes"):
            tensors[kind] = read_tensor(
                data / entry[kind],
                expected_checksum=entry[f"{kind}_checksum"])
        labels = np.asarray(entry["labels"], dtype=np.int64)
        if labels.size and (labels.min() < 0
                            or labels.max() >= len(spec.classes)):
            raise DataFormatError(
                f"{manifest_path}: clip {entry['id']} label outside the "
                f"{len(spec.classes)}-class vocabulary")
        clips.append(Clip(clip_id=int(entry["id"]), split=entry["split"],
                          frames=tensors["frames"], labels=labels,
                          boxes=tensors["boxes"],
                          masks=tensors["masks"].astype(np.uint8)))
    return VideoClipSet(spec=spec, clips=clips)
