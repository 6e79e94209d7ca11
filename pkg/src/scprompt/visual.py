"""Non-learnable visual prompts: optical flow and segmentation masks.

Flow prompts: integer block-matching between the representative frames
of consecutive clips. Each block's displacement becomes a magnitude,
the per-block magnitudes are upsampled to pixel resolution, normalized
by the clip's maximum, and multiplied into every frame of the clip, so
moving regions keep their intensity and static regions fade.

Mask prompts: binary occupancy maps multiplied into frames. Masks come
from the synthetic generator's ground truth ("oracle") or from SCPT
files on disk; no segmentation model runs here.

Everything in this module is a pure function of its inputs; nothing is
learnable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .scpt import read_tensor

PASS_THROUGH_EPS = 1e-9


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """(H, W, C) to (H, W); RGB uses the 0.299/0.587/0.114 weighting."""
    if frame.ndim != 3:
        raise ShapeError(f"frame must be (H, W, C); got {frame.shape}")
    if frame.shape[2] == 1:
        return frame[:, :, 0].astype(np.float64)
    if frame.shape[2] == 3:
        f = frame.astype(np.float64)
        return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]
    raise ShapeError(
        f"grayscale conversion wants 1 or 3 channels; got {frame.shape[2]}")


@dataclass
class FlowField:
    """Per-block integer displacements from one frame to another."""

    dx: np.ndarray                 # (Hb, Wb), pixels
    dy: np.ndarray
    block_size: int
    search_radius: int
    degenerate: bool = False       # set when a constant frame forced zero flow

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.dx * self.dx + self.dy * self.dy)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray,
                  block_size: int, search_radius: int) -> FlowField:
    """Exhaustive SAD block matching with deterministic tie-breaks.

    For each block of frame_a, tries every integer displacement within
    the search radius whose shifted block stays inside frame_b, and
    keeps the one with the smallest grayscale sum of absolute
    differences. Ties prefer the smaller displacement magnitude, then
    the earlier candidate in row-major scan order over (dy, dx).
    """
    if frame_a.shape != frame_b.shape:
        raise ShapeError(
            f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if search_radius < 1:
        raise ConfigError(f"search_radius must be >= 1; got {search_radius}")
    ga = to_grayscale(frame_a)
    gb = to_grayscale(frame_b)
    h, w = ga.shape
    if h % block_size or w % block_size:
        raise ShapeError(
            f"block_size {block_size} does not divide frame dims {h}x{w}")
    hb, wb = h // block_size, w // block_size
    zero = np.zeros((hb, wb))
    if np.ptp(ga) == 0.0 or np.ptp(gb) == 0.0:
        return FlowField(zero, zero.copy(), block_size, search_radius,
                         degenerate=True)

    best_sad = np.full((hb, wb), np.inf)
    best_mag2 = np.full((hb, wb), np.inf)
    best_dy = np.zeros((hb, wb))
    best_dx = np.zeros((hb, wb))
    bs = block_size
    for dy in range(-search_radius, search_radius + 1):
        # block rows whose shifted copy stays inside the frame
        bi = np.arange(hb)
        rok = (bi * bs + dy >= 0) & (bi * bs + bs + dy <= h)
        if not rok.any():
            continue
        r0, r1 = bi[rok][0], bi[rok][-1] + 1
        for dx in range(-search_radius, search_radius + 1):
            bj = np.arange(wb)
            cok = (bj * bs + dx >= 0) & (bj * bs + bs + dx <= w)
            if not cok.any():
                continue
            c0, c1 = bj[cok][0], bj[cok][-1] + 1
            a = ga[r0 * bs:r1 * bs, c0 * bs:c1 * bs]
            b = gb[r0 * bs + dy:r1 * bs + dy, c0 * bs + dx:c1 * bs + dx]
            diff = np.abs(a - b)
            sad = diff.reshape(r1 - r0, bs, c1 - c0, bs).sum(axis=(1, 3))
            mag2 = float(dy * dy + dx * dx)
            sub = (slice(r0, r1), slice(c0, c1))
            better = (sad < best_sad[sub]) | (
                (sad == best_sad[sub]) & (mag2 < best_mag2[sub]))
            best_sad[sub] = np.where(better, sad, best_sad[sub])
            best_mag2[sub] = np.where(better, mag2, best_mag2[sub])
            best_dy[sub] = np.where(better, float(dy), best_dy[sub])
            best_dx[sub] = np.where(better, float(dx), best_dx[sub])
    return FlowField(best_dx, best_dy, block_size, search_radius)


def flow_prompt_map(flow: FlowField, height: int, width: int) -> np.ndarray:
    """Pixel-resolution emphasis map in [0, 1] from a block flow field.

    Nearest-neighbor upsampling of the per-block magnitude, normalized
    by the clip's maximum; an (almost) still clip yields all ones so
    prompting degrades to a no-op instead of blacking out the clip.
    """
    hb, wb = flow.dx.shape
    if hb * flow.block_size != height or wb * flow.block_size != width:
        raise ShapeError(
            f"flow grid {hb}x{wb} (block {flow.block_size}) does not cover "
            f"{height}x{width} frames")
    mag = flow.magnitude()
    peak = mag.max()
    if peak < PASS_THROUGH_EPS:
        return np.ones((height, width))
    mag = mag / peak
    return np.repeat(np.repeat(mag, flow.block_size, axis=0),
                     flow.block_size, axis=1)


def flow_prompt_clip(clip_frames, flow: FlowField) -> list[np.ndarray]:
    """Multiply every frame of a clip by the flow emphasis map."""
    frames = list(clip_frames)
    if not frames:
        raise ShapeError("empty clip")
    h, w = frames[0].shape[0], frames[0].shape[1]
    emph = flow_prompt_map(flow, h, w)
    return [f * emph[:, :, None] for f in frames]


@dataclass(frozen=True)
class ClipPartition:
    """How a T-frame video splits into m clips of k frames each."""

    m: int
    frames_per_clip: int
    representative: int = 0

    def __post_init__(self):
        if self.m < 1 or self.frames_per_clip < 1:
            raise ConfigError(
                f"partition needs m >= 1 and k >= 1; got m={self.m}, "
                f"k={self.frames_per_clip}")
        if not (0 <= self.representative < self.frames_per_clip):
            raise ConfigError(
                f"representative frame {self.representative} outside clip "
                f"of {self.frames_per_clip} frames")

    @classmethod
    def of(cls, total_frames: int, m: int, representative: int = 0):
        if m < 1 or total_frames % m:
            raise ConfigError(
                f"cannot split {total_frames} frames into {m} equal clips")
        return cls(m, total_frames // m, representative)

    def clip(self, video: np.ndarray, i: int) -> np.ndarray:
        k = self.frames_per_clip
        return video[i * k:(i + 1) * k]

    def representative_frame(self, video: np.ndarray, i: int) -> np.ndarray:
        return video[i * self.frames_per_clip + self.representative]


def flow_prompt_video(video: np.ndarray, partition: ClipPartition,
                      block_size: int, search_radius: int):
    """Apply clip-wise flow prompting to a whole (T, H, W, C) video.

    Clip i's flow compares its representative frame with clip i+1's;
    the last clip reuses the previous field. A single-clip video has no
    frame pair at all, so it passes through unprompted.

    Returns (prompted video, list of FlowField per clip).
    """
    if video.ndim != 4:
        raise ShapeError(f"video must be (T, H, W, C); got {video.shape}")
    if partition.m * partition.frames_per_clip != video.shape[0]:
        raise ShapeError(
            f"partition m={partition.m} x k={partition.frames_per_clip} "
            f"does not cover {video.shape[0]} frames")
    if partition.m == 1:
        zero = np.zeros((video.shape[1] // block_size,
                         video.shape[2] // block_size))
        return video.copy(), [FlowField(zero, zero.copy(), block_size,
                                        search_radius, degenerate=True)]
    flows = []
    for i in range(partition.m - 1):
        flows.append(estimate_flow(
            partition.representative_frame(video, i),
            partition.representative_frame(video, i + 1),
            block_size, search_radius))
    flows.append(flows[-1])
    out = np.empty_like(video)
    k = partition.frames_per_clip
    for i in range(partition.m):
        prompted = flow_prompt_clip(list(partition.clip(video, i)), flows[i])
        out[i * k:(i + 1) * k] = np.stack(prompted)
    return out, flows


@dataclass
class MaskPrompt:
    """A binary occupancy map used as a multiplicative prompt."""

    mask: np.ndarray               # (H, W), entries exactly 0 or 1
    source: str = "oracle"         # oracle | file

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim != 2:
            raise ShapeError(f"mask must be (H, W); got {self.mask.shape}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise DataFormatError(
                f"mask from {self.source} has non-binary entries")


def mask_prompt(frame: np.ndarray, mask: MaskPrompt) -> np.ndarray:
    """Element-wise product, mask broadcast over channels."""
    if frame.ndim != 3 or frame.shape[:2] != mask.mask.shape:
        raise ShapeError(
            f"mask {mask.mask.shape} does not match frame {frame.shape}")
    return frame * mask.mask[:, :, None]


def provide_masks(clip, source: str = "oracle",
                  partition: ClipPartition | None = None) -> list[MaskPrompt]:
    """One mask per frame of a clip.

    source "oracle" reads the synthetic generator's ground-truth
    occupancy maps off the clip; any other value is treated as a path
    to an SCPT u8 tensor of shape (T, H, W). With a partition, each
    clip's representative-frame mask is replicated across the clip.
    """
    t = clip.frames.shape[0]
    if source == "oracle":
        stack = np.asarray(clip.masks, dtype=np.float64)
        origin = "oracle"
    else:
        stack = read_tensor(Path(source)).astype(np.float64)
        origin = "file"
    if stack.shape != (t,) + clip.frames.shape[1:3]:
        raise ShapeError(
            f"mask stack {stack.shape} does not match clip frames "
            f"{clip.frames.shape}")
    masks = [MaskPrompt(stack[i], origin) for i in range(t)]
    if partition is not None:
        if partition.m * partition.frames_per_clip != t:
            raise ShapeError(
                f"partition does not cover {t} frames")
        rep = [masks[i * partition.frames_per_clip + partition.representative]
               for i in range(partition.m)]
        masks = [rep[i // partition.frames_per_clip] for i in range(t)]
    return masks


def mask_prompt_video(video: np.ndarray, masks: list[MaskPrompt]) -> np.ndarray:
    if len(masks) != video.shape[0]:
        raise ShapeError(
            f"{len(masks)} masks for {video.shape[0]} frames")
    return np.stack([mask_prompt(video[i], masks[i])
                     for i in range(video.shape[0])])
