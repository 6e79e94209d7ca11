"""Soft conditional prompt learning for video action recognition.

A self-contained stack: a reverse-mode tensor engine with a
finite-difference gradient oracle, a gated prompt-expert pool,
non-learnable flow/mask prompts, a small attention encoder with an
auto-regressive temporal head, a synthetic moving-sprites dataset, and
a training harness with deterministic reports.
"""

from .autodiff import (Graph, GradCheckReport, Node, backward, forward_ops,
                       grad_check)
from .dataset import (CLASS_VOCABULARY, Clip, GenSpec, VideoClipSet,
                      generate, load_set, save_set)
from .errors import (ConfigError, DataFormatError, GenerationError,
                     GraphError, NonFiniteError, ScpromptError, ShapeError)
from .losses import bce_with_logits, cross_entropy, one_hot
from .model import (EncoderConfig, ModelConfig, ModelParams, ar_reason,
                    classify, encode_frame, forward_batch, init_params,
                    roi_align_features)
from .rng import RngStream
from .scpt import read_tensor, write_tensor
from .softprompt import PromptPool, condition, fuse, gate, synthesize
from .training import (OptState, Schedule, TrainRunConfig, ablate_experts,
                       evaluate, load_checkpoint, lr_at, save_checkpoint,
                       sgd_step, train)
from .visual import (ClipPartition, FlowField, estimate_flow,
                     flow_prompt_video, mask_prompt_video, provide_masks)

__version__ = "0.1.0"

__all__ = [
    "Graph", "Node", "GradCheckReport", "forward_ops", "backward",
    "grad_check", "RngStream",
    "CLASS_VOCABULARY", "Clip", "GenSpec", "VideoClipSet", "generate",
    "load_set", "save_set",
    "bce_with_logits", "cross_entropy", "one_hot",
    "EncoderConfig", "ModelConfig", "ModelParams", "ar_reason", "classify",
    "encode_frame", "forward_batch", "init_params", "roi_align_features",
    "read_tensor", "write_tensor",
    "PromptPool", "condition", "fuse", "gate", "synthesize",
    "OptState", "Schedule", "TrainRunConfig", "ablate_experts", "evaluate",
    "load_checkpoint", "lr_at", "save_checkpoint", "sgd_step", "train",
    "ClipPartition", "FlowField", "estimate_flow", "flow_prompt_video",
    "mask_prompt_video", "provide_masks",
    "ScpromptError", "ConfigError", "DataFormatError", "GenerationError",
    "GraphError", "NonFiniteError", "ShapeError", "__version__",
]
