"""Supervision objectives.

Single-agent: softmax cross-entropy over one label per video, computed
through a max-subtracted log-sum-exp so large logits cannot overflow.

Multi-agent: binary cross-entropy on logits, one target per (video,
agent, class), in the max(x,0) - x*y + log1p(exp(-|x|)) form, which
equals -[y log sigmoid(x) + (1-y) log(1-sigmoid(x))] wherever the naive
expression is finite but stays finite for any representable logit.

Both reduce by the mean over all labeled entries, so learning rates do
not depend on batch size or agent count.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node
from .errors import ShapeError


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(
            f"label outside [0, {n_classes}) in one-hot encoding")
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(g: Graph, logits: Node, labels) -> Node:
    """Mean single-label cross-entropy; labels are integer class ids."""
    return g.cross_entropy(logits, np.asarray(labels))


def bce_with_logits(g: Graph, logits: Node, targets) -> Node:
    """Mean per-entry binary cross-entropy; targets are exactly 0 or 1."""
    return g.bce_logits(logits, np.asarray(targets, dtype=np.float64))
