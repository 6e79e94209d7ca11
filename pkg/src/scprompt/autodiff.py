"""Dense-tensor arithmetic with reverse-mode differentiation.

The engine is a define-by-run tape. Ops execute eagerly as the graph is
built, and every node records its op kind, inputs, and attributes, so
``forward_ops`` can re-execute the whole graph from the leaf values.
That re-execution is what makes central-difference gradient checking
possible: perturb a parameter array in place, replay the tape, read the
loss.

All values are float64. Node creation order is a topological order by
construction, and ``backward`` walks it in reverse, summing gradient
contributions over fan-out.

Determinism notes: value arrays are plain numpy, so results are
bit-identical between runs on the same platform and build. The
``mix_experts`` op additionally sums its pool contributions in
value-sorted order, so reordering the pool never changes output bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

_F64 = np.float64


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic, clamped to the open interval (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # saturate at the nearest representable neighbours of 0 and 1 so the
    # output stays strictly inside (0, 1) for every finite input
    np.clip(out, 5e-324, 1.0 - 2.0 ** -53, out=out)
    return out


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


class Node:
    """One tensor-valued entry on the tape.

    Nodes reference only their inputs (a DAG) and never the owning
    graph, so a dropped graph is reclaimed by reference counting alone;
    training never waits on cycle collection to release tape memory.
    """

    __slots__ = ("idx", "op", "inputs", "attrs", "value", "grad",
                 "is_param", "name", "saved")

    def __init__(self, idx, op, inputs, attrs, value, is_param, name):
        self.idx = idx
        self.op = op
        self.inputs = inputs          # list of Node
        self.attrs = attrs            # op-specific constants
        self.value = value            # np.ndarray or None before forward
        self.grad = None
        self.is_param = is_param
        self.name = name or f"{op}#{idx}"
        self.saved = None             # forward by-products reused in backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Node({self.name}, op={self.op}, shape={shape})"


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""

    max_relative_error: float
    worst_parameter: str
    worst_parameter_index: int
    passed: bool
    tolerance: float
    epsilon: float
    n_parameters: int

    def summary(self) -> str:
        return (f"max_rel_err={self.max_relative_error:.3e} "
                f"worst={self.worst_parameter}[{self.worst_parameter_index}] "
                f"n_params={self.n_parameters} pass={str(self.passed).lower()}")


class Graph:
    """A define-by-run computation tape.

    Leaves are added with :meth:`input` (constants) and :meth:`param`
    (learnable; the array is held by reference so external in-place
    updates are picked up by the next replay). Op methods append a node,
    compute its value immediately, and return it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    # ------------------------------------------------------------- leaves

    def input(self, value, name: str | None = None) -> Node:
        return self._leaf(value, False, name)

    def param(self, value, name: str | None = None) -> Node:
        return self._leaf(value, True, name)

    def _leaf(self, value, is_param, name):
        arr = np.asarray(value, dtype=_F64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"leaf '{name or 'input'}' contains non-finite entries")
        return self._append("leaf", [], {}, arr, is_param, name)

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.is_param]

    def _append(self, op, inputs, attrs, value, is_param=False, name=None):
        node = Node(len(self.nodes), op, inputs, attrs, value,
                    is_param, name)
        self.nodes.append(node)
        return node

    def _op(self, op, inputs, attrs=None, name=None) -> Node:
        node = self._append(op, list(inputs), attrs or {}, None, False, name)
        node.value = _FORWARD[op](node)
        return node

    # ------------------------------------------------------- elementwise

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape("add", a, b)
        return self._op("add", [a, b])

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape("sub", a, b)
        return self._op("sub", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape("mul", a, b)
        return self._op("mul", [a, b])

    def add_const(self, x: Node, c: float) -> Node:
        return self._op("add_const", [x], {"c": float(c)})

    def mul_const(self, x: Node, c: float) -> Node:
        return self._op("mul_const", [x], {"c": float(c)})

    def sigmoid(self, x: Node) -> Node:
        return self._op("sigmoid", [x])

    def tanh(self, x: Node) -> Node:
        return self._op("tanh", [x])

    def relu(self, x: Node) -> Node:
        return self._op("relu", [x])

    def exp(self, x: Node) -> Node:
        return self._op("exp", [x])

    def log(self, x: Node) -> Node:
        """Natural log; caller guarantees positive inputs."""
        return self._op("log", [x])

    # ------------------------------------------------------- structural

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != x.value.size:
            raise ShapeError(
                f"reshape of '{x.name}': cannot view {x.value.shape} as {shape}")
        return self._op("reshape", [x], {"shape": shape})

    def transpose(self, x: Node, axes) -> Node:
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(x.value.ndim)):
            raise ShapeError(
                f"transpose of '{x.name}': axes {axes} not a permutation "
                f"of rank {x.value.ndim}")
        return self._op("transpose", [x], {"axes": axes})

    def broadcast_to(self, x: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        try:
            np.broadcast_to(x.value, shape)
        except ValueError:
            raise ShapeError(
                f"broadcast of '{x.name}': {x.value.shape} does not "
                f"broadcast to {shape}") from None
        return self._op("broadcast", [x], {"shape": shape})

    def concat(self, parts, axis: int) -> Node:
        parts = list(parts)
        if not parts:
            raise ShapeError("concat of zero tensors")
        base = list(parts[0].value.shape)
        for p in parts[1:]:
            other = list(p.value.shape)
            if len(other) != len(base) or any(
                    other[i] != base[i] for i in range(len(base)) if i != axis):
                raise ShapeError(
                    f"concat axis {axis}: '{parts[0].name}' {parts[0].value.shape} "
                    f"vs '{p.name}' {p.value.shape}")
        return self._op("concat", parts, {"axis": int(axis)})

    def select(self, x: Node, axis: int, index: int) -> Node:
        """Pick one slice along an axis, removing that axis."""
        if not (0 <= index < x.value.shape[axis]):
            raise ShapeError(
                f"select on '{x.name}': index {index} out of range for axis "
                f"{axis} of shape {x.value.shape}")
        return self._op("select", [x], {"axis": int(axis), "index": int(index)})

    def slice_axis(self, x: Node, axis: int, start: int, stop: int) -> Node:
        """Contiguous sub-range along one axis (axis kept)."""
        n = x.value.shape[axis]
        if not (0 <= start < stop <= n):
            raise ShapeError(
                f"slice on '{x.name}': [{start}:{stop}] out of range for "
                f"axis {axis} of shape {x.value.shape}")
        return self._op("slice", [x], {"axis": int(axis), "start": int(start),
                                       "stop": int(stop)})

    # -------------------------------------------------------- reductions

    def mean(self, x: Node, axis: int | None = None) -> Node:
        return self._op("mean", [x], {"axis": axis})

    def sum(self, x: Node, axis: int | None = None) -> Node:
        return self._op("sum", [x], {"axis": axis})

    def softmax(self, x: Node, axis: int = -1) -> Node:
        return self._op("softmax", [x], {"axis": int(axis)})

    # ------------------------------------------------------- linear maps

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.ndim != bv.ndim:
            raise ShapeError(
                f"matmul '{a.name}' x '{b.name}': ranks {av.ndim} and {bv.ndim} "
                f"(want equal ranks >= 2)")
        if av.shape[:-2] != bv.shape[:-2] or av.shape[-1] != bv.shape[-2]:
            raise ShapeError(
                f"matmul '{a.name}' x '{b.name}': shapes {av.shape} and "
                f"{bv.shape} incompatible")
        return self._op("matmul", [a, b])

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """Dense map on 2-D input: x @ w + b with b broadcast over rows."""
        xv, wv, bv = x.value, w.value, b.value
        if xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1:
            raise ShapeError(
                f"affine '{x.name}': want 2-D x, 2-D w, 1-D b; got "
                f"{xv.shape}, {wv.shape}, {bv.shape}")
        if xv.shape[1] != wv.shape[0] or wv.shape[1] != bv.shape[0]:
            raise ShapeError(
                f"affine '{x.name}': x {xv.shape} w {wv.shape} b {bv.shape} "
                f"do not chain")
        return self._op("affine", [x, w, b])

    def layer_norm(self, x: Node, gain: Node, bias: Node,
                   eps: float = 1e-5) -> Node:
        """Normalize the last axis to zero mean, unit variance, then scale."""
        n = x.value.shape[-1]
        if gain.value.shape != (n,) or bias.value.shape != (n,):
            raise ShapeError(
                f"layer_norm '{x.name}': gain/bias must be ({n},); got "
                f"{gain.value.shape}, {bias.value.shape}")
        return self._op("layer_norm", [x, gain, bias], {"eps": float(eps)})

    def mix_experts(self, weights: Node, experts: Node) -> Node:
        """Weighted sum over an expert pool: out[b] = sum_k w[b,k] * E[k].

        weights is (B, l), experts is (l, ...). Contributions are summed
        in value-sorted order, so permuting the pool (and the weights
        consistently) leaves the result bit-identical.
        """
        wv, ev = weights.value, experts.value
        if wv.ndim != 2 or ev.ndim < 1 or wv.shape[1] != ev.shape[0]:
            raise ShapeError(
                f"mix_experts '{weights.name}' x '{experts.name}': weights "
                f"{wv.shape} vs pool {ev.shape} (expert counts must match)")
        return self._op("mix_experts", [weights, experts])

    # --------------------------------------------------------- sampling

    def roi_align(self, grid: Node, boxes: np.ndarray, out_size: int = 5) -> Node:
        """Bilinear crops of a batched feature grid.

        grid is (N, Hg, Wg, C); boxes is a constant (N, 4) array of
        normalized [x0, y0, x1, y1] rectangles. Each output cell samples
        the grid once at the cell centre under the half-pixel convention,
        clamping coordinates at the edges. Output is (N, out, out, C).
        """
        gv = grid.value
        boxes = np.asarray(boxes, dtype=_F64)
        if gv.ndim != 4:
            raise ShapeError(
                f"roi_align '{grid.name}': want (N, Hg, Wg, C); got {gv.shape}")
        if gv.shape[1] < 2 or gv.shape[2] < 2:
            raise ShapeError(
                f"roi_align '{grid.name}': grid dims must be >= 2; got {gv.shape}")
        if boxes.shape != (gv.shape[0], 4):
            raise ShapeError(
                f"roi_align '{grid.name}': boxes {boxes.shape} do not match "
                f"batch {gv.shape[0]}")
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise ShapeError(
                f"roi_align '{grid.name}': inverted box (need x0 < x1, y0 < y1)")
        return self._op("roi_align", [grid],
                        {"boxes": boxes, "out_size": int(out_size)})

    # ------------------------------------------------------------ losses

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross-entropy against integer class labels."""
        lv = logits.value
        labels = np.asarray(labels)
        if lv.ndim != 2:
            raise ShapeError(
                f"cross_entropy '{logits.name}': want (N, classes); got {lv.shape}")
        if labels.shape != (lv.shape[0],):
            raise ShapeError(
                f"cross_entropy '{logits.name}': labels {labels.shape} do not "
                f"match batch {lv.shape[0]}")
        if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
            raise ShapeError(
                f"cross_entropy '{logits.name}': label out of range "
                f"[0, {lv.shape[1]})")
        return self._op("cross_entropy", [logits],
                        {"labels": labels.astype(np.int64)})

    def bce_logits(self, logits: Node, targets: np.ndarray) -> Node:
        """Mean binary cross-entropy on logits, log-sum-exp stable form."""
        lv = logits.value
        targets = np.asarray(targets, dtype=_F64)
        if targets.shape != lv.shape:
            raise ShapeError(
                f"bce_logits '{logits.name}': targets {targets.shape} do not "
                f"match logits {lv.shape}")
        if not np.all((targets == 0.0) | (targets == 1.0)):
            raise ShapeError(
                f"bce_logits '{logits.name}': targets must be exactly 0 or 1")
        return self._op("bce_logits", [logits], {"targets": targets})

    # --------------------------------------------------------- execution

    def reset(self):
        """Drop computed values and gradients, keeping leaf arrays."""
        for node in self.nodes:
            node.grad = None
            node.saved = None
            if node.op != "leaf":
                node.value = None

    def forward_ops(self):
        """(Re-)execute every op in tape order from the leaf values."""
        for node in self.nodes:
            if node.op != "leaf":
                node.value = _FORWARD[node.op](node)
        return self

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar loss.

        Returns a map from parameter node id to its gradient array;
        gradients are also left on ``node.grad`` for every reached node.
        """
        if loss.idx >= len(self.nodes) or self.nodes[loss.idx] is not loss:
            raise GraphError("loss node belongs to a different graph")
        if any(n.value is None for n in self.nodes):
            raise GraphError("forward pass has not run (missing node values)")
        if loss.value.size != 1:
            raise GraphError(
                f"loss '{loss.name}' is not scalar (shape {loss.value.shape})")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.idx + 1]):
            if node.grad is None or node.op == "leaf":
                continue
            _BACKWARD[node.op](node, node.grad)
        return {n.idx: n.grad for n in self.params() if n.grad is not None}

    # ------------------------------------------------------------ helpers

    @staticmethod
    def _same_shape(op, a: Node, b: Node):
        if a.value.shape != b.value.shape:
            raise ShapeError(
                f"{op} '{a.name}' vs '{b.name}': shapes {a.value.shape} and "
                f"{b.value.shape} differ")


def forward_ops(graph: Graph) -> Graph:
    return graph.forward_ops()


def backward(graph: Graph, loss: Node) -> dict[int, np.ndarray]:
    return graph.backward(loss)


def grad_check(graph: Graph, loss: Node, epsilon: float = 1e-5,
               tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic parameter gradients to central finite differences.

    Each scalar parameter entry is perturbed by +/- epsilon, the tape is
    replayed, and the relative error |a - n| / max(1e-12, |a| + |n|) is
    taken against the analytic gradient. Passes when the worst entry is
    within tolerance.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise GraphError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = graph.params()
    n_scalars = int(sum(p.value.size for p in params))
    if n_scalars == 0:
        return GradCheckReport(0.0, "", -1, True, tolerance, epsilon, 0)

    graph.forward_ops()
    graph.backward(loss)
    analytic = {p.idx: p.grad.copy() if p.grad is not None
                else np.zeros_like(p.value) for p in params}

    worst = (0.0, "", -1)
    for p in params:
        flat = p.value.reshape(-1)
        ana = analytic[p.idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            graph.forward_ops()
            lp = float(loss.value.reshape(()))
            flat[j] = orig - epsilon
            graph.forward_ops()
            lm = float(loss.value.reshape(()))
            flat[j] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            rel = abs(ana[j] - numeric) / max(1e-12, abs(ana[j]) + abs(numeric))
            if rel > worst[0]:
                worst = (rel, p.name, j)
    graph.forward_ops()  # restore unperturbed values
    return GradCheckReport(worst[0], worst[1], worst[2],
                           worst[0] <= tolerance, tolerance, epsilon, n_scalars)


# ---------------------------------------------------------------------------
# forward rules


def _fw_add(n):
    return n.inputs[0].value + n.inputs[1].value


def _fw_sub(n):
    return n.inputs[0].value - n.inputs[1].value


def _fw_mul(n):
    return n.inputs[0].value * n.inputs[1].value


def _fw_add_const(n):
    return n.inputs[0].value + n.attrs["c"]


def _fw_mul_const(n):
    return n.inputs[0].value * n.attrs["c"]


def _fw_sigmoid(n):
    return _sigmoid(n.inputs[0].value)


def _fw_tanh(n):
    return np.tanh(n.inputs[0].value)


def _fw_relu(n):
    return np.maximum(n.inputs[0].value, 0.0)


def _fw_exp(n):
    return np.exp(n.inputs[0].value)


def _fw_log(n):
    return np.log(n.inputs[0].value)


def _fw_reshape(n):
    return n.inputs[0].value.reshape(n.attrs["shape"])


def _fw_transpose(n):
    return n.inputs[0].value.transpose(n.attrs["axes"])


def _fw_broadcast(n):
    return np.broadcast_to(n.inputs[0].value, n.attrs["shape"])


def _fw_concat(n):
    return np.concatenate([p.value for p in n.inputs], axis=n.attrs["axis"])


def _fw_select(n):
    return np.take(n.inputs[0].value, n.attrs["index"], axis=n.attrs["axis"])


def _fw_slice(n):
    sl = [slice(None)] * n.inputs[0].value.ndim
    sl[n.attrs["axis"]] = slice(n.attrs["start"], n.attrs["stop"])
    return n.inputs[0].value[tuple(sl)]


def _fw_mean(n):
    return np.asarray(np.mean(n.inputs[0].value, axis=n.attrs["axis"]))


def _fw_sum(n):
    return np.asarray(np.sum(n.inputs[0].value, axis=n.attrs["axis"]))


def _fw_softmax(n):
    return _softmax(n.inputs[0].value, n.attrs["axis"])


def _fw_matmul(n):
    return n.inputs[0].value @ n.inputs[1].value


def _fw_affine(n):
    x, w, b = (i.value for i in n.inputs)
    return x @ w + b


def _fw_layer_norm(n):
    x, gain, bias = (i.value for i in n.inputs)
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + n.attrs["eps"])
    xhat = xc * inv
    n.saved = (xhat, inv)
    return gain * xhat + bias


def _fw_mix_experts(n):
    w, experts = n.inputs[0].value, n.inputs[1].value
    pool_shape = experts.shape[1:]
    ef = experts.reshape(experts.shape[0], -1)          # (l, F)
    # products laid out (B, F, l) so the pool axis is innermost, then
    # sorted so the summation order is independent of expert order
    prods = w[:, None, :] * ef.T[None, :, :]
    prods = np.sort(prods, axis=-1)
    out = np.sum(prods, axis=-1)
    return out.reshape((w.shape[0],) + pool_shape)


def _fw_roi_align(n):
    grid = n.inputs[0].value
    boxes, out_size = n.attrs["boxes"], n.attrs["out_size"]
    N, Hg, Wg, _ = grid.shape
    cells = (np.arange(out_size, dtype=_F64) + 0.5) / out_size
    # continuous sample coords in value-index space (value i sits at i + 0.5)
    xs = (boxes[:, 0:1] + cells[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])) * Wg - 0.5
    ys = (boxes[:, 1:2] + cells[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])) * Hg - 0.5
    xs = np.clip(xs, 0.0, Wg - 1.0)
    ys = np.clip(ys, 0.0, Hg - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, Wg - 1)
    y1 = np.minimum(y0 + 1, Hg - 1)
    wx = xs - x0
    wy = ys - y0
    n.saved = (y0, y1, wy, x0, x1, wx)
    bi = np.arange(N)[:, None, None]
    g00 = grid[bi, y0[:, :, None], x0[:, None, :], :]
    g01 = grid[bi, y0[:, :, None], x1[:, None, :], :]
    g10 = grid[bi, y1[:, :, None], x0[:, None, :], :]
    g11 = grid[bi, y1[:, :, None], x1[:, None, :], :]
    wya = wy[:, :, None, None]
    wxa = wx[:, None, :, None]
    # lerp form: exact (not merely close) when neighbouring values agree,
    # so a constant grid samples to exactly that constant
    top = g00 + wxa * (g01 - g00)
    bot = g10 + wxa * (g11 - g10)
    return top + wya * (bot - top)


def _fw_cross_entropy(n):
    logits = n.inputs[0].value
    labels = n.attrs["labels"]
    m = np.max(logits, axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.sum(np.exp(z), axis=1)) + m[:, 0]
    n.saved = _softmax(logits, axis=1)
    picked = logits[np.arange(logits.shape[0]), labels]
    return np.asarray(np.mean(lse - picked))


def _fw_bce_logits(n):
    x = n.inputs[0].value
    t = n.attrs["targets"]
    return np.asarray(np.mean(np.maximum(x, 0.0) - x * t
                              + np.log1p(np.exp(-np.abs(x)))))


# ---------------------------------------------------------------------------
# backward rules; each accumulates into its inputs' .grad


def _acc(node, contribution):
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += contribution


def _bw_add(n, g):
    _acc(n.inputs[0], g)
    _acc(n.inputs[1], g)


def _bw_sub(n, g):
    _acc(n.inputs[0], g)
    _acc(n.inputs[1], -g)


def _bw_mul(n, g):
    a, b = n.inputs
    _acc(a, g * b.value)
    _acc(b, g * a.value)


def _bw_add_const(n, g):
    _acc(n.inputs[0], g)


def _bw_mul_const(n, g):
    _acc(n.inputs[0], g * n.attrs["c"])


def _bw_sigmoid(n, g):
    y = n.value
    _acc(n.inputs[0], g * y * (1.0 - y))


def _bw_tanh(n, g):
    y = n.value
    _acc(n.inputs[0], g * (1.0 - y * y))


def _bw_relu(n, g):
    _acc(n.inputs[0], g * (n.inputs[0].value > 0.0))


def _bw_exp(n, g):
    _acc(n.inputs[0], g * n.value)


def _bw_log(n, g):
    _acc(n.inputs[0], g / n.inputs[0].value)


def _bw_reshape(n, g):
    _acc(n.inputs[0], g.reshape(n.inputs[0].value.shape))


def _bw_transpose(n, g):
    inverse = np.argsort(n.attrs["axes"])
    _acc(n.inputs[0], g.transpose(tuple(inverse)))


def _bw_broadcast(n, g):
    x = n.inputs[0].value
    extra = g.ndim - x.ndim
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i in range(x.ndim) if x.shape[i] == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    _acc(n.inputs[0], g)


def _bw_concat(n, g):
    axis = n.attrs["axis"]
    offset = 0
    for p in n.inputs:
        size = p.value.shape[axis]
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offset, offset + size)
        _acc(p, g[tuple(sl)])
        offset += size


def _bw_select(n, g):
    x = n.inputs[0]
    if x.grad is None:
        x.grad = np.zeros_like(x.value)
    sl = [slice(None)] * x.value.ndim
    sl[n.attrs["axis"]] = n.attrs["index"]
    x.grad[tuple(sl)] += g


def _bw_slice(n, g):
    x = n.inputs[0]
    if x.grad is None:
        x.grad = np.zeros_like(x.value)
    sl = [slice(None)] * x.value.ndim
    sl[n.attrs["axis"]] = slice(n.attrs["start"], n.attrs["stop"])
    x.grad[tuple(sl)] += g


def _bw_mean(n, g):
    x = n.inputs[0]
    axis = n.attrs["axis"]
    if axis is None:
        _acc(x, np.full_like(x.value, g / x.value.size))
    else:
        scale = 1.0 / x.value.shape[axis]
        _acc(x, np.broadcast_to(np.expand_dims(g, axis) * scale, x.value.shape))


def _bw_sum(n, g):
    x = n.inputs[0]
    axis = n.attrs["axis"]
    if axis is None:
        _acc(x, np.broadcast_to(g, x.value.shape))
    else:
        _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape))


def _bw_softmax(n, g):
    y = n.value
    axis = n.attrs["axis"]
    dot = np.sum(g * y, axis=axis, keepdims=True)
    _acc(n.inputs[0], y * (g - dot))


def _bw_matmul(n, g):
    a, b = n.inputs
    _acc(a, g @ np.swapaxes(b.value, -1, -2))
    _acc(b, np.swapaxes(a.value, -1, -2) @ g)


def _bw_affine(n, g):
    x, w, b = n.inputs
    _acc(x, g @ w.value.T)
    _acc(w, x.value.T @ g)
    _acc(b, g.sum(axis=0))


def _bw_layer_norm(n, g):
    x, gain, bias = n.inputs
    xhat, inv = n.saved
    lead = tuple(range(g.ndim - 1))
    _acc(bias, g.sum(axis=lead))
    _acc(gain, (g * xhat).sum(axis=lead))
    gx = g * gain.value
    mean_gx = np.mean(gx, axis=-1, keepdims=True)
    mean_gx_xhat = np.mean(gx * xhat, axis=-1, keepdims=True)
    _acc(x, inv * (gx - mean_gx - xhat * mean_gx_xhat))


def _bw_mix_experts(n, g):
    w, experts = n.inputs
    ef = experts.value.reshape(experts.value.shape[0], -1)
    g2 = g.reshape(g.shape[0], -1)
    _acc(w, g2 @ ef.T)
    ge = (w.value.T @ g2).reshape(experts.value.shape)
    _acc(experts, ge)


def _bw_roi_align(n, g):
    grid = n.inputs[0]
    if grid.grad is None:
        grid.grad = np.zeros_like(grid.value)
    y0, y1, wy, x0, x1, wx = n.saved
    N = grid.value.shape[0]
    bi = np.broadcast_to(np.arange(N)[:, None, None], g.shape[:3])
    ya = np.broadcast_to(y0[:, :, None], g.shape[:3])
    yb = np.broadcast_to(y1[:, :, None], g.shape[:3])
    xa = np.broadcast_to(x0[:, None, :], g.shape[:3])
    xb = np.broadcast_to(x1[:, None, :], g.shape[:3])
    wya = wy[:, :, None, None]
    wxa = wx[:, None, :, None]
    np.add.at(grid.grad, (bi, ya, xa), (1 - wya) * (1 - wxa) * g)
    np.add.at(grid.grad, (bi, ya, xb), (1 - wya) * wxa * g)
    np.add.at(grid.grad, (bi, yb, xa), wya * (1 - wxa) * g)
    np.add.at(grid.grad, (bi, yb, xb), wya * wxa * g)


def _bw_cross_entropy(n, g):
    logits = n.inputs[0]
    labels = n.attrs["labels"]
    p = n.saved.copy()
    p[np.arange(p.shape[0]), labels] -= 1.0
    _acc(logits, (float(g) / p.shape[0]) * p)


def _bw_bce_logits(n, g):
    logits = n.inputs[0]
    t = n.attrs["targets"]
    _acc(logits, (float(g) / t.size) * (_sigmoid(logits.value) - t))


_FORWARD = {
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul,
    "add_const": _fw_add_const, "mul_const": _fw_mul_const,
    "sigmoid": _fw_sigmoid, "tanh": _fw_tanh, "relu": _fw_relu,
    "exp": _fw_exp, "log": _fw_log,
    "reshape": _fw_reshape, "transpose": _fw_transpose,
    "broadcast": _fw_broadcast, "concat": _fw_concat,
    "select": _fw_select, "slice": _fw_slice,
    "mean": _fw_mean, "sum": _fw_sum, "softmax": _fw_softmax,
    "matmul": _fw_matmul, "affine": _fw_affine, "layer_norm": _fw_layer_norm,
    "mix_experts": _fw_mix_experts, "roi_align": _fw_roi_align,
    "cross_entropy": _fw_cross_entropy, "bce_logits": _fw_bce_logits,
}

_BACKWARD = {
    "add": _bw_add, "sub": _bw_sub, "mul": _bw_mul,
    "add_const": _bw_add_const, "mul_const": _bw_mul_const,
    "sigmoid": _bw_sigmoid, "tanh": _bw_tanh, "relu": _bw_relu,
    "exp": _bw_exp, "log": _bw_log,
    "reshape": _bw_reshape, "transpose": _bw_transpose,
    "broadcast": _bw_broadcast, "concat": _bw_concat,
    "select": _bw_select, "slice": _bw_slice,
    "mean": _bw_mean, "sum": _bw_sum, "softmax": _bw_softmax,
    "matmul": _bw_matmul, "affine": _bw_affine, "layer_norm": _bw_layer_norm,
    "mix_experts": _bw_mix_experts, "roi_align": _bw_roi_align,
    "cross_entropy": _bw_cross_entropy, "bce_logits": _bw_bce_logits,
}
