"""Layer graph definition, forward evaluation, and state recording.

A Network is a DAG of layer nodes listed in topological order. The
reserved id "input" names the network input. Layers come in two kinds:
affine (dense, conv, batch-norm inference, flatten, add, concat) and
state-driven nonlinearities (leaky activation, max pool, training-mode
dropout). Recording the nonlinearity states at an input freezes the
piecewise-affine region, which is what every frozen pass replays.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics
from .numerics import ShapeMismatch, as_f64

INPUT_ID = "input"


class GraphError(ValueError):
    """Raised for structural problems in a network graph."""


# ---------------------------------------------------------------------------
# layer specs

@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (d_out, d_in)
    bias: np.ndarray     # (d_out,)


@dataclass(frozen=True)
class Conv2D:
    filters: np.ndarray  # (kh, kw, C, F)
    bias: np.ndarray     # (F,)
    stride: tuple[int, int] = (1, 1)
    padding: str = "valid"


@dataclass(frozen=True)
class Activation:
    """Elementwise max(h, leakiness * h); leakiness 0 is relu, -1 is abs."""
    leakiness: float = 0.0


@dataclass(frozen=True)
class MaxPool:
    ksize: tuple[int, int]
    stride: Optional[tuple[int, int]] = None  # defaults to ksize
    padding: str = "valid"


@dataclass(frozen=True)
class Dropout:
    """Inference mode is the identity; training mode applies a fixed
    keep mask drawn from a counter-based generator keyed by (seed,
    node id), so the mask is reproducible across passes."""
    rate: float
    training: bool = False
    seed: int = 0


@dataclass(frozen=True)
class BatchNormInference:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Add:
    pass


@dataclass(frozen=True)
class Concat:
    axis: int


@dataclass(frozen=True)
class Recurrent:
    """Elman-style cell unrolled over the leading input axis.

    h_t = act(w_hidden @ h_{t-1} + w_input @ x_t + bias), h_0 = 0,
    with the same leaky activation as Activation. Output is h_T.
    """
    w_hidden: np.ndarray  # (hidden, hidden)
    w_input: np.ndarray   # (hidden, d_in)
    bias: np.ndarray      # (hidden,)
    leakiness: float
    steps: int


LayerSpec = (Dense, Conv2D, Activation, MaxPool, Dropout, BatchNormInference,
             Flatten, Add, Concat, Recurrent)


@dataclass
class Node:
    id: str
    layer: object
    inputs: tuple[str, ...]


@dataclass
class Network:
    input_shape: tuple[int, ...]
    nodes: list[Node]
    output: str


# ---------------------------------------------------------------------------
# validation and shape inference

_SINGLE_INPUT = (Dense, Conv2D, Activation, MaxPool, Dropout,
                 BatchNormInference, Flatten, Recurrent)


def validate(net: Network) -> None:
    """Structural checks: unique ids, inputs precede consumers, output
    exists. Raises GraphError naming the offending node."""
    if not net.nodes:
        raise GraphError("network has no nodes")
    if any(d < 1 for d in net.input_shape) or not net.input_shape:
        raise GraphError(f"input_shape must be positive dims, got {net.input_shape}")
    seen = {INPUT_ID}
    for node in net.nodes:
        if node.id == INPUT_ID:
            raise GraphError(f"node id {INPUT_ID!r} is reserved for the network input")
        if node.id in seen:
            raise GraphError(f"duplicate node id {node.id!r}")
        if not isinstance(node.layer, LayerSpec):
            raise GraphError(f"node {node.id!r}: unknown layer {type(node.layer).__name__}")
        if not node.inputs:
            raise GraphError(f"node {node.id!r} has no inputs")
        if isinstance(node.layer, _SINGLE_INPUT) and len(node.inputs) != 1:
            raise GraphError(
                f"node {node.id!r}: {type(node.layer).__name__} takes exactly "
                f"one input, got {len(node.inputs)}")
        if isinstance(node.layer, (Add, Concat)) and len(node.inputs) < 2:
            raise GraphError(f"node {node.id!r} needs at least two inputs")
        for ref in node.inputs:
            if ref not in seen:
                raise GraphError(
                    f"node {node.id!r} references {ref!r}, which is undefined "
                    f"or appears later (nodes must be in topological order)")
        seen.add(node.id)
    if net.output not in seen or net.output == INPUT_ID:
        raise GraphError(f"output node {net.output!r} does not exist")
    for node in net.nodes:
        if isinstance(node.layer, Dropout) and not 0.0 <= node.layer.rate < 1.0:
            raise GraphError(f"node {node.id!r}: dropout rate must be in [0, 1), "
                             f"got {node.layer.rate}")
        if isinstance(node.layer, Recurrent) and node.layer.steps < 1:
            raise GraphError(f"node {node.id!r}: steps must be >= 1")


def _infer_one(node: Node, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    lay = node.layer
    nid = node.id
    if isinstance(lay, Dense):
        (s,) = in_shapes
        w = lay.weights
        if len(s) != 1 or w.ndim != 2 or w.shape[1] != s[0]:
            raise ShapeMismatch(
                f"node {nid!r}: dense weights {w.shape} cannot consume input {s}")
        if lay.bias.shape != (w.shape[0],):
            raise ShapeMismatch(
                f"node {nid!r}: bias {lay.bias.shape} does not match {w.shape[0]} outputs")
        return (w.shape[0],)
    if isinstance(lay, Conv2D):
        (s,) = in_shapes
        if len(s) != 4:
            raise ShapeMismatch(f"node {nid!r}: conv input must be NHWC, got {s}")
        out = numerics.conv2d_output_shape(s, lay.filters.shape, lay.stride, lay.padding)
        if lay.bias.shape != (lay.filters.shape[3],):
            raise ShapeMismatch(
                f"node {nid!r}: bias {lay.bias.shape} does not match "
                f"{lay.filters.shape[3]} filters")
        return out
    if isinstance(lay, MaxPool):
        (s,) = in_shapes
        if len(s) != 4:
            raise ShapeMismatch(f"node {nid!r}: maxpool input must be NHWC, got {s}")
        stride = lay.stride if lay.stride is not None else lay.ksize
        return numerics.maxpool_output_shape(s, lay.ksize, stride, lay.padding)
    if isinstance(lay, (Activation, Dropout)):
        return in_shapes[0]
    if isinstance(lay, BatchNormInference):
        (s,) = in_shapes
        feat = s[-1]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = getattr(lay, name)
            if arr.shape != (feat,):
                raise ShapeMismatch(
                    f"node {nid!r}: {name} {arr.shape} does not match "
                    f"feature axis of length {feat}")
        return s
    if isinstance(lay, Flatten):
        return (int(np.prod(in_shapes[0])),)
    if isinstance(lay, Add):
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if s != first:
                raise ShapeMismatch(f"node {nid!r}: add inputs {first} vs {s}")
        return first
    if isinstance(lay, Concat):
        first = in_shapes[0]
        ax = lay.axis
        if not -len(first) <= ax < len(first):
            raise ShapeMismatch(f"node {nid!r}: concat axis {ax} out of range for {first}")
        ax %= len(first)
        total = 0
        for s in in_shapes:
            if len(s) != len(first) or s[:ax] != first[:ax] or s[ax + 1:] != first[ax + 1:]:
                raise ShapeMismatch(f"node {nid!r}: concat inputs {first} vs {s} "
                                    f"disagree off axis {ax}")
            total += s[ax]
        return first[:ax] + (total,) + first[ax + 1:]
    if isinstance(lay, Recurrent):
        (s,) = in_shapes
        hid = lay.w_hidden.shape[0]
        if lay.w_hidden.shape != (hid, hid):
            raise ShapeMismatch(f"node {nid!r}: w_hidden {lay.w_hidden.shape} not square")
        if len(s) != 2 or s[0] != lay.steps or lay.w_input.shape != (hid, s[1]):
            raise ShapeMismatch(
                f"node {nid!r}: recurrent expects input ({lay.steps}, "
                f"{lay.w_input.shape[1] if lay.w_input.ndim == 2 else '?'}), got {s}")
        if lay.bias.shape != (hid,):
            raise ShapeMismatch(f"node {nid!r}: bias {lay.bias.shape} vs hidden {hid}")
        return (hid,)
    raise GraphError(f"node {nid!r}: unknown layer {type(lay).__name__}")


def shape_infer(net: Network) -> dict[str, tuple[int, ...]]:
    """Shapes of every node output, keyed by node id. Validates the graph."""
    validate(net)
    shapes: dict[str, tuple[int, ...]] = {INPUT_ID: tuple(net.input_shape)}
    for node in net.nodes:
        shapes[node.id] = _infer_one(node, [shapes[r] for r in node.inputs])
    return shapes


# ---------------------------------------------------------------------------
# dropout masks

def dropout_mask(seed: int, node_id: str, shape: tuple[int, ...],
                 rate: float) -> np.ndarray:
    """Reproducible keep mask: counter-based generator keyed by (seed,
    node id), independent of draw order anywhere else."""
    digest = hashlib.blake2s(f"dropout/{seed}/{node_id}".encode()).digest()
    rng = np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))
    return rng.random(shape) >= rate


# ---------------------------------------------------------------------------
# recorded state

@dataclass
class FrozenState:
    """Nonlinearity states plus feature maps recorded at one input.

    sign_masks: activation nodes, True where pre-activation >= 0
                (recurrent nodes store a (steps, hidden) stack);
    argmax_indices: max-pool winners as flat offsets into the node input;
    keep_masks: training-mode dropout keep masks;
    outputs: every node's recorded output, used by weight-direction
             products and shape checks.
    """
    input: np.ndarray
    outputs: dict[str, np.ndarray]
    sign_masks: dict[str, np.ndarray] = field(default_factory=dict)
    argmax_indices: dict[str, np.ndarray] = field(default_factory=dict)
    keep_masks: dict[str, np.ndarray] = field(default_factory=dict)


def _leak_factor(mask: np.ndarray, leakiness: float) -> np.ndarray:
    return np.where(mask, 1.0, leakiness)


def _layer_apply(node: Node, ins: list[np.ndarray], *, bias: bool,
                 state: FrozenState | None, sink: FrozenState | None) -> np.ndarray:
    """One node in one pass. With state=None the nonlinearity states are
    computed fresh (and recorded into sink if given); otherwise the
    frozen states are replayed. bias=False zeroes every additive term,
    turning the frozen map into pure slope."""
    lay = node.layer
    nid = node.id
    if isinstance(lay, Dense):
        (v,) = ins
        if v.shape != (lay.weights.shape[1],):
            raise ShapeMismatch(f"node {nid!r}: dense expects "
                                f"({lay.weights.shape[1]},), got {v.shape}")
        out = lay.weights @ v
        return out + lay.bias if bias else out
    if isinstance(lay, Conv2D):
        out = numerics.conv2d(ins[0], lay.filters, lay.stride, lay.padding)
        return out + lay.bias if bias else out
    if isinstance(lay, Activation):
        (h,) = ins
        if state is None:
            mask = h >= 0
            if sink is not None:
                sink.sign_masks[nid] = mask
        else:
            mask = state.sign_masks[nid]
            if mask.shape != h.shape:
                raise ShapeMismatch(f"node {nid!r}: recorded mask {mask.shape} "
                                    f"vs value {h.shape}")
        return h * _leak_factor(mask, lay.leakiness)
    if isinstance(lay, MaxPool):
        (v,) = ins
        stride = lay.stride if lay.stride is not None else lay.ksize
        if state is None:
            values, idx = numerics.maxpool_argmax(v, lay.ksize, stride, lay.padding)
            if sink is not None:
                sink.argmax_indices[nid] = idx
            return values
        idx = state.argmax_indices[nid]
        return np.take(v.reshape(-1), idx)
    if isinstance(lay, Dropout):
        (v,) = ins
        if not lay.training:
            return v
        if state is None:
            keep = dropout_mask(lay.seed, nid, v.shape, lay.rate)
            if sink is not None:
                sink.keep_masks[nid] = keep
        else:
            keep = state.keep_masks[nid]
        return v * (keep / (1.0 - lay.rate))
    if isinstance(lay, BatchNormInference):
        (v,) = ins
        inv = lay.gamma / np.sqrt(lay.running_var + lay.epsilon)
        if bias:
            # same arithmetic as the plain forward pass, term by term
            return lay.gamma * (v - lay.running_mean) / np.sqrt(
                lay.running_var + lay.epsilon) + lay.beta
        return v * inv
    if isinstance(lay, Flatten):
        return ins[0].reshape(-1)
    if isinstance(lay, Add):
        out = ins[0]
        for v in ins[1:]:
            out = out + v
        return out
    if isinstance(lay, Concat):
        return np.concatenate(ins, axis=lay.axis)
    if isinstance(lay, Recurrent):
        (x,) = ins
        hid = lay.w_hidden.shape[0]
        h = np.zeros(hid)
        masks = None if state is None else state.sign_masks[nid]
        recorded = np.empty((lay.steps, hid), dtype=bool) if state is None else None
        for t in range(lay.steps):
            pre = lay.w_hidden @ h + lay.w_input @ x[t]
            if bias:
                pre = pre + lay.bias
            if state is None:
                m = pre >= 0
                recorded[t] = m
            else:
                m = masks[t]
            h = pre * _leak_factor(m, lay.leakiness)
        if sink is not None:
            sink.sign_masks[nid] = recorded
        return h
    raise GraphError(f"node {nid!r}: unknown layer {type(lay).__name__}")


def _evaluate(net: Network, x: np.ndarray, *, state: FrozenState | None,
              record: bool, bias: bool) -> tuple[np.ndarray, dict[str, np.ndarray],
                                                 FrozenState | None]:
    """Single engine behind forward, recording, and frozen replays. All
    of them share the per-layer arithmetic above, so a frozen replay at
    the recording input is bitwise identical to the plain forward."""
    x = as_f64(x)
    if x.shape != tuple(net.input_shape):
        raise ShapeMismatch(f"input shape {x.shape} does not match network "
                            f"input {tuple(net.input_shape)}")
    sink = FrozenState(input=x, outputs={}) if record else None
    values: dict[str, np.ndarray] = {INPUT_ID: x}
    for node in net.nodes:
        missing = [r for r in node.inputs if r not in values]
        if missing:
            raise GraphError(f"node {node.id!r} references {missing[0]!r} before "
                             f"definition")
        values[node.id] = _layer_apply(node, [values[r] for r in node.inputs],
                                       bias=bias, state=state, sink=sink)
    if net.output not in values:
        raise GraphError(f"output node {net.output!r} was never computed")
    if record:
        sink.outputs = {n.id: values[n.id] for n in net.nodes}
    return values[net.output], values, sink


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Plain forward pass."""
    validate(net)
    out, _, _ = _evaluate(net, x, state=None, record=False, bias=True)
    return out


def record_states(net: Network, x: np.ndarray) -> tuple[np.ndarray, FrozenState]:
    """Forward pass that also captures the nonlinearity states and all
    feature maps. The returned output is bitwise equal to forward()."""
    validate(net)
    out, _, st = _evaluate(net, x, state=None, record=True, bias=True)
    return out, st
