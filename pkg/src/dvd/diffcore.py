"""Small reverse-mode differentiation engine for fixed MLP shapes.

Values are dense 2-D numpy arrays (rows x cols). Parameters live in float32;
the same code runs in float64 when a network is cast with ``MlpNet.astype``,
which is how the finite-difference oracle evaluates gradients.

Typical use::

    tape = GradTape()
    out = forward(net, batch, tape)          # records on the tape
    grads = backward(tape, dloss_dout)       # reverse sweep
    sgd_step(net, grads, lr=3e-3, momentum=0.9)

Losses that combine several networks are written against ``Node`` values
with the op functions below (``matmul``, ``add``, ``softmax`` ...) and
reduced with ``tape.backward(loss_node)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import FrozenError, NumericError, ParameterError, ShapeError, StateError

ACTIVATIONS = ("identity", "relu", "softmax")
DTYPE = np.float32


def tensor2(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` to a finite 2-D array (a single vector becomes one row)."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite entries in tensor")
    return arr


# ---------------------------------------------------------------------------
# Networks


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (1, fan_out)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )


class MlpNet:
    """Fully connected network with per-parameter momentum buffers.

    Used for the encoder, the classifier head and the drift network.
    """

    def __init__(self, layers: list[Layer], frozen: bool = False):
        if not layers:
            raise ParameterError("an MlpNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers
        self.velocity = [
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers
        ]
        self.frozen = frozen

    @classmethod
    def init(cls, widths, activations, rng: np.random.Generator, dtype=DTYPE):
        """Glorot-uniform weights, zero biases.

        ``widths`` lists every layer width including input and output, so a
        net with ``len(widths) - 1`` layers; ``activations`` has one entry per
        layer.
        """
        if len(activations) != len(widths) - 1:
            raise ParameterError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
            layers.append(Layer(w, np.zeros((1, fan_out), dtype=dtype), act))
        return cls(layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend((l.weight, l.bias))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def copy(self, frozen: bool | None = None) -> "MlpNet":
        net = MlpNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            frozen=self.frozen if frozen is None else frozen,
        )
        return net

    def astype(self, dtype) -> "MlpNet":
        net = MlpNet(
            [
                Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation)
                for l in self.layers
            ],
            frozen=self.frozen,
        )
        return net

    def check_mutable(self):
        if self.frozen:
            raise FrozenError("network is frozen; parameters may not change")

    def __call__(self, batch) -> np.ndarray:
        """Tape-free forward pass."""
        return forward(self, batch)

    def __repr__(self):
        dims = [self.in_width] + [l.weight.shape[1] for l in self.layers]
        acts = ",".join(l.activation for l in self.layers)
        return f"MlpNet({dims}, [{acts}], frozen={self.frozen})"


# ---------------------------------------------------------------------------
# Tape


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "tape")

    def __init__(self, tape, value, requires_grad=False, parents=(), backward_fn=None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Records operations in execution order; ``backward`` replays them reversed."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: Node | None = None
        self._params: dict[int, tuple[MlpNet, list[tuple[Node, Node]]]] = {}
        self._done = False

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value))

    def watch(self, value) -> Node:
        """Leaf whose gradient is wanted (e.g. an input batch)."""
        return Node(self, np.asarray(value), requires_grad=True)

    def record(self, value, parents, backward_fn) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, requires, parents, backward_fn if requires else None)
        if requires:
            self.nodes.append(node)
        return node

    def params(self, net: MlpNet) -> list[tuple[Node, Node]]:
        """Leaf nodes for ``net``'s parameters, shared across repeated calls."""
        entry = self._params.get(id(net))
        if entry is None:
            trainable = not net.frozen
            leaves = [
                (Node(self, l.weight, trainable), Node(self, l.bias, trainable))
                for l in net.layers
            ]
            entry = (net, leaves)
            self._params[id(net)] = entry
        return entry[1]

    def backward(self, root: Node, upstream=None) -> "GradSet":
        if self._done:
            raise StateError("tape already consumed by a backward pass")
        if upstream is None:
            if root.value.size != 1:
                raise ShapeError("upstream gradient required for non-scalar root")
            upstream = np.ones_like(root.value)
        upstream = np.asarray(upstream, dtype=root.value.dtype)
        if upstream.shape != root.value.shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} != output shape {root.value.shape}"
            )
        root.grad = upstream.copy()
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            in_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, in_grads):
                if parent.requires_grad and g is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g
        self._done = True
        return GradSet(self)


class GradSet:
    """Gradients produced by one backward sweep."""

    def __init__(self, tape: GradTape):
        self._tape = tape

    def __getitem__(self, net: MlpNet) -> list[tuple[np.ndarray, np.ndarray]]:
        entry = self._tape._params.get(id(net))
        if entry is None:
            return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers]
        out = []
        for (wn, bn), layer in zip(entry[1], net.layers):
            gw = wn.grad if wn.grad is not None else np.zeros_like(layer.weight)
            gb = bn.grad if bn.grad is not None else np.zeros_like(layer.bias)
            out.append((gw, gb))
        return out

    def wrt(self, node: Node) -> np.ndarray:
        return node.grad if node.grad is not None else np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# Ops on nodes


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Node, b: Node) -> Node:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Node, b: Node) -> Node:
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Node, c: float) -> Node:
    c = a.value.dtype.type(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Node) -> Node:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def concat(a: Node, b: Node) -> Node:
    """Column-wise concatenation."""
    k = a.value.shape[1]
    return a.tape.record(
        np.concatenate([a.value, b.value], axis=1), (a, b), lambda g: (g[:, :k], g[:, k:])
    )


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0).astype(a.value.dtype), (a,), lambda g: (g * mask,))


def softmax(a: Node) -> Node:
    s = softmax_rows(a.value)
    return a.tape.record(
        s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    )


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2 * av * g,))


def row_sum(a: Node) -> Node:
    shape = a.value.shape
    return a.tape.record(
        a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def total(a: Node) -> Node:
    shape = a.value.shape
    return a.tape.record(
        a.value.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g.item(), dtype=a.value.dtype),)
    )


def mean(a: Node) -> Node:
    return scale(total(a), 1.0 / a.value.size)


def masked_logsumexp(a: Node, mask: np.ndarray) -> Node:
    """Row-wise log-sum-exp over entries where ``mask`` is true."""
    x = np.where(mask, a.value, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(x - m), 0)
    s = e.sum(axis=1, keepdims=True)
    w = (e / s).astype(a.value.dtype)
    out = (m + np.log(s)).astype(a.value.dtype)
    return a.tape.record(out, (a,), lambda g: (w * g,))


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Gradient at the logits is ``(softmax - onehot) / n``.
    """
    z = logits.value
    n = z.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(z)
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype).reshape(1, 1)

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g.item() / n),)

    return logits.tape.record(loss, (logits,), back)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Network forward / backward / update


def apply(net: MlpNet, x: Node) -> Node:
    """Record ``net`` applied to node ``x``."""
    if x.value.shape[1] != net.in_width:
        raise ShapeError(f"input width {x.value.shape[1]} != net input width {net.in_width}")
    h = x
    for (wn, bn), layer in zip(x.tape.params(net), net.layers):
        h = add(matmul(h, wn), bn)
        if layer.activation == "relu":
            h = relu(h)
        elif layer.activation == "softmax":
            h = softmax(h)
    if not np.all(np.isfinite(h.value)):
        raise NumericError("non-finite network output")
    return h


def forward(net: MlpNet, batch, tape: GradTape | None = None) -> np.ndarray:
    """Forward pass. With a tape, intermediates are recorded for ``backward``."""
    if isinstance(batch, Node):
        if tape is not None and batch.tape is not tape:
            raise StateError("input node belongs to a different tape")
        out = apply(net, batch)
        out.tape.output = out
        return out.value
    x = tensor2(batch, dtype=net.dtype)
    if tape is None:
        if x.shape[1] != net.in_width:
            raise ShapeError(f"input width {x.shape[1]} != net input width {net.in_width}")
        h = x
        for layer in net.layers:
            h = h @ layer.weight + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0)
            elif layer.activation == "softmax":
                h = softmax_rows(h)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite network output")
        return h
    out = apply(net, tape.constant(x))
    tape.output = out
    return out.value


def backward(tape: GradTape, upstream) -> GradSet:
    """Reverse sweep from the last ``forward`` output, seeded with dLoss/dOutput."""
    if tape.output is None:
        raise StateError("backward called before any forward on this tape")
    return tape.backward(tape.output, upstream)


def sgd_step(net: MlpNet, grads, lr: float, momentum: float) -> MlpNet:
    """In-place SGD with momentum: ``v = momentum*v + g``; ``p -= lr*v``."""
    net.check_mutable()
    if lr <= 0:
        raise ParameterError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ParameterError("momentum must lie in [0, 1)")
    if isinstance(grads, GradSet):
        grads = grads[net]
    if len(grads) != len(net.layers):
        raise ShapeError("gradient list does not match network layers")
    dt = net.dtype.type
    for layer, (vw, vb), (gw, gb) in zip(net.layers, net.velocity, grads):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        vw *= dt(momentum)
        vw += gw
        vb *= dt(momentum)
        vb += gb
        layer.weight -= dt(lr) * vw
        layer.bias -= dt(lr) * vb
    return net


def finite_diff_check(net: MlpNet, loss_fn, batch, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(net, batch, tape)`` must return a scalar ``Node``. Both routes run
    on a float64 copy of ``net``; the error per parameter entry is
    ``|analytic - central| / (|central| + 1e-12)``.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    probe = net.astype(np.float64)
    probe.frozen = False

    def value(t=None):
        t = t or GradTape()
        loss = loss_fn(probe, batch, t)
        v = float(np.asarray(loss.value).reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError("loss is not finite")
        return loss, t, v

    loss, tape, _ = value()
    analytic = tape.backward(loss)[probe]
    worst = 0.0
    for layer, (gw, gb) in zip(probe.layers, analytic):
        for param, grad in ((layer.weight, gw), (layer.bias, gb)):
            for idx in np.ndindex(param.shape):
                orig = param[idx]
                param[idx] = orig + eps
                plus = value()[2]
                param[idx] = orig - eps
                minus = value()[2]
                param[idx] = orig
                central = (plus - minus) / (2 * eps)
                err = abs(grad[idx] - central) / (abs(central) + 1e-12)
                worst = max(worst, err)
    return worst
