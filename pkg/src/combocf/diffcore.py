"""Minimal reverse-mode differentiation and optimisation engine.

Supports exactly the primitives needed to train small branched regression
networks: affine maps, relu/linear activations, inverted dropout, sums and
squared error. A forward pass records closures on a :class:`Tape`; calling
:func:`backward` replays them in reverse, accumulating gradients into the
:class:`ParamStore`. Parameters that never appear on a tape keep a zero
gradient, which is what restricts updates of a treatment arm to the samples
that received that treatment.

Everything is 64-bit. Affine inputs may be vectors ``(in,)`` or matrices
``(in, batch)``; the latter lets callers process groups of samples that
share a network path in one shot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError

CHECKPOINT_FORMAT = "combocf-params"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "linear")


class Param:
    """Named dense array with a same-shaped gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered collection of named parameters.

    :meth:`compact` repacks all values and gradients into one flat buffer
    each (parameters become reshaped views), which lets optimisers and
    snapshots run as single vector operations.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.flat_values: np.ndarray | None = None
        self.flat_grads: np.ndarray | None = None

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} already exists")
        if self.flat_values is not None:
            raise ConfigError("cannot add parameters after compact()")
        p = Param(name, value)
        self._params[name] = p
        return p

    def compact(self) -> None:
        if self.flat_values is not None:
            return
        total = self.n_parameters()
        flat_v = np.empty(total)
        flat_g = np.zeros(total)
        offset = 0
        for p in self._params.values():
            size = p.value.size
            flat_v[offset : offset + size] = p.value.ravel()
            p.value = flat_v[offset : offset + size].reshape(p.value.shape)
            p.grad = flat_g[offset : offset + size].reshape(p.grad.shape)
            offset += size
        self.flat_values = flat_v
        self.flat_grads = flat_g

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self) -> None:
        if self.flat_grads is not None:
            self.flat_grads[...] = 0.0
            return
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def snapshot(self):
        if self.flat_values is not None:
            return self.flat_values.copy()
        return {name: p.value.copy() for name, p in self._params.items()}

    def restore(self, snapshot) -> None:
        if self.flat_values is not None and isinstance(snapshot, np.ndarray):
            self.flat_values[...] = snapshot
            return
        for name, value in snapshot.items():
            self._params[name].value[...] = value

    def to_json_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {"shape": list(p.value.shape), "values": p.value.ravel().tolist()}
                for name, p in self._params.items()
            },
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ParamStore":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError("not a parameter checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
        store = cls()
        for name, entry in d["params"].items():
            value = np.array(entry["values"], dtype=float).reshape(entry["shape"])
            store.add(name, value)
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def glorot_init(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform fan-scaled initialisation for a (fan_out, fan_in) weight."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Node:
    """One intermediate value on the tape."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape):
        self.value = value
        self.grad = None
        self.tape = tape


class Tape:
    """Ordered record of a forward pass; replayed once per backward call."""

    def __init__(self):
        self._ops: list = []
        self._nodes: list[Node] = []

    def _node(self, value) -> Node:
        n = Node(value, self)
        self._nodes.append(n)
        return n

    def __len__(self):
        return len(self._ops)


def constant(tape: Tape, value: np.ndarray) -> Node:
    """Leaf input node (no parents; gradient is accumulated but unused)."""
    return tape._node(np.asarray(value, dtype=float))


def _accumulate(node: Node, g) -> None:
    # Callers hand over freshly built arrays (or views they no longer touch),
    # and repeat contributions rebind rather than mutate, so no copy is made.
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def affine(tape: Tape, w: Param, b: Param, x) -> Node:
    """w @ x + b for a vector x, or w @ X + b[:, None] for a matrix X."""
    x_node = x if isinstance(x, Node) else None
    xv = x.value if x_node is not None else np.asarray(x, dtype=float)
    wv = w.value
    if xv.shape[0] != wv.shape[1]:
        raise DimensionError(f"affine input {xv.shape} incompatible with weight {wv.shape}")
    if xv.ndim == 1:
        out = tape._node(wv @ xv + b.value)

        def _bw(out=out, w=w, b=b, xv=xv, x_node=x_node):
            g = out.grad
            w.grad += np.outer(g, xv)
            b.grad += g
            if x_node is not None:
                _accumulate(x_node, w.value.T @ g)

    else:
        value = wv @ xv
        value += b.value[:, None]
        out = tape._node(value)

        def _bw(out=out, w=w, b=b, xv=xv, x_node=x_node):
            g = out.grad
            w.grad += g @ xv.T
            b.grad += g.sum(axis=1)
            if x_node is not None:
                _accumulate(x_node, w.value.T @ g)

    tape._ops.append(_bw)
    return out


def activation(tape: Tape, kind: str, x: Node) -> Node:
    """Elementwise relu, or the identity for 'linear'."""
    if kind == "linear":
        return x
    if kind != "relu":
        raise ConfigError(f"unknown activation {kind!r}")
    out = tape._node(np.maximum(x.value, 0.0))

    def _bw(out=out, x=x):
        _accumulate(x, out.grad * (x.value > 0.0))

    tape._ops.append(_bw)
    return out


def dropout(tape: Tape, x: Node, rate: float, training: bool, rng: np.random.Generator | None) -> Node:
    """Inverted dropout: zero with probability `rate`, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.value.shape) >= rate) * scale
    out = tape._node(x.value * mask)

    def _bw(out=out, x=x, mask=mask):
        _accumulate(x, out.grad * mask)

    tape._ops.append(_bw)
    return out


def col_slice(tape: Tape, x: Node, start: int, stop: int) -> Node:
    """Columns [start, stop) of a matrix node; gradient scatters back."""
    out = tape._node(x.value[:, start:stop])

    def _bw(out=out, x=x, start=start, stop=stop):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[:, start:stop] += out.grad

    tape._ops.append(_bw)
    return out


def concat_cols(tape: Tape, parts: list[Node]) -> Node:
    """Column-wise concatenation; gradient splits back to the parts."""
    out = tape._node(np.concatenate([p.value for p in parts], axis=1))
    widths = [p.value.shape[1] for p in parts]

    def _bw(out=out, parts=parts, widths=widths):
        offset = 0
        for part, width in zip(parts, widths):
            _accumulate(part, out.grad[:, offset : offset + width])
            offset += width

    tape._ops.append(_bw)
    return out


def add(tape: Tape, a: Node, b: Node) -> Node:
    out = tape._node(a.value + b.value)

    def _bw(out=out, a=a, b=b):
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    tape._ops.append(_bw)
    return out


def scale(tape: Tape, a: Node, factor: float) -> Node:
    out = tape._node(a.value * factor)

    def _bw(out=out, a=a, factor=factor):
        _accumulate(a, out.grad * factor)

    tape._ops.append(_bw)
    return out


def sum_squared_error(tape: Tape, pred: Node, target) -> Node:
    """Scalar sum of squared residuals between pred and a constant target."""
    target = np.asarray(target, dtype=float)
    resid = pred.value - target
    out = tape._node(float(np.sum(resid * resid)))

    def _bw(out=out, pred=pred, resid=resid):
        _accumulate(pred, (2.0 * out.grad) * resid)

    tape._ops.append(_bw)
    return out


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every parameter on the tape.

    Node gradients are reset first, so calling backward twice on the same
    tape (with ParamStore.zero_grad in between) reproduces the gradients.
    """
    if not tape._ops:
        raise StateError("backward called before any forward operation was recorded")
    if loss.tape is not tape:
        raise StateError("loss node does not belong to this tape")
    for n in tape._nodes:
        n.grad = None
    loss.grad = 1.0 if np.isscalar(loss.value) else np.ones_like(loss.value)
    for op in reversed(tape._ops):
        op()


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    """theta <- theta - lr * (grad + weight_decay * theta)."""

    def __init__(self, store: ParamStore, learning_rate: float, weight_decay: float = 0.0):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate {learning_rate} must be > 0")
        if weight_decay < 0:
            raise ConfigError(f"weight decay {weight_decay} must be >= 0")
        self.store = store
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def step(self) -> None:
        lr, wd = self.learning_rate, self.weight_decay
        store = self.store
        if store.flat_values is not None:
            g = store.flat_grads if wd == 0.0 else store.flat_grads + wd * store.flat_values
            store.flat_values -= lr * g
            return
        for p in store:
            g = p.grad if wd == 0.0 else p.grad + wd * p.value
            p.value -= lr * g


class Adam:
    """Adam with coupled L2 (decay added to the gradient); beta1=0.9,
    beta2=0.999, eps=1e-8."""

    def __init__(
        self,
        store: ParamStore,
        learning_rate: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate {learning_rate} must be > 0")
        if weight_decay < 0:
            raise ConfigError(f"weight decay {weight_decay} must be >= 0")
        self.store = store
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._t = 0
        if store.flat_values is not None:
            self._m = {None: np.zeros_like(store.flat_values)}
            self._v = {None: np.zeros_like(store.flat_values)}
            self._scratch = (
                np.empty_like(store.flat_values),
                np.empty_like(store.flat_values),
            )
        else:
            self._m = {p.name: np.zeros_like(p.value) for p in store}
            self._v = {p.name: np.zeros_like(p.value) for p in store}
            self._scratch = None

    def _update(self, value, grad, m, v):
        b1, b2 = self.beta1, self.beta2
        g = grad if self.weight_decay == 0.0 else grad + self.weight_decay * value
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        bias1 = 1.0 - b1**self._t
        bias2 = 1.0 - b2**self._t
        value -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def _update_flat(self, value, grad, m, v):
        # allocation-free variant for the compacted buffer
        b1, b2 = self.beta1, self.beta2
        s1, s2 = self._scratch
        if self.weight_decay == 0.0:
            g = grad
        else:
            np.multiply(value, self.weight_decay, out=s1)
            s1 += grad
            g = s1
        m *= b1
        np.multiply(g, 1.0 - b1, out=s2)
        m += s2
        v *= b2
        np.multiply(g, g, out=s2)
        s2 *= 1.0 - b2
        v += s2
        np.divide(v, 1.0 - b2**self._t, out=s2)
        np.sqrt(s2, out=s2)
        s2 += self.eps
        step_scale = self.learning_rate / (1.0 - b1**self._t)
        np.divide(m, s2, out=s2)
        s2 *= step_scale
        value -= s2

    def step(self) -> None:
        self._t += 1
        store = self.store
        if store.flat_values is not None:
            self._update_flat(store.flat_values, store.flat_grads, self._m[None], self._v[None])
            return
        for p in store:
            self._update(p.value, p.grad, self._m[p.name], self._v[p.name])


def make_optimizer(kind: str, store: ParamStore, learning_rate: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(store, learning_rate, weight_decay)
    if kind == "adam":
        return Adam(store, learning_rate, weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}")
