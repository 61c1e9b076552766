"""Small reverse-mode differentiation engine for per-pixel MLPs.

Values are float64 numpy arrays. A :class:`Tape` records every operation in
creation order, so reversing the record is a valid topological order for the
backward sweep. All trainable numbers live in one flat vector
(:class:`ModelParams`); networks and plain tensors are views into it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .hsidata import BadMagicError, FormatError, TruncatedError, simplex_project_rows
from .rng import Stream

LEAK = 0.01
HEADS = ("linear", "softmax")
PARAM_MAGIC = b"MLDP"


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetSpec:
    """Fully connected net; leaky-ReLU between layers, ``head`` on the output."""

    widths: tuple
    head: str = "linear"
    name: str = ""

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"a net needs >= 2 positive widths (one layer), got {widths}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        object.__setattr__(self, "widths", widths)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple  # tensor shape; () for networks
    spec: NetSpec | None = None

    @property
    def size(self) -> int:
        return self.spec.n_params if self.spec else int(np.prod(self.shape, dtype=np.int64))


@dataclass
class ModelParams:
    """Flat parameter vector plus a registry of named blocks."""

    values: np.ndarray
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        total = sum(b.size for b in self.blocks.values())
        if self.values.shape != (total,):
            raise ValueError(f"parameter vector has shape {self.values.shape}, registry needs ({total},)")

    @classmethod
    def empty(cls, specs: Sequence[NetSpec] = (), tensors: Sequence[tuple[str, tuple]] = ()):
        blocks, off = {}, 0
        for i, s in enumerate(specs):
            name = s.name or f"net{i}"
            if name in blocks:
                raise ValueError(f"duplicate block name {name!r}")
            blocks[name] = Block(name, off, (), s)
            off += s.n_params
        for name, shape in tensors:
            if name in blocks:
                raise ValueError(f"duplicate block name {name!r}")
            blocks[name] = Block(name, off, tuple(int(d) for d in shape))
            off += blocks[name].size
        return cls(np.zeros(off), blocks)

    @property
    def size(self) -> int:
        return self.values.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), dict(self.blocks))

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=np.float64), dict(self.blocks))

    def tensor(self, name: str) -> np.ndarray:
        b = self.blocks[name]
        if b.spec is not None:
            raise KeyError(f"{name!r} is a network, not a tensor")
        return self.values[b.offset:b.offset + b.size].reshape(b.shape)

    def layers(self, name: str) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views per layer, W shaped (fan_in, fan_out)."""
        b = self.blocks[name]
        if b.spec is None:
            raise KeyError(f"{name!r} is a tensor, not a network")
        out, off = [], b.offset
        for i, o in b.spec.layer_shapes:
            W = self.values[off:off + i * o].reshape(i, o)
            off += i * o
            out.append((W, self.values[off:off + o]))
            off += o
        return out


GradBuffer = np.ndarray


def init_params(specs: Sequence[NetSpec], seed: int,
                tensors: Sequence[tuple[str, tuple]] = ()) -> ModelParams:
    """Glorot-uniform weights, zero biases, zero extra tensors."""
    params = ModelParams.empty(specs, tensors)
    for name, block in params.blocks.items():
        if block.spec is None:
            continue
        for li, (W, _) in enumerate(params.layers(name)):
            lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = Stream(seed, "init", name, li).uniform(W.shape, -lim, lim)
    return params


# --------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "parents", "vjp", "op", "index")

    def __init__(self, value, op, parents=(), vjp=None, index=-1):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.index = index

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAK * x)


class Tape:
    """Records operations; ``grad`` replays them backwards."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, op, parents=(), vjp=None) -> Node:
        node = Node(value, op, parents, vjp, len(self.nodes))
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64), "constant")

    def variable(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64), "variable")

    # elementwise and linear algebra -------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self._push(a.value + b.value, "add", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Node, b: Node) -> Node:
        return self._push(a.value - b.value, "sub", (a, b),
                          lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._push(av * bv, "mul", (a, b),
                          lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))

    def scale(self, a: Node, c: float) -> Node:
        return self._push(a.value * c, "scale", (a,), lambda g: (g * c,))

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._push(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))

    def leaky_relu(self, a: Node) -> Node:
        slope = np.where(a.value > 0, 1.0, LEAK)
        return self._push(a.value * slope, "leaky_relu", (a,), lambda g: (g * slope,))

    def softmax(self, a: Node) -> Node:
        s = softmax_rows(a.value)
        return self._push(s, "softmax", (a,),
                          lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))

    def simplex_project(self, a: Node) -> Node:
        """Row-wise simplex projection.

        The backward pass uses the projection's Jacobian on the active face:
        identity restricted to the support, minus its mean.
        """
        out = simplex_project_rows(a.value)
        mask = (out > 0).astype(np.float64)
        count = mask.sum(axis=-1, keepdims=True)

        def vjp(g):
            gm = g * mask
            return (gm - mask * gm.sum(axis=-1, keepdims=True) / count,)

        return self._push(out, "simplex_project", (a,), vjp)

    def sqrt(self, a: Node) -> Node:
        r = np.sqrt(a.value)
        return self._push(r, "sqrt", (a,), lambda g: (g * 0.5 / r,))

    # reductions and reshaping --------------------------------------------

    def sum(self, a: Node) -> Node:
        shape = a.shape
        return self._push(np.asarray(a.value.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape),))

    def sumsq(self, a: Node) -> Node:
        av = a.value
        return self._push(np.asarray(np.sum(av * av)), "sumsq", (a,), lambda g: (2.0 * g * av,))

    def slice(self, a: Node, start: int, stop: int, shape: tuple) -> Node:
        """Reshaped view of ``a.value.ravel()[start:stop]``."""
        full = a.shape

        def vjp(g):
            out = np.zeros(int(np.prod(full)))
            out[start:stop] = g.ravel()
            return (out.reshape(full),)

        return self._push(a.value.ravel()[start:stop].reshape(shape), "slice", (a,), vjp)

    def index(self, a: Node, i: int) -> Node:
        full = a.shape

        def vjp(g):
            out = np.zeros(full)
            out[i] = g
            return (out,)

        return self._push(a.value[i], "index", (a,), vjp)

    def add_n(self, items: Sequence[Node]) -> Node:
        """Sum of same-shaped nodes, accumulated left to right."""
        total = items[0].value.copy()
        for it in items[1:]:
            total = total + it.value
        return self._push(total, "add_n", tuple(items), lambda g: tuple(g for _ in items))

    # backward -------------------------------------------------------------

    def grad(self, out: Node, wrt: Node) -> np.ndarray:
        """Gradient of the scalar ``out`` with respect to ``wrt``."""
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
        for node in reversed(self.nodes[:out.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.vjp is None:
                if node is wrt:
                    grads[node.index] = g
                    break
                continue
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"non-finite value produced by {node.op}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing into {node.op}")
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(f"non-finite gradient produced by the backward pass of {node.op}")
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        g = grads.get(wrt.index)
        if g is None:
            return np.zeros_like(wrt.value)
        return np.array(g, dtype=np.float64).reshape(wrt.shape)


def mlp(tape: Tape, theta: Node, params: ModelParams, name: str, x: Node) -> Node:
    """Apply network ``name`` to the rows of ``x`` inside ``tape``."""
    b = params.blocks[name]
    spec = b.spec
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"{name}: input width {x.shape[-1]} != {spec.widths[0]}")
    off = b.offset
    h = x
    n_layers = len(spec.layer_shapes)
    for li, (i, o) in enumerate(spec.layer_shapes):
        W = tape.slice(theta, off, off + i * o, (i, o))
        off += i * o
        bias = tape.slice(theta, off, off + o, (o,))
        off += o
        h = tape.add(tape.matmul(h, W), bias)
        if li < n_layers - 1:
            h = tape.leaky_relu(h)
    return tape.softmax(h) if spec.head == "softmax" else h


def forward(params: ModelParams, net_id: str, x) -> np.ndarray:
    """Evaluate one network on a vector or on the rows of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    theta = tape.variable(params.values)
    xin = tape.constant(np.atleast_2d(x))
    out = mlp(tape, theta, params, net_id, xin).value
    return out[0] if x.ndim == 1 else out


def backward(params: ModelParams, loss_graph: Callable[[Tape, Node], Node]) -> tuple[float, GradBuffer]:
    """Run ``loss_graph(tape, theta)`` and return ``(loss, d loss / d params)``."""
    tape = Tape()
    theta = tape.variable(params.values)
    loss = loss_graph(tape, theta)
    return float(loss.value), tape.grad(loss, theta)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def opt_step(params: ModelParams, grad: np.ndarray, state: AdamState, lr: float,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """One bias-corrected adaptive-moment step; returns new params and state."""
    if grad.shape != params.values.shape:
        raise ValueError(f"gradient shape {grad.shape} != params {params.values.shape}")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.with_values(new), AdamState(m, v, step)


# --------------------------------------------------------------------------
# checkpoint


def save_params(path, params: ModelParams) -> None:
    """MLDP checkpoint: magic, u32 block count, per-block spec, float64 payload.

    Block spec: u32 kind (0 net, 1 tensor), u32 head index, u32 name length,
    utf-8 name, u32 ndims, ndims x u32 (widths for nets, shape for tensors).
    """
    out = bytearray(PARAM_MAGIC)
    out += struct.pack("<I", len(params.blocks))
    for name, b in params.blocks.items():
        dims = b.spec.widths if b.spec else b.shape
        kind = 0 if b.spec else 1
        head = HEADS.index(b.spec.head) if b.spec else 0
        raw = name.encode()
        out += struct.pack("<III", kind, head, len(raw)) + raw
        out += struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    out += params.values.astype("<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAM_MAGIC:
        raise BadMagicError(f"bad magic in parameter file: {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise TruncatedError("truncated parameter header")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    specs, tensors, order = [], [], []
    for _ in range(count):
        kind, head, nlen = take("<III")
        if pos + nlen > len(raw):
            raise TruncatedError("truncated parameter header")
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (nd,) = take("<I")
        dims = take(f"<{nd}I")
        if kind == 0:
            if head >= len(HEADS):
                raise FormatError(f"unknown head code {head}")
            specs.append(NetSpec(dims, HEADS[head], name))
        elif kind == 1:
            tensors.append((name, dims))
        else:
            raise FormatError(f"unknown block kind {kind}")
        order.append(name)
    params = ModelParams.empty(specs, tensors)
    if list(params.blocks) != order:
        # tensors after nets is the only layout save_params produces
        raise FormatError("blocks must list networks before tensors")
    need = pos + 8 * params.size
    if len(raw) < need:
        raise TruncatedError(f"truncated parameter payload: need {need} bytes, have {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{len(raw) - need} trailing bytes after parameter payload")
    vals = np.frombuffer(raw, dtype="<f8", offset=pos).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise FormatError("parameter payload contains non-finite values")
    return params.with_values(vals)
