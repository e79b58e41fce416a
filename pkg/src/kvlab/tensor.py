"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tape holds nodes in insertion order; insertion order is the topological
order, and backward walks it exactly once in reverse. Each primitive builds
one node and caches whatever its backward rule needs in a closure.

Broadcasting is restricted to leading-batch expansion: two shapes are
compatible for elementwise ops iff they are equal or one is a suffix of the
other (the scalar shape () is a suffix of everything). Anything else needs an
explicit reshape.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, InvalidMaskError


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Node:
    """One tape entry: a value plus the rule for pushing gradients to parents.

    Holds its tape weakly: the tape owns the nodes, never the reverse, so a
    dropped tape frees the whole graph by reference count alone instead of
    waiting on the cycle collector (tapes are tens of MB per training step).
    """

    __slots__ = ("_tape", "idx", "value", "parents", "grad_fn", "trainable")

    def __init__(self, tape, idx, value, parents=(), grad_fn=None, trainable=False):
        self._tape = weakref.ref(tape)
        self.idx = idx
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.trainable = trainable

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise ContractError("node used after its tape was dropped")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"Node(idx={self.idx}, {kind}, shape={self.value.shape})"


class Tape:
    """Append-only list of nodes; single-threaded by contract."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value, parents=(), grad_fn=None, trainable=False) -> Node:
        node = Node(self, len(self.nodes), value, parents, grad_fn, trainable)
        self.nodes.append(node)
        return node

    def leaf(self, value, trainable: bool = False) -> Node:
        return self._record(_as_f64(value), trainable=trainable)

    def const(self, value) -> Node:
        return self.leaf(value, trainable=False)


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ConfigurationError("operands live on different tapes")
    return tape


def _suffix_broadcast(a_shape, b_shape):
    """Return the output shape, or raise. One shape must be a suffix of the other."""
    if a_shape == b_shape:
        return a_shape
    if len(a_shape) >= len(b_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return a_shape
    if len(b_shape) > len(a_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return b_shape
    raise ConfigurationError(
        f"shapes {a_shape} and {b_shape} are not equal and neither is a suffix of the other"
    )


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # collapse the leading broadcast axes back onto the smaller operand
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _suffix_broadcast(a.value.shape, b.value.shape)
    out = a.value + b.value

    def grad_fn(g):
        return _reduce_to(g, a.value.shape), _reduce_to(g, b.value.shape)

    return tape._record(out, (a, b), grad_fn)


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _suffix_broadcast(a.value.shape, b.value.shape)
    out = a.value * b.value
    av, bv = a.value, b.value

    def grad_fn(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return tape._record(out, (a, b), grad_fn)


def sub(a: Node, b: Node) -> Node:
    """Convenience composite: a + (-1)*b."""
    return add(a, scale(b, -1.0))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    out = a.value * c

    def grad_fn(g):
        return (g * c,)

    return a.tape._record(out, (a,), grad_fn)


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ConfigurationError(f"matmul needs >=2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ConfigurationError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    if av.ndim == bv.ndim:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ConfigurationError(f"matmul batch dims differ: {av.shape} @ {bv.shape}")
    elif bv.ndim != 2:
        raise ConfigurationError(
            f"matmul supports equal batch dims or a 2-D right operand, got {av.shape} @ {bv.shape}"
        )
    out = np.matmul(av, bv)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        if av.ndim == bv.ndim:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
        else:
            # right operand was broadcast across the leading batch
            k, m = bv.shape
            gb = np.matmul(av.reshape(-1, k).T, g.reshape(-1, m))
        return ga, gb

    return tape._record(out, (a, b), grad_fn)


def transpose_last2(a: Node) -> Node:
    if a.value.ndim < 2:
        raise ConfigurationError("transpose_last2 needs a >=2-D operand")
    out = np.swapaxes(a.value, -1, -2)

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return a.tape._record(np.ascontiguousarray(out), (a,), grad_fn)


def transpose_axes(a: Node, perm: Sequence[int]) -> Node:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.value.ndim)):
        raise ConfigurationError(f"perm {perm} is not a permutation of axes of {a.value.shape}")
    inv = tuple(np.argsort(perm))
    out = np.transpose(a.value, perm)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return a.tape._record(np.ascontiguousarray(out), (a,), grad_fn)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    src = a.value.shape
    out = a.value.reshape(shape)

    def grad_fn(g):
        return (g.reshape(src),)

    return a.tape._record(out, (a,), grad_fn)


def sigmoid(a: Node) -> Node:
    # numerically stable two-branch form
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return a.tape._record(out, (a,), grad_fn)


def log(a: Node) -> Node:
    out = np.log(a.value)
    av = a.value

    def grad_fn(g):
        return (g / av,)

    return a.tape._record(out, (a,), grad_fn)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def grad_fn(g):
        return (g * out,)

    return a.tape._record(out, (a,), grad_fn)


def clamp01(a: Node) -> Node:
    """Clamp to [0,1]; gradient is identity strictly inside, zero elsewhere."""
    av = a.value
    out = np.clip(av, 0.0, 1.0)
    inside = (av > 0.0) & (av < 1.0)

    def grad_fn(g):
        return (g * inside,)

    return a.tape._record(out, (a,), grad_fn)


def sum_all(a: Node) -> Node:
    out = np.asarray(a.value.sum())
    shp = a.value.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shp).copy(),)

    return a.tape._record(out, (a,), grad_fn)


def rms_normalize(a: Node, eps: float = 1e-6) -> Node:
    """x / sqrt(mean(x^2, last axis) + eps). No learned gain inside."""
    x = a.value
    n = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    out = x / r

    def grad_fn(g):
        dot = np.sum(g * x, axis=-1, keepdims=True)
        return (g / r - x * dot / (n * r ** 3),)

    return a.tape._record(out, (a,), grad_fn)


def row_softmax_with_additive_mask(scores: Node, mask: Node) -> Node:
    """Softmax along the last axis of scores + mask.

    Mask entries are 0 (allowed) or -inf (forbidden); forbidden positions come
    out exactly 0. A fully forbidden row raises InvalidMaskError.
    """
    tape = _same_tape(scores, mask)
    _suffix_broadcast(scores.value.shape, mask.value.shape)
    masked = scores.value + mask.value
    if masked.ndim < 1:
        raise ConfigurationError("softmax needs at least one axis")
    m = masked.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise InvalidMaskError("softmax row with every position masked")
    # -inf - m stays -inf, and exp maps it to an exact 0
    masked -= m
    np.exp(masked, out=masked)
    masked /= masked.sum(axis=-1, keepdims=True)
    out = masked

    def grad_fn(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        gs = g - dot
        gs *= out
        return _reduce_to(gs, scores.value.shape), None

    return tape._record(out, (scores, mask), grad_fn)


def embedding_lookup(table: Node, ids) -> Node:
    """Select rows of a 2-D table by integer id; gradient scatter-adds."""
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise ConfigurationError("embedding_lookup expects a 2-D table")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.value.shape[0]):
        raise ConfigurationError("embedding id out of range")
    out = table.value[ids]
    tshape = table.value.shape

    def grad_fn(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids, g)
        return (gt,)

    return table.tape._record(out, (table,), grad_fn)


def gather_rows(a: Node, indices) -> Node:
    """Select along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise ConfigurationError("gather index out of range")
    out = a.value[idx]
    shp = a.value.shape

    def grad_fn(g):
        ga = np.zeros(shp)
        np.add.at(ga, idx, g)
        return (ga,)

    return a.tape._record(out, (a,), grad_fn)


def concat_last_axis(parts: Sequence[Node]) -> Node:
    parts = tuple(parts)
    if not parts:
        raise ConfigurationError("concat of zero arrays")
    tape = _same_tape(*parts)
    lead = parts[0].value.shape[:-1]
    for p in parts:
        if p.value.shape[:-1] != lead:
            raise ConfigurationError("concat operands differ outside the last axis")
    widths = [p.value.shape[-1] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=-1)
    splits = np.cumsum(widths)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=-1))

    return tape._record(out, parts, grad_fn)


def cross_entropy_mean(logits: Node, targets) -> Node:
    """Mean negative log-likelihood of integer targets under row softmax."""
    t = np.asarray(targets)
    x = logits.value
    if x.ndim != 2:
        raise ConfigurationError("cross_entropy_mean expects (rows, vocab) logits")
    if t.shape != (x.shape[0],):
        raise ConfigurationError("targets must be one id per logit row")
    if t.size == 0:
        raise ConfigurationError("cross_entropy_mean on zero rows")
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    out = np.asarray(np.mean(lse - x[np.arange(t.size), t]))
    n = t.size

    def grad_fn(g):
        p = np.exp(x - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return logits.tape._record(out, (logits,), grad_fn)


def backward(tape: Tape, loss: Node) -> dict[Node, np.ndarray]:
    """Gradients of a scalar loss for every trainable leaf on the tape."""
    if loss.value.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.idx: np.ones(())}
    out: dict[Node, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.idx, None)
        if g is None:
            continue
        if node.trainable and not node.parents:
            out[node] = g
        if node.grad_fn is None:
            continue
        parent_grads = node.grad_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(parent.idx)
            grads[parent.idx] = pg if acc is None else acc + pg
    return out


def finite_diff_check(function: Callable[[Tape, Node], Node], point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    `function(tape, x)` must build a scalar loss from the single input node.
    Central differences are taken coordinate by coordinate at `point`.
    """
    point = _as_f64(point)
    tape = Tape()
    x = tape.leaf(point, trainable=True)
    loss = function(tape, x)
    auto = backward(tape, loss)[x]

    def value_at(p):
        t = Tape()
        return float(function(t, t.leaf(p, trainable=True)).value)

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        delta = np.zeros_like(flat)
        delta[i] = step
        hi = value_at((flat + delta).reshape(point.shape))
        lo = value_at((flat - delta).reshape(point.shape))
        fd = (hi - lo) / (2.0 * step)
        ad = auto.reshape(-1)[i]
        err = abs(ad - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
