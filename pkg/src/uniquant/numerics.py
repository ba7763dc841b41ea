"""Small reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations needed to push a block reconstruction loss
back through the quantizers are provided. There is no implicit
broadcasting: per-group scalars are widened with :func:`expand`, and the
only built-in broadcast is the bias add inside :func:`affine`.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Node:
    """A value in the differentiation graph.

    ``parents`` holds ``(node, vjp)`` pairs where ``vjp`` maps the incoming
    gradient of this node to a gradient contribution for that parent.
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "ste")

    def __init__(self, value, parents=(), op="const", requires_grad=False, ste=False):
        self.value = as_tensor(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)
        self.ste = ste

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.array(seed, dtype=np.float64)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64)
                else:
                    parent.grad = parent.grad + contrib


def parameter(value) -> Node:
    return Node(value, op="param", requires_grad=True)


def constant(value) -> Node:
    return Node(value, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _same_shape(a: Node, b: Node, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return Node(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)], "add")


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return Node(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)], "sub")


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return Node(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)], "mul")


def div(a: Node, b: Node) -> Node:
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return Node(out, [(a, lambda g: g / bv), (b, lambda g: -g * out / bv)], "div")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, [(a, lambda g: g * out)], "exp")


def expand(a: Node, shape) -> Node:
    """Widen size-1 axes of ``a`` to ``shape``; backward sums them back."""
    shape = tuple(shape)
    if len(shape) != a.value.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    return Node(np.broadcast_to(a.value, shape),
                [(a, lambda g: g.sum(axis=axes, keepdims=True))], "expand")


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))], "reshape")


def concat_cols(parts: list[Node]) -> Node:
    """Concatenate 2-D nodes along the last axis."""
    if len(parts) == 1:
        return parts[0]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    parents = [(p, (lambda g, lo=lo, hi=hi: g[:, lo:hi])) for p, lo, hi in zip(parts, bounds[:-1], bounds[1:])]
    return Node(np.concatenate([p.value for p in parts], axis=1), parents, "concat")


def code_matvec(codes, alpha: Node) -> Node:
    """Batched ``C @ alpha``: codes (n, g, k) constant, alpha (n, k) -> (n, g)."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 3 or codes.shape[0] != alpha.shape[0] or codes.shape[2] != alpha.shape[1]:
        raise ShapeError(f"code_matvec: codes {codes.shape} vs alpha {alpha.shape}")
    out = np.einsum("ngk,nk->ng", codes, alpha.value)
    return Node(out, [(alpha, lambda g: np.einsum("ng,ngk->nk", g, codes))], "code_matvec")


def affine(x: Node, weight: Node, bias: Node) -> Node:
    """``x @ weight.T + bias`` with x (n, d), weight (m, d), bias (m,)."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} incompatible with weight {weight.shape}")
    xv, wv = x.value, weight.value
    return Node(
        xv @ wv.T + bias.value,
        [(x, lambda g: g @ wv), (weight, lambda g: g.T @ xv), (bias, lambda g: g.sum(axis=0))],
        "affine",
    )


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_value(v: np.ndarray) -> np.ndarray:
    return 0.5 * v * (1.0 + erf(v * _SQRT_HALF))


def gelu(a: Node) -> Node:
    v = a.value
    cdf = 0.5 * (1.0 + erf(v * _SQRT_HALF))
    deriv = cdf + v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return Node(v * cdf, [(a, lambda g: g * deriv)], "gelu")


def frobenius_sq(a: Node, b: Node) -> Node:
    """Sum of squared differences, a scalar node."""
    _same_shape(a, b, "frobenius_sq")
    diff = a.value - b.value
    return Node(np.sum(diff * diff), [(a, lambda g: 2.0 * g * diff), (b, lambda g: -2.0 * g * diff)], "frob")


def total(nodes: list[Node]) -> Node:
    """Sum of scalar nodes."""
    parents = [(n, lambda g: g) for n in nodes]
    return Node(sum(float(n.value) for n in nodes), parents, "total")


def ste_passthrough(discrete, surrogate: Node, mask) -> Node:
    """Forward ``discrete``; backward hands ``grad * mask`` to ``surrogate``."""
    discrete = np.asarray(discrete, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if discrete.shape != surrogate.shape or mask.shape != surrogate.shape:
        raise ShapeError(
            f"ste_passthrough: discrete {discrete.shape}, surrogate {surrogate.shape}, mask {mask.shape}"
        )
    return Node(discrete, [(surrogate, lambda g: g * mask)], "ste", ste=True)
