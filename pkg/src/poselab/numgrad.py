"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every network and loss in the package is written against the primitives in
``OPS``.  A :class:`Tape` records one forward pass; :func:`backward` walks it
in reverse creation order and returns gradients for the parameters that were
registered on the tape with :meth:`Tape.watch`.

Shapes may carry leading batch axes.  Broadcasting is limited to two cases:
an operand whose shape is a trailing suffix of the other's (bias-add on the
last axis, or a shared unbatched weight in ``add``/``sub``/``matmul``), and
``scalar-mul`` by a Python float.  Everything else must be made explicit with
``gather-rows``, ``reshape`` or ``row-scale``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

BLOCK_PSI = "psi"
BLOCK_OMEGA = "omega"


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class NumericalError(ArithmeticError):
    """A tensor holds NaN or Inf."""


def branch_block(g: int) -> str:
    """Block label of correspondence branch ``g`` (1-based)."""
    return f"phi_{g}"


def is_valid_block(label: str) -> bool:
    if label in (BLOCK_PSI, BLOCK_OMEGA):
        return True
    if label.startswith("phi_"):
        tail = label[4:]
        return tail.isdigit() and int(tail) >= 1
    return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """A value on a tape.  ``data`` is a float64 ndarray."""

    __slots__ = ("data", "tape", "node", "requires_grad")

    def __init__(self, data: np.ndarray, tape: "Tape", node: int, requires_grad: bool):
        self.data = data
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    # Operator sugar; all of it routes through ``apply``.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass(slots=True)
class TapeNode:
    kind: str
    inputs: tuple[int, ...]
    output: Tensor
    saved: Any = None
    attrs: dict = field(default_factory=dict)


class Tape:
    """Records the ops of one forward pass.

    Nodes are appended in creation order, which is a topological order of the
    graph.  ``debug=True`` checks every op output for NaN/Inf.
    """

    def __init__(self, debug: bool = False):
        self.nodes: list[TapeNode] = []
        self.params: dict[str, Tensor] = {}
        self.debug = debug

    def _leaf(self, data, requires_grad: bool, kind: str) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, f"{kind} created at node {len(self.nodes)}")
        t = Tensor(arr, self, len(self.nodes), requires_grad)
        self.nodes.append(TapeNode(kind, (), t))
        return t

    def constant(self, data) -> Tensor:
        return self._leaf(data, False, "constant")

    def param(self, name: str, data) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = self._leaf(data, True, "param")
        self.nodes[t.node].attrs["name"] = name
        self.params[name] = t
        return t

    def watch(self, store: "ParamStore") -> dict[str, Tensor]:
        """Put every parameter of ``store`` on the tape as a leaf."""
        return {name: self.param(name, store[name]) for name in store.names()}

    def kink_signature(self) -> str:
        """Digest of every discrete choice made on this tape.

        Covers relu / max-with-zero activation masks, min-reduce argmins and
        gather-rows index arrays (kNN selections are data dependent).  Two
        forward passes with equal signatures are on the same smooth piece of
        the loss surface.
        """
        h = hashlib.sha1()
        for node in self.nodes:
            if node.kind in ("relu", "max-with-zero"):
                h.update(np.packbits(node.output.data > 0).tobytes())
            elif node.kind == "min-reduce":
                h.update(np.ascontiguousarray(node.saved).tobytes())
            elif node.kind == "gather-rows":
                h.update(np.ascontiguousarray(node.attrs["index"]).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------- #
# Op registry
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Op:
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(g, xs, out, saved, attrs, needs) -> list of input grads (or None)
    backward: Callable[..., list]


OPS: dict[str, Op] = {}


def _register(kind: str):
    def deco(pair):
        fwd, bwd = pair()
        OPS[kind] = Op(fwd, bwd)
        return pair

    return deco


def _shapes(kind: str, xs: Sequence[np.ndarray]) -> str:
    return f"{kind}: shapes " + ", ".join(str(tuple(x.shape)) for x in xs)


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum leading axes of ``g`` away so it matches a suffix ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


@_register("matmul")
def _():
    def fwd(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(_shapes("matmul", xs))
        la, lb = a.shape[:-2], b.shape[:-2]
        if la and lb and la != lb:
            raise ShapeError(_shapes("matmul", xs))
        if b.ndim == 2 and a.ndim > 2:
            # one GEMM over all leading rows
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1]), None
        return a @ b, None

    def bwd(g, xs, out, saved, attrs, needs):
        a, b = xs
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            if needs[0]:
                ga = (g2 @ b.T).reshape(a.shape)
            if needs[1]:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return [ga, gb]
        if needs[0]:
            ga = _reduce_to(g @ _swap(b), a.shape)
        if needs[1]:
            gb = _reduce_to(_swap(a) @ g, b.shape)
        return [ga, gb]

    return fwd, bwd


def _broadcast_pair(kind: str, xs):
    a, b = xs
    if a.shape == b.shape or _is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape):
        return
    raise ShapeError(_shapes(kind, xs))


@_register("add")
def _():
    def fwd(xs, attrs):
        _broadcast_pair("add", xs)
        return xs[0] + xs[1], None

    def bwd(g, xs, out, saved, attrs, needs):
        return [_reduce_to(g, xs[0].shape) if needs[0] else None,
                _reduce_to(g, xs[1].shape) if needs[1] else None]

    return fwd, bwd


@_register("sub")
def _():
    def fwd(xs, attrs):
        _broadcast_pair("sub", xs)
        return xs[0] - xs[1], None

    def bwd(g, xs, out, saved, attrs, needs):
        return [_reduce_to(g, xs[0].shape) if needs[0] else None,
                -_reduce_to(g, xs[1].shape) if needs[1] else None]

    return fwd, bwd


@_register("mul")
def _():
    def fwd(xs, attrs):
        if xs[0].shape != xs[1].shape:
            raise ShapeError(_shapes("mul", xs))
        return xs[0] * xs[1], None

    def bwd(g, xs, out, saved, attrs, needs):
        return [g * xs[1] if needs[0] else None, g * xs[0] if needs[1] else None]

    return fwd, bwd


@_register("scalar-mul")
def _():
    def fwd(xs, attrs):
        return xs[0] * attrs["c"], None

    def bwd(g, xs, out, saved, attrs, needs):
        return [g * attrs["c"]]

    return fwd, bwd


@_register("row-scale")
def _():
    # x (..., n) times s (...) broadcast along the last axis of x
    def fwd(xs, attrs):
        x, s = xs
        if x.shape[:-1] != s.shape:
            raise ShapeError(_shapes("row-scale", xs))
        return x * s[..., None], None

    def bwd(g, xs, out, saved, attrs, needs):
        x, s = xs
        return [g * s[..., None] if needs[0] else None,
                (g * x).sum(axis=-1) if needs[1] else None]

    return fwd, bwd


def _hinge_op():
    def fwd(xs, attrs):
        return np.maximum(xs[0], 0.0), None

    def bwd(g, xs, out, saved, attrs, needs):
        return [g * (xs[0] > 0)]

    return fwd, bwd


_register("relu")(_hinge_op)
_register("max-with-zero")(_hinge_op)


@_register("exp")
def _():
    def fwd(xs, attrs):
        return np.exp(xs[0]), None

    def bwd(g, xs, out, saved, attrs, needs):
        return [g * out]

    return fwd, bwd


@_register("sqrt")
def _():
    def fwd(xs, attrs):
        if (xs[0] < 0).any():
            raise ShapeError("sqrt: negative input")
        return np.sqrt(xs[0]), None

    def bwd(g, xs, out, saved, attrs, needs):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return [np.where(out > 0, g / (2.0 * safe), 0.0)]

    return fwd, bwd


@_register("reciprocal")
def _():
    def fwd(xs, attrs):
        return 1.0 / xs[0], None

    def bwd(g, xs, out, saved, attrs, needs):
        return [-g * out * out]

    return fwd, bwd


@_register("row-softmax")
def _():
    def fwd(xs, attrs):
        x = xs[0]
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, xs, out, saved, attrs, needs):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]

    return fwd, bwd


@_register("layer-norm")
def _():
    # inputs: x, optionally gain and bias (both shape (n,))
    def fwd(xs, attrs):
        x = xs[0]
        for p in xs[1:]:
            if p.shape != x.shape[-1:]:
                raise ShapeError(_shapes("layer-norm", xs))
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        xhat = xc * inv
        y = xhat
        if len(xs) > 1:
            y = y * xs[1]
        if len(xs) > 2:
            y = y + xs[2]
        return y, (xhat, inv)

    def bwd(g, xs, out, saved, attrs, needs):
        xhat, inv = saved
        grads = [None] * len(xs)
        gx = g * xs[1] if len(xs) > 1 else g
        if needs[0]:
            n = xhat.shape[-1]
            grads[0] = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        if len(xs) > 1 and needs[1]:
            grads[1] = _reduce_to(g * xhat, xs[1].shape)
        if len(xs) > 2 and needs[2]:
            grads[2] = _reduce_to(g, xs[2].shape)
        return grads

    return fwd, bwd


@_register("concat")
def _():
    def fwd(xs, attrs):
        lead = xs[0].shape[:-1]
        if any(x.shape[:-1] != lead for x in xs):
            raise ShapeError(_shapes("concat", xs))
        return np.concatenate(xs, axis=-1), None

    def bwd(g, xs, out, saved, attrs, needs):
        grads, start = [], 0
        for x, need in zip(xs, needs):
            stop = start + x.shape[-1]
            grads.append(g[..., start:stop] if need else None)
            start = stop
        return grads

    return fwd, bwd


@_register("slice-last")
def _():
    def fwd(xs, attrs):
        start, stop = attrs["start"], attrs["stop"]
        if not 0 <= start < stop <= xs[0].shape[-1]:
            raise ShapeError(_shapes("slice-last", xs) + f" [{start}:{stop}]")
        return xs[0][..., start:stop], None

    def bwd(g, xs, out, saved, attrs, needs):
        full = np.zeros_like(xs[0])
        full[..., attrs["start"]:attrs["stop"]] = g
        return [full]

    return fwd, bwd


@_register("gather-rows")
def _():
    # x (..., n, d); index (m,) shared or (batch..., m) per leading item
    def fwd(xs, attrs):
        x = xs[0]
        idx = attrs["index"]
        if x.ndim < 2:
            raise ShapeError(_shapes("gather-rows", xs))
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
            raise ShapeError(_shapes("gather-rows", xs) + " index out of range")
        if idx.ndim == 1:
            return x[..., idx, :], None
        if idx.shape[:-1] != x.shape[:-2]:
            raise ShapeError(_shapes("gather-rows", xs) + f" index {idx.shape}")
        return np.take_along_axis(x, idx[..., None], axis=-2), None

    def bwd(g, xs, out, saved, attrs, needs):
        x = xs[0]
        idx = attrs["index"]
        n, d = x.shape[-2], x.shape[-1]
        lead = int(np.prod(x.shape[:-2], dtype=np.int64))
        m = idx.shape[-1]
        if idx.ndim == 1:
            flat = np.broadcast_to(idx, (lead, m))
        else:
            flat = idx.reshape(lead, m)
        offs = (np.arange(lead)[:, None] * n + flat).ravel()
        gx = np.zeros((lead * n, d))
        np.add.at(gx, offs, g.reshape(lead * m, d))
        return [gx.reshape(x.shape)]

    return fwd, bwd


@_register("reshape")
def _():
    def fwd(xs, attrs):
        shape = tuple(attrs["shape"])
        if int(np.prod(shape)) != xs[0].size:
            raise ShapeError(_shapes("reshape", xs) + f" -> {shape}")
        return xs[0].reshape(shape), None

    def bwd(g, xs, out, saved, attrs, needs):
        return [g.reshape(xs[0].shape)]

    return fwd, bwd


@_register("transpose")
def _():
    def fwd(xs, attrs):
        axes = attrs.get("axes")
        if axes is None:
            return _swap(xs[0]), None
        if sorted(axes) != list(range(xs[0].ndim)):
            raise ShapeError(_shapes("transpose", xs) + f" axes {axes}")
        return np.transpose(xs[0], axes), None

    def bwd(g, xs, out, saved, attrs, needs):
        axes = attrs.get("axes")
        if axes is None:
            return [_swap(g)]
        return [np.transpose(g, np.argsort(axes))]

    return fwd, bwd


@_register("mean-reduce")
def _():
    def fwd(xs, attrs):
        return xs[0].mean(axis=attrs["axis"]), None

    def bwd(g, xs, out, saved, attrs, needs):
        x = xs[0]
        axis = attrs["axis"]
        n = x.size // max(out.size, 1) if axis is None else x.shape[axis]
        ge = g if axis is None else np.expand_dims(g, axis)
        return [np.broadcast_to(ge / n, x.shape).copy()]

    return fwd, bwd


@_register("sum-reduce")
def _():
    def fwd(xs, attrs):
        return xs[0].sum(axis=attrs.get("axis")), None

    def bwd(g, xs, out, saved, attrs, needs):
        axis = attrs.get("axis")
        ge = g if axis is None else np.expand_dims(g, axis)
        return [np.broadcast_to(ge, xs[0].shape).copy()]

    return fwd, bwd


@_register("squared-l2")
def _():
    def fwd(xs, attrs):
        x = xs[0]
        return (x * x).sum(axis=attrs.get("axis")), None

    def bwd(g, xs, out, saved, attrs, needs):
        axis = attrs.get("axis")
        ge = g if axis is None else np.expand_dims(g, axis)
        return [2.0 * ge * xs[0]]

    return fwd, bwd


@_register("smooth-l1")
def _():
    # elementwise; inputs x, target
    def fwd(xs, attrs):
        x, t = xs
        if x.shape != t.shape:
            raise ShapeError(_shapes("smooth-l1", xs))
        beta = attrs["beta"]
        d = x - t
        a = np.abs(d)
        return np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta), d

    def bwd(g, xs, out, saved, attrs, needs):
        d = saved
        beta = attrs["beta"]
        gd = g * np.where(np.abs(d) < beta, d / beta, np.sign(d))
        return [gd if needs[0] else None, -gd if needs[1] else None]

    return fwd, bwd


@_register("pairwise-sq-distances")
def _():
    # a (..., m, k), b (..., n, k) -> (..., m, n)
    def fwd(xs, attrs):
        a, b = xs
        if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(_shapes("pairwise-sq-distances", xs))
        aa = (a * a).sum(-1)[..., :, None]
        bb = (b * b).sum(-1)[..., None, :]
        return aa + bb - 2.0 * (a @ _swap(b)), None

    def bwd(g, xs, out, saved, attrs, needs):
        a, b = xs
        ga = gb = None
        if needs[0]:
            ga = 2.0 * (g.sum(axis=-1)[..., None] * a - g @ b)
        if needs[1]:
            gb = 2.0 * (g.sum(axis=-2)[..., None] * b - _swap(g) @ a)
        return [ga, gb]

    return fwd, bwd


@_register("min-reduce")
def _():
    def fwd(xs, attrs):
        axis = attrs["axis"]
        arg = np.argmin(xs[0], axis=axis)
        out = np.take_along_axis(xs[0], np.expand_dims(arg, axis), axis=axis)
        return np.squeeze(out, axis=axis), arg

    def bwd(g, xs, out, saved, attrs, needs):
        axis = attrs["axis"]
        gx = np.zeros_like(xs[0])
        np.put_along_axis(gx, np.expand_dims(saved, axis), np.expand_dims(g, axis), axis=axis)
        return [gx]

    return fwd, bwd


@_register("cross")
def _():
    def fwd(xs, attrs):
        a, b = xs
        if a.shape != b.shape or a.shape[-1] != 3:
            raise ShapeError(_shapes("cross", xs))
        return np.cross(a, b), None

    def bwd(g, xs, out, saved, attrs, needs):
        a, b = xs
        return [np.cross(b, g) if needs[0] else None, np.cross(g, a) if needs[1] else None]

    return fwd, bwd


# --------------------------------------------------------------------------- #
# Applying ops
# --------------------------------------------------------------------------- #

def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it on their tape."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ValueError(f"{kind}: inputs live on different tapes")
    xs = [t.data for t in inputs]
    out, saved = op.forward(xs, attrs)
    node_id = len(tape.nodes)
    if tape.debug:
        _check_finite(out, f"output of {kind} (node {node_id})")
    result = Tensor(np.asarray(out, dtype=np.float64), tape, node_id,
                    any(t.requires_grad for t in inputs))
    tape.nodes.append(TapeNode(kind, tuple(t.node for t in inputs), result, saved, attrs))
    return result


def _lift(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else like.tape.constant(x)


def matmul(a: Tensor, b) -> Tensor:
    return apply("matmul", [a, _lift(b, a)])


def add(a: Tensor, b) -> Tensor:
    return apply("add", [a, _lift(b, a)])


def sub(a: Tensor, b) -> Tensor:
    return apply("sub", [a, _lift(b, a)])


def mul(a: Tensor, b) -> Tensor:
    return apply("mul", [a, _lift(b, a)])


def scale(a: Tensor, c: float) -> Tensor:
    return apply("scalar-mul", [a], c=float(c))


def row_scale(x: Tensor, s) -> Tensor:
    return apply("row-scale", [x, _lift(s, x)])


def relu(x: Tensor) -> Tensor:
    return apply("relu", [x])


def max_with_zero(x: Tensor) -> Tensor:
    return apply("max-with-zero", [x])


def exp(x: Tensor) -> Tensor:
    return apply("exp", [x])


def sqrt(x: Tensor) -> Tensor:
    return apply("sqrt", [x])


def reciprocal(x: Tensor) -> Tensor:
    return apply("reciprocal", [x])


def softmax(x: Tensor) -> Tensor:
    return apply("row-softmax", [x])


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    ins = [x] + [p for p in (gain, bias) if p is not None]
    if bias is not None and gain is None:
        raise ValueError("layer-norm bias requires a gain")
    return apply("layer-norm", ins)


def concat(xs: Sequence[Tensor]) -> Tensor:
    return apply("concat", list(xs))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return apply("slice-last", [x], start=int(start), stop=int(stop))


def gather_rows(x: Tensor, index) -> Tensor:
    return apply("gather-rows", [x], index=np.asarray(index, dtype=np.int64))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply("reshape", [x], shape=tuple(int(s) for s in shape))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply("transpose", [x], axes=None if axes is None else tuple(axes))


def mean(x: Tensor, axis: int | None) -> Tensor:
    return apply("mean-reduce", [x], axis=axis)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    return apply("sum-reduce", [x], axis=axis)


def squared_l2(x: Tensor, axis: int | None = None) -> Tensor:
    return apply("squared-l2", [x], axis=axis)


def smooth_l1(x: Tensor, target, beta: float = 1.0) -> Tensor:
    if beta <= 0:
        raise ValueError("smooth-l1 beta must be positive")
    return apply("smooth-l1", [x, _lift(target, x)], beta=float(beta))


def pairwise_sq_distances(a: Tensor, b) -> Tensor:
    return apply("pairwise-sq-distances", [a, _lift(b, a)])


def min_reduce(x: Tensor, axis: int) -> Tensor:
    return apply("min-reduce", [x], axis=axis)


def cross(a: Tensor, b: Tensor) -> Tensor:
    return apply("cross", [a, b])


def norm(x: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm; zero gradient at the origin."""
    return sqrt(squared_l2(x, axis=axis))


# --------------------------------------------------------------------------- #
# Backward
# --------------------------------------------------------------------------- #

class Gradients(dict):
    """Parameter name -> gradient array, plus the names the loss reached."""

    reachable: frozenset = frozenset()


def backward(loss: Tensor) -> Gradients:
    """d(loss)/d(param) for every parameter watched on ``loss``'s tape.

    Parameters the loss does not depend on get exact zero arrays and are left
    out of ``Gradients.reachable``.
    """
    if loss.data.size != 1 or loss.data.ndim not in (0, 1):
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss.tape
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if not node.inputs:
            continue
        ins = [nodes[i].output for i in node.inputs]
        needs = [t.requires_grad for t in ins]
        if not any(needs):
            continue
        xs = [t.data for t in ins]
        in_grads = OPS[node.kind].backward(g, xs, node.output.data, node.saved, node.attrs, needs)
        for t, need, gi in zip(ins, needs, in_grads):
            if not need or gi is None:
                continue
            prev = grads.get(t.node)
            grads[t.node] = gi if prev is None else prev + gi
    out = Gradients()
    reached = []
    for name, t in tape.params.items():
        g = grads.get(t.node)
        if g is None:
            out[name] = np.zeros_like(t.data)
        else:
            out[name] = np.array(g, dtype=np.float64).reshape(t.data.shape)
            reached.append(name)
    out.reachable = frozenset(reached)
    return out


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #

class ParamStore:
    """Named parameters, each tagged with exactly one block label.

    Holds Adam first/second-moment buffers and a per-parameter step count
    alongside each tensor.  Iteration order is insertion order, which fixes
    the layout of flattened block vectors.
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}
        self._block: dict[str, str] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, data, block: str) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not is_valid_block(block):
            raise ValueError(f"bad block label {block!r} for {name!r}")
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, f"parameter {name!r}")
        self._data[name] = arr
        self._block[name] = block
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._data[name].shape:
            raise ShapeError(f"{name}: {arr.shape} != {self._data[name].shape}")
        self._data[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def names(self, block: str | None = None) -> list[str]:
        if block is None:
            return list(self._data)
        return [n for n in self._data if self._block[n] == block]

    def block_of(self, name: str) -> str:
        return self._block[name]

    def blocks(self) -> list[str]:
        seen: dict[str, None] = {}
        for b in self._block.values():
            seen.setdefault(b, None)
        return list(seen)

    def size(self, block: str | None = None) -> int:
        return sum(self._data[n].size for n in self.names(block))

    def flatten(self, grads: Mapping[str, np.ndarray], names: Iterable[str]) -> np.ndarray:
        parts = [np.ravel(grads[n]) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n in self._data:
            other.add(n, self._data[n], self._block[n])
            other.m[n] = self.m[n].copy()
            other.v[n] = self.v[n].copy()
            other.steps[n] = self.steps[n]
        return other

    def round_to_f32(self) -> None:
        for n, arr in self._data.items():
            self._data[n] = arr.astype(np.float32).astype(np.float64)


# --------------------------------------------------------------------------- #
# Finite differences
# --------------------------------------------------------------------------- #

def finite_difference_gradient(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    eps: float = 1e-5,
    coords: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    With ``coords`` (name -> flat indices) only those entries are estimated
    and each result is a 1-D array aligned with the given indices.
    ``params`` is restored before returning.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out: dict[str, np.ndarray] = {}
    names = params.names() if coords is None else list(coords)
    for name in names:
        base = params[name]
        work = base.copy()
        flat = work.reshape(-1)
        idx = np.arange(flat.size) if coords is None else np.asarray(coords[name])
        est = np.empty(len(idx))
        try:
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                params[name] = work
                fp = f(params)
                flat[i] = orig - eps
                params[name] = work
                fm = f(params)
                flat[i] = orig
                est[k] = (fp - fm) / (2.0 * eps)
        finally:
            params[name] = base
        out[name] = est.reshape(base.shape) if coords is None else est
    return out


@dataclass
class GradCheckReport:
    checked: int
    excluded: int
    max_rel_err: float
    failures: list[tuple[str, int, float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_close(analytic: float, numeric: float, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    diff = abs(analytic - numeric)
    return diff <= atol or diff <= rtol * max(abs(analytic), abs(numeric))


def gradcheck(
    build: Callable[[Tape], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    coords: Mapping[str, np.ndarray] | None = None,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare ``backward`` against central differences on ``build``'s loss.

    ``build(tape)`` must watch ``params`` on the tape and return a scalar.
    A coordinate is excluded when either perturbed evaluation lands on a
    different smooth piece than the base point (see ``Tape.kink_signature``).
    """
    tape = Tape()
    loss = build(tape)
    analytic = backward(loss)
    base_sig = tape.kink_signature()

    if coords is None:
        coords = {n: np.arange(params[n].size) for n in params.names()}

    checked = excluded = 0
    worst = 0.0
    failures = []
    for name, idx in coords.items():
        base = params[name]
        work = base.copy()
        flat = work.reshape(-1)
        try:
            for i in idx:
                orig = flat[i]
                vals, sigs = [], []
                for delta in (eps, -eps):
                    flat[i] = orig + delta
                    params[name] = work
                    t = Tape()
                    vals.append(build(t).item())
                    sigs.append(t.kink_signature())
                flat[i] = orig
                if sigs[0] != base_sig or sigs[1] != base_sig:
                    excluded += 1
                    continue
                numeric = (vals[0] - vals[1]) / (2.0 * eps)
                a = float(analytic[name].reshape(-1)[i])
                checked += 1
                scale_ = max(abs(a), abs(numeric))
                if scale_ > 0:
                    worst = max(worst, abs(a - numeric) / scale_ if abs(a - numeric) > atol else 0.0)
                if not grad_close(a, numeric, rtol, atol):
                    failures.append((name, int(i), a, numeric))
        finally:
            params[name] = base
    return GradCheckReport(checked, excluded, worst, failures)


def sample_coords(params: ParamStore, per_param: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Up to ``per_param`` random flat indices from each parameter."""
    out = {}
    for n in params.names():
        size = params[n].size
        k = min(per_param, size)
        out[n] = np.sort(rng.choice(size, size=k, replace=False))
    return out


def kink_distance(tape: Tape) -> float:
    """Smallest distance of any relu / max-with-zero input to its kink."""
    best = math.inf
    for node in tape.nodes:
        if node.kind in ("relu", "max-with-zero"):
            x = tape.nodes[node.inputs[0]].output.data
            if x.size:
                best = min(best, float(np.abs(x).min()))
    return best
