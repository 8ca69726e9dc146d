"""Dense-tensor compute graph with reverse-mode differentiation.

Everything is float64 numpy under the hood. Ops are recorded define-by-run:
each result keeps references to its parents and a closure that maps the
upstream gradient to per-parent gradients. A :class:`Graph` wraps a Python
function so that a recorded node list can be inspected, evaluated, and
differentiated by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "GradCheckReport",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "reduce_sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "gelu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layernorm",
    "custom_op",
    "backprop",
    "topo_order",
    "forward",
    "backward",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for a primitive."""

    def __init__(self, op: str, detail: str, name: str | None = None):
        self.op = op
        self.node = name
        label = f"{op}[{name}]" if name else op
        super().__init__(f"{label}: {detail}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "parents", "_backward", "index")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "input"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str | None = None) -> Tensor:
    """Record a node whose gradient rule is supplied by the caller.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data, name=name)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in out.parents)
    out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}", name) from None


def add(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b, name)
    return custom_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), name,
    )


def sub(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b, name)
    return custom_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), name,
    )


def mul(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b, name)
    return custom_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), name,
    )


def div(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b, name)
    out = a.data / b.data
    return custom_op(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), name,
    )


def neg(a, name=None) -> Tensor:
    a = as_tensor(a)
    return custom_op("neg", -a.data, (a,), lambda g: (-g,), name)


def power(a, p: float, name=None) -> Tensor:
    a = as_tensor(a)
    return custom_op("pow", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),), name)


def matmul(a, b, name=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}", name)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}", name)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul", str(exc), name) from None

    def _back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op("matmul", out, (a, b), _back, name)


def transpose(a, axes=None, name=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for shape {a.shape}", name)
    inverse = tuple(np.argsort(axes))
    return custom_op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), name)


def reshape(a, shape, name=None) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {tuple(shape)}", name) from None
    return custom_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),), name)


def getitem(a, idx, name=None) -> Tensor:
    """Indexing, slicing and integer-array gathering (backward scatters with add)."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays or ints, not Tensors")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("gather", str(exc), name) from None

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return custom_op("gather", np.array(out, dtype=np.float64), (a,), _back, name)


def concat(tensors: Sequence, axis: int = 0, name=None) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "nothing to concatenate", name)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", str(exc), name) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op("concat", out, ts, _back, name)


def reduce_sum(a, axis=None, keepdims=False, name=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op("sum", out, (a,), _back, name)


def mean(a, axis=None, keepdims=False, name=None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count, name)


def exp(a, name=None) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op("exp", out, (a,), lambda g: (g * out,), name)


def log(a, name=None) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return custom_op("log", out, (a,), lambda g: (g / a.data,), name)


def sqrt(a, name=None) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,), name)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a, name=None) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data**2)
    return custom_op("gelu", a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),), name)


def softmax(a, axis: int = -1, name=None) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", out, (a,), _back, name)


def log_softmax(a, axis: int = -1, name=None) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op("log_softmax", out, (a,), _back, name)


def logsumexp(a, axis: int = -1, keepdims=False, name=None) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(a.data - s),)

    return custom_op("logsumexp", out, (a,), _back, name)


def layernorm(x, gamma, beta, eps: float = 1e-5, name=None) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layernorm", f"affine params {gamma.shape}/{beta.shape} vs feature dim {d}", name)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * rstd
    out = xhat * gamma.data + beta.data

    def _back(g):
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return custom_op("layernorm", out, (x, gamma, beta), _back, name)


def topo_order(roots: Sequence[Tensor]) -> list[Tensor]:
    """Post-order DFS: every parent precedes its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor, accumulate: bool = True) -> None:
    """Propagate d(loss)/d(node) to every leaf with ``requires_grad``.

    Leaf gradients are added to ``.grad`` when ``accumulate`` is set,
    otherwise overwritten.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order([loss])):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            if accumulate and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class Graph:
    """A traced computation.

    ``fn`` receives keyword Tensors and returns either a Tensor (exposed as
    ``"out"``) or a mapping of name to Tensor. Each :func:`forward` call
    re-runs ``fn`` and records the node list in topological order.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], name: str | None = None):
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "graph")
        self.nodes: list[Tensor] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}

    def __repr__(self) -> str:
        return f"Graph({self.name!r}, nodes={len(self.nodes)})"


def forward(graph: Graph, inputs: Mapping[str, object]) -> dict[str, Tensor]:
    bound = {}
    for key, value in inputs.items():
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        t.name = key
        bound[key] = t
    result = graph.fn(**bound)
    outputs = {"out": result} if isinstance(result, Tensor) else dict(result)
    nodes = topo_order(list(outputs.values()))
    for i, node in enumerate(nodes):
        node.index = i
    for node in nodes:
        if any(p.index >= node.index for p in node.parents):
            raise RuntimeError(f"node {node.index} ({node.op}) violates topological order")
    graph.inputs, graph.outputs, graph.nodes = bound, outputs, nodes
    return outputs


def backward(graph: Graph, loss_node: str = "out") -> dict[str, Tensor]:
    if loss_node not in graph.outputs:
        raise KeyError(f"{loss_node!r} is not an output of {graph!r}; evaluate forward first")
    loss = graph.outputs[loss_node]
    if loss.size != 1:
        raise ValueError(f"loss node {loss_node!r} is not scalar (shape {loss.shape})")
    for t in graph.inputs.values():
        t.grad = None
    backprop(loss, accumulate=False)
    return {
        k: Tensor(t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in graph.inputs.items()
        if t.requires_grad
    }


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    loss_node: str = "out",
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() against central differences on every input element.

    ``max_elements`` caps the number of probed elements per input (sampled
    with ``rng``); leave it None for an exhaustive check.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    forward(graph, base)
    analytic = {k: g.data for k, g in backward(graph, loss_node).items()}

    def loss_at(values):
        out = forward(graph, values)[loss_node]
        return float(out.data.reshape(-1)[0])

    report = GradCheckReport(tolerance=tolerance)
    for key, value in base.items():
        flat_ids = np.arange(value.size)
        if max_elements is not None and value.size > max_elements:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_ids = np.sort(gen.choice(value.size, size=max_elements, replace=False))
        worst = 0.0
        for flat in flat_ids:
            pos = np.unravel_index(flat, value.shape)
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[key][pos] += epsilon
            minus[key][pos] -= epsilon
            numeric = (loss_at(plus) - loss_at(minus)) / (2.0 * epsilon)
            a = float(analytic[key][pos])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report.max_rel_error[key] = worst
        if worst >= tolerance:
            report.failures.append(f"{key}: max relative error {worst:.3e} >= {tolerance:g}")
    return report
