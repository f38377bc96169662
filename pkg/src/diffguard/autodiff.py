"""Reverse-mode automatic differentiation on float64 numpy storage.

The engine is deliberately small: a `Tensor` wraps an ndarray plus the local
backward rules of the operation that produced it.  Backward rules are written
in terms of tensor operations themselves, so running backpropagation with
`create_graph=True` yields gradients that are again differentiable.  That
property is what lets an attacker differentiate through a purification chain
whose update rule already contains classifier gradients.

Conventions:
  * all data is float64; integer and bool inputs are converted on entry,
  * gradients accumulate; callers zero them explicitly,
  * any operation producing NaN or infinity raises `NonFiniteError`,
  * graph recording is global state toggled by `no_grad` / `enable_grad`;
    with recording off, evaluation stores no history and memory stays flat.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "silu",
    "square",
    "tensor_sum",
    "tensor_mean",
    "affine",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "kl_divergence",
    "grads",
    "GradGraph",
    "evaluate",
    "backpropagate",
    "input_gradient",
    "finite_difference_gradient",
]


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or infinite values."""


_GRAD_MODE: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_mode", default=True)


class _GradMode:
    def __init__(self, enabled: bool):
        self._enabled = enabled
        self._token = None

    def __enter__(self):
        self._token = _GRAD_MODE.set(self._enabled)
        return self

    def __exit__(self, *exc):
        _GRAD_MODE.reset(self._token)
        return False


def no_grad() -> _GradMode:
    """Context manager that disables graph recording."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    """Context manager that re-enables graph recording."""
    return _GradMode(True)


def is_grad_enabled() -> bool:
    return _GRAD_MODE.get()


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")


class Tensor:
    """A float64 array plus the backward rules of the op that produced it.

    Leaf tensors are built directly from data; set `requires_grad=True` on a
    leaf to make downstream results track it.  Intermediate tensors carry
    `_parents` / `_vjps` and are tracked automatically.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_error()

    def _item_error(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut from the graph."""
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- gradient entry points ---------------------------------------------

    def backward(self, cotangent=None) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable leaf."""
        cot = _default_cotangent(self, cotangent)
        order, cots = _backprop(self, cot, create_graph=False)
        for node in order:
            if node.requires_grad and not node._parents:
                g = cots.get(id(node))
                if g is None:
                    continue
                if node.grad is None:
                    node.grad = g.data.copy()
                else:
                    node.grad = node.grad + g.data

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _result(data: np.ndarray, op: str, links: list) -> Tensor:
    """Build an op result; record backward links only when grad mode is on."""
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    if _GRAD_MODE.get() and links:
        out._parents = tuple(parent for parent, _ in links)
        out._vjps = tuple(vjp for _, vjp in links)
    else:
        out._parents = ()
        out._vjps = ()
    return out


def _links(*pairs) -> list:
    """Keep (parent, vjp) pairs only for parents that are tracked."""
    return [(p, v) for p, v in pairs if _tracked(p)]


def _attach(result: Tensor, links: list) -> Tensor:
    """Attach backward links after the fact, for ops whose vjps close over
    the result tensor itself."""
    if _GRAD_MODE.get() and links:
        result._parents = tuple(p for p, _ in links)
        result._vjps = tuple(v for _, v in links)
    return result


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast cotangent back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tensor_sum(g, axis=tuple(range(extra)))
    kept = tuple(
        i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1
    )
    if kept:
        g = tensor_sum(g, axis=kept, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- primitive operations ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _result(out, "add", _links(
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, "neg", _links((a, lambda g: neg(g))))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _result(out, "mul", _links(
        (a, lambda g: _unbroadcast(mul(g, b), a.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.shape)),
    ))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    # numpy's warning is redundant with the NonFiniteError raised below
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    result = _result(out_data, "div", [])
    return _attach(result, _links(
        (a, lambda g: _unbroadcast(div(g, b), a.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, result), b)), b.shape)),
    ))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _result(out, "matmul", _links(
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    return _result(a.data.T.copy(), "transpose", _links((a, lambda g: transpose(g))))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    old = a.shape
    return _result(out.copy(), "reshape", _links((a, lambda g: reshape(g, old))))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    links = []
    offset = 0
    for p in parts:
        extent = p.shape[axis]
        start = offset
        if _tracked(p):
            links.append((p, lambda g, s=start, e=start + extent: slice_axis(g, axis, s, e)))
        offset += extent
    return _result(out, "concat", links)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    out = a.data[tuple(index)].copy()
    shape = a.shape

    def vjp(g):
        return _embed_slice(g, shape, axis, start, stop)

    return _result(out, "slice", _links((a, vjp)))


def _embed_slice(g, shape: tuple, axis: int, start: int, stop: int) -> Tensor:
    """Place `g` into a zero tensor of `shape` along `axis`; adjoint of slice."""
    g = _as_tensor(g)
    out = np.zeros(shape, dtype=np.float64)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    out[tuple(index)] = g.data
    return _result(out, "embed", _links((g, lambda h: slice_axis(h, axis, start, stop))))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    result = _result(out_data, "exp", [])
    return _attach(result, _links((a, lambda g: mul(g, result))))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, "log", _links((a, lambda g: div(g, a))))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    result = _result(out_data, "sigmoid", [])
    return _attach(result, _links((a, lambda g: mul(g, mul(result, sub(1.0, result))))))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _result(np.maximum(a.data, 0.0), "relu", _links((a, lambda g: mul(g, mask))))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return mul(a, a)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kd_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g):
        expanded = reshape(g, kd_shape) if g.shape != kd_shape else g
        return mul(expanded, Tensor(np.ones(in_shape)))

    return _result(np.asarray(out), "sum", _links((a, vjp)))


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axis]))
    return div(tensor_sum(a, axis=axis, keepdims=keepdims), float(count))


def affine(x, weight, bias) -> Tensor:
    """x @ weight + bias for a 2-d batch."""
    return add(matmul(x, weight), bias)


def softmax(a, axis: int = -1) -> Tensor:
    """Row-stable softmax; the max shift is treated as a constant."""
    a = _as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tensor_sum(e, axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = sub(a, shift)
    return sub(z, log(tensor_sum(exp(z), axis=axis, keepdims=True)))


def _one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"labels must be 1-d, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= class_count:
        raise ValueError(f"label out of range for {class_count} classes")
    out = np.zeros((labels.shape[0], class_count), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels.

    Returns the mean (default) or sum over batch rows.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (batch, classes), got shape {logits.shape}")
    onehot = Tensor(_one_hot(labels, logits.shape[1]))
    picked = tensor_sum(mul(onehot, log_softmax(logits)), axis=1)
    total = neg(tensor_sum(picked))
    if reduction == "mean":
        return div(total, float(logits.shape[0]))
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction '{reduction}'")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)) per row, reduced over rows."""
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ValueError(
            f"logit shapes must match and be 2-d, got {p_logits.shape} vs {q_logits.shape}"
        )
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    per_row = tensor_sum(mul(exp(lp), sub(lp, lq)), axis=1)
    if reduction == "mean":
        return tensor_mean(per_row)
    if reduction == "sum":
        return tensor_sum(per_row)
    raise ValueError(f"unknown reduction '{reduction}'")


# -- backpropagation ----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """All tensors reachable from `root`, dependencies before dependents."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _default_cotangent(output: Tensor, cotangent) -> Tensor:
    if cotangent is None:
        return Tensor(np.ones_like(output.data))
    cot = _as_tensor(cotangent)
    if cot.shape != output.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match output {output.shape}")
    return cot


def _backprop(output: Tensor, cotangent: Tensor, create_graph: bool):
    """Propagate `cotangent` from `output`; each node is visited once."""
    order = _topo_order(output)
    cots: dict[int, Tensor] = {id(output): cotangent}
    mode = enable_grad() if create_graph else no_grad()
    with mode:
        for node in reversed(order):
            cot = cots.get(id(node))
            if cot is None or not node._vjps:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contribution = vjp(cot)
                existing = cots.get(id(parent))
                cots[id(parent)] = contribution if existing is None else add(existing, contribution)
    return order, cots


def grads(
    output: Tensor,
    wrt: Sequence[Tensor],
    cotangent=None,
    create_graph: bool = False,
) -> list:
    """Gradients of `output` with respect to each tensor in `wrt`.

    Leaves' `.grad` fields are left untouched.  With `create_graph=True` the
    returned tensors carry their own backward rules, so they can be
    differentiated again.
    """
    cot = _default_cotangent(output, cotangent)
    _, cots = _backprop(output, cot, create_graph=create_graph)
    results = []
    for w in wrt:
        g = cots.get(id(w))
        results.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return results


# -- explicit graph wrapper ---------------------------------------------------


class GradGraph:
    """A function from input tensors to one output tensor, with gradient access.

    `evaluate` marks the inputs as differentiable, runs the function, and
    retains the result so that `backpropagate` and `input_gradient` can reuse
    the recorded history.
    """

    def __init__(self, function: Callable, input_shapes: Sequence | None = None):
        self.function = function
        self.input_shapes = [tuple(s) for s in input_shapes] if input_shapes is not None else None
        self._inputs: list | None = None
        self._output: Tensor | None = None

    def evaluate(self, inputs: Sequence[Tensor]) -> Tensor:
        inputs = [_as_tensor(t) for t in inputs]
        if self.input_shapes is not None:
            if len(inputs) != len(self.input_shapes):
                raise ValueError(
                    f"expected {len(self.input_shapes)} inputs, got {len(inputs)}"
                )
            for t, s in zip(inputs, self.input_shapes):
                if t.shape != s:
                    raise ValueError(f"input shape {t.shape} does not match declared {s}")
        for t in inputs:
            if not t._parents:
                t.requires_grad = True
        with enable_grad():
            out = self.function(*inputs)
        self._inputs = inputs
        self._output = _as_tensor(out)
        return self._output

    def backpropagate(self, cotangent=None) -> None:
        """Push a cotangent through the last evaluation into leaf `.grad`s."""
        if self._output is None:
            raise RuntimeError("backpropagate called before evaluate")
        self._output.backward(cotangent)

    def input_gradient(self, input_tensor: Tensor, scalar_output_selector: Callable | None = None) -> Tensor:
        """d(selector(output)) / d(input_tensor), leaving parameter grads alone."""
        if self._output is None or self._inputs is None or all(
            input_tensor is not t for t in self._inputs
        ):
            self.evaluate([input_tensor])
        out = self._output
        scalar = scalar_output_selector(out) if scalar_output_selector is not None else out
        scalar = _as_tensor(scalar)
        if scalar.size != 1:
            raise ValueError(
                f"selected output must be a scalar, got shape {scalar.shape}"
            )
        (g,) = grads(scalar, [input_tensor])
        return g


def evaluate(graph: GradGraph, inputs: Sequence[Tensor]) -> Tensor:
    return graph.evaluate(inputs)


def backpropagate(graph: GradGraph, cotangent=None) -> None:
    graph.backpropagate(cotangent)


def input_gradient(graph: GradGraph, input_tensor: Tensor, scalar_output_selector=None) -> Tensor:
    return graph.input_gradient(input_tensor, scalar_output_selector)


def finite_difference_gradient(function: Callable, x: Tensor, step: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar-valued function at `x`.

    Used as the reference oracle for the analytic backward rules.  The
    function is treated as a black box; in particular it may take gradients
    internally, so no grad-mode is imposed here.
    """
    x = _as_tensor(x)
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value_at(arr: np.ndarray) -> float:
        result = function(Tensor(arr.reshape(base.shape)))
        result = result.item() if isinstance(result, Tensor) else float(result)
        return result

    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = value_at(base)
        flat[i] = saved - step
        down = value_at(base)
        flat[i] = saved
        out[i] = (up - down) / (2.0 * step)
    return Tensor(out.reshape(base.shape))
