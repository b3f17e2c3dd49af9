"""Dense f64 tensors with tape-based reverse-mode autodiff.

The op set is deliberately closed (see PRIMITIVES): enough for the patch
encoder and both training losses, nothing more. No broadcasting beyond
scalar-tensor, no views; every op materializes its output.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf


class ShapeMismatchError(ValueError):
    """Raised when an op's input shapes do not conform to its contract."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op receives non-finite input."""


class GraphError(RuntimeError):
    """Raised for backward() misuse (non-scalar loss, loss off-graph)."""


_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks on all inputs."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """A dense row-major float64 array plus gradient bookkeeping.

    `grad` accumulates additively across backward() calls until
    `zero_grad()`. `name` identifies leaf parameters in gradient maps.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: "Node | None" = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def param_id(self) -> str:
        return self.name if self.name is not None else f"tensor@{id(self):x}"

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Node:
    """One recorded op: inputs, output, and the local backward rule."""

    __slots__ = ("op", "inputs", "output", "bwd", "graph")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 bwd: Callable[[np.ndarray], tuple], graph: "Graph"):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd
        self.graph = graph


class Graph:
    """A tape of nodes in construction (= topological) order.

    Use as a context manager; ops record themselves on the innermost
    active graph when any input is gradient-tracked. With no active
    graph, ops run forward-only.
    """

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    @staticmethod
    def active() -> "Graph | None":
        return Graph._stack[-1] if Graph._stack else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _check_finite(op: str, inputs: Iterable[Tensor]) -> None:
    if not _DEBUG:
        return
    for i, t in enumerate(inputs):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite values in input {i}")


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            bwd: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    g = Graph.active()
    if g is not None and any(_tracked(t) for t in inputs):
        node = Node(op, inputs, out, bwd, g)
        out.node = node
        g.nodes.append(node)
    return out


def _require_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeMismatchError(f"{op}: expected 2-D input, got shape {t.shape}")


def _ew_shapes(op: str, a: Tensor, b: Tensor) -> None:
    # equal shapes, or one side scalar-shaped (size 1)
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    # gradient for a scalar-shaped operand broadcast across g
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=np.float64)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("add", a, b)
    _check_finite("add", (a, b))
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, g)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("sub", a, b)
    _check_finite("sub", (a, b))
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(a.shape, g), _reduce_to(b.shape, -g)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _ew_shapes("mul", a, b)
    _check_finite("mul", (a, b))
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _reduce_to(a.shape, g * bd), _reduce_to(b.shape, g * ad)

    return _record("mul", (a, b), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_finite("matmul", (a, b))
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), out, bwd)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    _check_finite("transpose", (a,))

    def bwd(g):
        return (g.T,)

    return _record("transpose", (a,), a.data.T.copy(), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=int)) != a.size:
        raise ShapeMismatchError(f"reshape: cannot reshape {a.shape} to {shape}")
    _check_finite("reshape", (a,))
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", (a,), a.data.reshape(shape).copy(), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    nd = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != nd:
            raise ShapeMismatchError(
                f"concat: rank mismatch {t.shape} vs {tensors[0].shape}")
    _check_finite("concat", tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd)


def reduce_mean(a: Tensor) -> Tensor:
    _check_finite("reduce_mean", (a,))
    n = a.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return (np.full(a.shape, float(g) / n),)

    return _record("reduce_mean", (a,), out, bwd)


def reduce_sum(a: Tensor) -> Tensor:
    _check_finite("reduce_sum", (a,))
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.full(a.shape, float(g)),)

    return _record("reduce_sum", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", (a,))
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) gelu."""
    _check_finite("gelu", (a,))
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", (a,))
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    _check_finite("log", (a,))
    x = a.data
    out = np.log(x)

    def bwd(g):
        return (g / x,)

    return _record("log", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", (a,))
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (a,), out, bwd)


def softmax_rows(a: Tensor) -> Tensor:
    _require_2d("softmax_rows", a)
    _check_finite("softmax_rows", (a,))
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_rows", (a,), out, bwd)


def layer_norm(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise normalization to mean 0 / variance 1; affine is the caller's job."""
    _require_2d("layer_norm", a)
    _check_finite("layer_norm", (a,))
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bwd(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * out).mean(axis=1, keepdims=True)
        return ((g - gm - out * gy) * inv,)

    return _record("layer_norm", (a,), out, bwd)


_EPS_NORM = 1e-12


def l2_normalize_rows(a: Tensor) -> Tensor:
    _require_2d("l2_normalize_rows", a)
    _check_finite("l2_normalize_rows", (a,))
    x = a.data
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    ng = n + _EPS_NORM
    out = x / ng

    def bwd(g):
        ns = np.maximum(n, _EPS_NORM)
        dot = (x * g).sum(axis=1, keepdims=True)
        return (g / ng - x * (dot / (ng * ng * ns)),)

    return _record("l2_normalize_rows", (a,), out, bwd)


def cosine_similarity_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, (R x C), (R x C) -> (R x 1).

    Each norm is guarded with +1e-12 so degenerate zero rows stay finite.
    """
    _require_2d("cosine_similarity_rows", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"cosine_similarity_rows: shapes {a.shape} and {b.shape} differ")
    _check_finite("cosine_similarity_rows", (a, b))
    x, y = a.data, b.data
    nx = np.sqrt((x * x).sum(axis=1, keepdims=True))
    ny = np.sqrt((y * y).sum(axis=1, keepdims=True))
    gx, gy = nx + _EPS_NORM, ny + _EPS_NORM
    s = (x * y).sum(axis=1, keepdims=True)
    out = s / (gx * gy)

    def bwd(g):
        sx = np.maximum(nx, _EPS_NORM)
        sy = np.maximum(ny, _EPS_NORM)
        da = g * (y / (gx * gy) - x * (s / (gx * gx * gy * sx)))
        db = g * (x / (gx * gy) - y * (s / (gy * gy * gx * sy)))
        return da, db

    return _record("cosine_similarity_rows", (a, b), out, bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    _check_finite("scalar_mul", (a,))
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _record("scalar_mul", (a,), a.data * c, bwd)


def scalar_add(a: Tensor, c: float) -> Tensor:
    _check_finite("scalar_add", (a,))

    def bwd(g):
        return (g,)

    return _record("scalar_add", (a,), a.data + float(c), bwd)


def max_pool_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows, (R x C) -> (1 x C); grad flows to the
    first row attaining each column max."""
    _require_2d("max_pool_rows", a)
    _check_finite("max_pool_rows", (a,))
    x = a.data
    idx = np.argmax(x, axis=0)
    out = x[idx, np.arange(x.shape[1])][None, :]

    def bwd(g):
        gx = np.zeros_like(x)
        gx[idx, np.arange(x.shape[1])] = g[0]
        return (gx,)

    return _record("max_pool_rows", (a,), out, bwd)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "l2_normalize_rows": l2_normalize_rows,
    "cosine_similarity_rows": cosine_similarity_rows,
    "scalar_mul": scalar_mul,
    "scalar_add": scalar_add,
    "max_pool_rows": max_pool_rows,
}


def op_forward(name: str, inputs: list[Tensor] | tuple[Tensor, ...], **kwargs) -> Tensor:
    """Dispatch a primitive by name. `inputs` is the positional tensor list;
    op-specific arguments (reshape shape, concat axis, ...) go in kwargs."""
    if name not in PRIMITIVES:
        raise ShapeMismatchError(f"unknown primitive '{name}'")
    fn = PRIMITIVES[name]
    if name == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# composites (built from primitives; no new node types)


def neg(a: Tensor) -> Tensor:
    return scalar_mul(a, -1.0)


def softplus(a: Tensor) -> Tensor:
    """Stable log(1 + exp(x)) = relu(x) + log(1 + exp(-|x|))."""
    absx = add(relu(a), relu(neg(a)))
    return add(relu(a), log(scalar_add(exp(neg(absx)), 1.0)))


def log_sigmoid(a: Tensor) -> Tensor:
    """Stable log(sigmoid(x)) = -softplus(-x)."""
    return neg(softplus(neg(a)))


# ---------------------------------------------------------------------------
# backward + gradient checking


def backward(loss: Tensor) -> dict[str, Tensor]:
    """Reverse sweep from a scalar loss. Leaf grads accumulate additively
    across calls; returns the current accumulated gradient per leaf id."""
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("backward: loss was not produced on an active graph")
    graph = loss.node.graph

    # nodes recorded after the loss can never feed it; they simply receive
    # no pending grad and are skipped
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[str, Tensor] = {}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.bwd(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None:
                continue
            if t.node is not None:
                if id(t) in pending:
                    pending[id(t)] = pending[id(t)] + gt
                else:
                    pending[id(t)] = gt
            elif t.requires_grad:
                t.accumulate_grad(gt)
                leaves[t.param_id()] = t
    return {pid: Tensor(t.grad) for pid, t in leaves.items()}


def check_gradients(f: Callable[[list[Tensor]], Tensor], params: list[Tensor],
                    step: float = 1e-5) -> float:
    """Compare analytic gradients of f(params) against central differences.

    Returns max over every coordinate of every param of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    f must be deterministic and evaluate without an active graph for the
    probe evaluations.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be positive")
    for p in params:
        p.zero_grad()
    with Graph():
        loss = f(params)
        if not np.isfinite(loss.item()):
            raise NonFiniteError("check_gradients: non-finite loss at base point")
        backward(loss)

    worst = 0.0
    for p in params:
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        aflat = np.asarray(analytic, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params).item()
            flat[i] = orig - step
            fm = f(params).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(
                    f"check_gradients: non-finite f probing {p.param_id()}[{i}]")
            numeric = (fp - fm) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            if err > worst:
                worst = err
    return worst
