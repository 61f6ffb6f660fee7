"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every op records its parents and a closure mapping the upstream gradient to
one gradient per parent. ``backward`` walks the recorded graph in reverse
topological order. All values are checked for finiteness as they are produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "OptimizerState",
    "GraphError",
    "NonFiniteError",
    "MissingGradientError",
    "backward",
    "sgd_step",
    "dense",
    "conv2d",
    "relu",
    "tanh",
    "add",
    "mul",
    "sum_all",
    "reshape",
    "flatten",
    "spatial_mean",
    "softmax",
    "log_softmax",
    "cross_entropy_loss",
    "mse_loss",
    "bce_with_logits_loss",
    "glorot_uniform",
    "make_rng",
]


class GraphError(RuntimeError):
    """Raised for malformed graphs: bad shapes, non-scalar loss, missing forward."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""


class MissingGradientError(KeyError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
        _op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise GraphError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_as_tensor(other))


def _not_scalar(t: Tensor) -> float:
    raise GraphError(f"item() on tensor with shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A trainable tensor with a stable identifier."""

    __slots__ = ("identifier",)

    def __init__(self, data, identifier: str):
        super().__init__(data, requires_grad=True)
        self.identifier = identifier

    def __repr__(self) -> str:
        return f"Parameter({self.identifier!r}, shape={self.shape})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    return Tensor(data, _parents=parents, _backward=fn, _op=op)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(
    loss: Tensor,
    params: Iterable[Parameter] = (),
    seed: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Propagate gradients from ``loss`` to every leaf that requires them.

    Leaves reached get their ``.grad`` set (overwritten, not accumulated across
    calls). The returned map has one entry per parameter in ``params``;
    parameters the loss does not depend on get a zero array.

    ``seed`` replaces the implicit ones-gradient, which allows backpropagating
    a vector-Jacobian product from a non-scalar output.
    """
    if seed is None:
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.shape:
            raise GraphError(f"seed shape {seed.shape} != output shape {loss.shape}")
    if loss.is_leaf and not loss.requires_grad:
        raise GraphError("backward called on a tensor with no recorded forward pass")

    params = list(params)
    for p in params:
        p.grad = None

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward through {node._op}")
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    out: dict[str, np.ndarray] = {}
    for p in params:
        out[p.identifier] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    learning_rate: float
    step_count: int = 0

    def __post_init__(self):
        # zero is accepted: a zero-rate step is the identity on parameters
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"learning_rate must be >= 0 and finite, got {self.learning_rate}")


def sgd_step(
    params: Sequence[Parameter], grads: dict[str, np.ndarray], state: OptimizerState
) -> None:
    """In-place plain gradient step ``w <- w - lr * g`` on every parameter."""
    for p in params:
        if p.identifier not in grads:
            raise MissingGradientError(f"no gradient for parameter {p.identifier!r}")
    for p in params:
        g = grads[p.identifier]
        if g.shape != p.data.shape:
            raise GraphError(f"gradient shape {g.shape} != {p.data.shape} for {p.identifier}")
        p.data -= state.learning_rate * g
        _check_finite(p.data, f"sgd_step on {p.identifier}")
    state.step_count += 1


# ---------------------------------------------------------------------------
# initialisation


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so every run is reproducible from its seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise GraphError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise GraphError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), fn, "mul")


def sum_all(x: Tensor) -> Tensor:
    def fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.array(x.data.sum()), (x,), fn, "sum")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for x of shape (N, in), W (in, out), b (out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise GraphError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise GraphError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(out, (x, weight, bias), fn, "dense")


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution in NHWC layout.

    weight has shape (kh, kw, C_in, C_out); bias has shape (C_out,).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise GraphError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[3],):
        raise GraphError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    n, h, w, c = x.shape
    kh, kw, _, co = weight.shape
    oh, ow = _conv_out(h, kh, stride), _conv_out(w, kw, stride)
    if oh < 1 or ow < 1:
        raise GraphError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    # windows: (N, OH, OW, C, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :oh, :ow]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    wmat = weight.data.reshape(kh * kw * c, co)
    out = (cols @ wmat + bias.data).reshape(n, oh, ow, co)

    def fn(g):
        g2 = g.reshape(n * oh * ow, co)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, c)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[:, :, :, i, j, :]
        return gx, gw, gb

    return _node(out, (x, weight, bias), fn, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _node(x.data * mask, (x,), fn, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def fn(g):
        return (g * (1.0 - out * out),)

    return _node(out, (x,), fn, "tanh")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def fn(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), fn, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def spatial_mean(x: Tensor) -> Tensor:
    """Global mean pool of an (N, H, W, C) activation to (N, C)."""
    if x.data.ndim != 4:
        raise GraphError(f"spatial_mean expects NHWC input, got {x.shape}")
    _, h, w, _ = x.shape
    out = x.data.mean(axis=(1, 2))

    def fn(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _node(out, (x,), fn, "spatial_mean")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true class (softmax fused, max-shifted)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise GraphError(f"cross_entropy_loss: logits {logits.shape} vs {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label index out of range [0, {k})")
    n = labels.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _node(np.array(loss), (logits,), fn, "cross_entropy")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise GraphError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    size = diff.size

    def fn(g):
        return (g * 2.0 * diff / size,)

    return _node(np.array(np.mean(diff * diff)), (pred,), fn, "mse")


def bce_with_logits_loss(logits: Tensor, target) -> Tensor:
    """Mean per-element binary cross-entropy for targets in [0, 1]."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise GraphError(f"bce_with_logits_loss: shape mismatch {logits.shape} vs {target.shape}")
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        raise ValueError("binary cross-entropy targets must lie in [0, 1]")
    z = logits.data
    # softplus(z) - t*z, written stably
    loss = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
    size = z.size

    def fn(g):
        sig = np.exp(-np.logaddexp(0.0, -z))
        return (g * (sig - target) / size,)

    return _node(np.array(loss.mean()), (logits,), fn, "bce")
