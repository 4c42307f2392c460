"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam.

Every op takes ``Tensor`` nodes and returns a new node that remembers its
parents and a closure mapping the output gradient to parent gradients.
``backward`` walks the graph once in reverse topological order.

Broadcasting is deliberately limited: binary ops want equal shapes, the
only exceptions being the bias of ``linear``, the affine terms of
``layer_norm`` and the constant mask of ``masked_softmax``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

# additive "minus infinity" used for dropped attention cells / logits
NEG_INF = -1e9
_KEEP_THRESHOLD = NEG_INF / 2


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "name")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(value, name: str) -> Tensor:
    return Tensor(value, name=name)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return Tensor(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, const) -> Tensor:
    """Add a non-differentiable array (e.g. a logit mask); shapes must agree."""
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.shape:
        raise ValueError(f"add_constant: shape mismatch {a.shape} vs {const.shape}")
    return Tensor(a.data + const, (a,), lambda g: (g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU, as used by the original BERT code."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return Tensor(out, (x,), grad_fn)


def total(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


# ---------------------------------------------------------------- shapes

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def index(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the leading axis."""
    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return Tensor(a.data[i], (a,), grad_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embedding: id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return Tensor(weight.data[ids], (weight,), grad_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., k] @ weight[k, n] (+ bias[n])."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def grad_fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor(out, parents, grad_fn)


# ---------------------------------------------------------------- normalisation

def masked_softmax(scores: Tensor, additive_mask) -> Tensor:
    """Softmax over the last axis restricted to cells whose mask entry is 0.

    Dropped cells come out exactly 0; a row with nothing kept comes out all
    zeros rather than NaN.
    """
    if np.isnan(scores.data).any():
        raise ValueError("masked_softmax: NaN in scores")
    mask = np.asarray(additive_mask, dtype=np.float64)
    try:
        np.broadcast_shapes(mask.shape, scores.shape)
    except ValueError:
        raise ValueError(
            f"masked_softmax: mask {mask.shape} not broadcastable to {scores.shape}"
        ) from None
    keep = np.broadcast_to(mask > _KEEP_THRESHOLD, scores.shape)
    shifted = np.where(keep, scores.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(np.where(keep, scores.data, 0.0) - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor(out, (scores,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs feature dim {d}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return (gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0))

    return Tensor(out, (x, gamma, beta), grad_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets over rows of [B, n] logits."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    n = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ValueError(f"cross_entropy: target outside [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_z
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p / len(targets),)

    return Tensor(loss, (logits,), grad_fn)


# ---------------------------------------------------------------- backward

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. named leaves.

    ``params`` may be a name->Tensor mapping or an iterable of named
    tensors; parameters the loss does not reach get exact zeros. When
    omitted, every named leaf in the graph is reported.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    if params is None:
        params = {n.name: n for n in order if n.grad_fn is None and n.name}
    elif not isinstance(params, Mapping):
        params = {p.name: p for p in params}
    return {
        name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
        for name, t in params.items()
    }


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step. Inputs are not modified."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adam_update: gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"adam_update: gradient shape {g.shape} != parameter shape "
                f"{params[name].shape} for {name!r}"
            )
        if not np.isfinite(g).all():
            raise ValueError(f"adam_update: non-finite gradient for {name!r}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
