"""A small reverse-mode autodiff toolkit on numpy arrays.

Only what the scatter predictor and the transmittance combiner need: dense
layers, single-stride 3D convolution, elementwise activations, pooling and
sorting along the last axis, concatenation, the squeeze-excite attention
block and an Adam optimizer.  Every op keeps the dtype of its inputs so the
gradient checks can run in float64 while training runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype})"

    def backward(self, grad=None):
        order = []
        seen = set()

        def visit(t):
            # iterative DFS; graphs here are a few thousand nodes deep at most
            stack = [(t, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=self.value.dtype)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def tensor(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- raw kernels -----------------------------------------------------------

def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(x, W, grad_out):
    """Gradients ``(dx, dW, db)`` of ``x @ W + b``."""
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pad(x, padding):
    width = [(0, 0), (0, 0), (1, 1), (1, 1), (1, 1)]
    if padding == "zero":
        return np.pad(x, width)
    if padding == "replicate":
        return np.pad(x, width, mode="edge")
    raise ValueError(f"unknown padding {padding!r}")


def conv3d_forward(x, k, padding="replicate"):
    """3x3x3 'same' convolution (cross-correlation).

    ``x``: (B, C_in, D, H, W); ``k``: (C_out, C_in, 3, 3, 3).
    """
    if x.ndim != 5 or k.ndim != 5 or k.shape[2:] != (3, 3, 3) or k.shape[1] != x.shape[1]:
        raise ValueError(f"conv3d shape mismatch: x {x.shape}, k {k.shape}")
    win = sliding_window_view(_pad(x, padding), (3, 3, 3), axis=(2, 3, 4))
    return np.einsum("bcdhwijk,ocijk->bodhw", win, k, optimize=True)


def conv3d_backward(x, k, grad_out, padding="replicate"):
    """Gradients ``(dx, dk)`` of :func:`conv3d_forward`."""
    win = sliding_window_view(_pad(x, padding), (3, 3, 3), axis=(2, 3, 4))
    dk = np.einsum("bcdhwijk,bodhw->ocijk", win, grad_out, optimize=True)
    B, C, D, H, W = x.shape
    gp = np.zeros((B, C, D + 2, H + 2, W + 2), dtype=grad_out.dtype)
    for i in range(3):
        for j in range(3):
            for l in range(3):
                gp[:, :, i:i + D, j:j + H, l:l + W] += np.einsum(
                    "bodhw,oc->bcdhw", grad_out, k[:, :, i, j, l], optimize=True)
    if padding == "replicate":
        # fold the halo back onto the edge cells it copied
        gp[:, :, 1] += gp[:, :, 0]
        gp[:, :, -2] += gp[:, :, -1]
        gp[:, :, :, 1] += gp[:, :, :, 0]
        gp[:, :, :, -2] += gp[:, :, :, -1]
        gp[:, :, :, :, 1] += gp[:, :, :, :, 0]
        gp[:, :, :, :, -2] += gp[:, :, :, :, -1]
    return gp[:, :, 1:-1, 1:-1, 1:-1], dk


# --- differentiable ops ----------------------------------------------------

def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.value.shape[-1] != W.value.shape[0] or W.value.shape[1] != b.value.shape[-1]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")

    def back(g):
        return dense_backward(x.value, W.value, g)

    return Tensor(dense_forward(x.value, W.value, b.value), (x, W, b), back)


def conv3d(x: Tensor, k: Tensor, padding="replicate") -> Tensor:
    def back(g):
        return conv3d_backward(x.value, k.value, g, padding)

    return Tensor(conv3d_forward(x.value, k.value, padding), (x, k), back)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_forward(x.value)
    return Tensor(s, (x,), lambda g: (g * s * (1 - s),))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: (g * c,))


def concat(parts, axis=-1) -> Tensor:
    parts = list(parts)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def take(x: Tensor, index, axis=-1) -> Tensor:
    """Select ``index`` (int or slice) along ``axis``."""
    sl = [slice(None)] * x.value.ndim
    sl[axis] = index
    sl = tuple(sl)

    def back(g):
        out = np.zeros_like(x.value)
        out[sl] = g
        return (out,)

    return Tensor(x.value[sl], (x,), back)


def mean_last(x: Tensor, keepdims=True) -> Tensor:
    n = x.value.shape[-1]

    def back(g):
        if not keepdims:
            g = g[..., None]
        return (np.broadcast_to(g / n, x.value.shape).astype(x.value.dtype),)

    return Tensor(x.value.mean(axis=-1, keepdims=keepdims), (x,), back)


def max_last(x: Tensor, keepdims=True) -> Tensor:
    idx = np.argmax(x.value, axis=-1)

    def back(g):
        if keepdims:
            g = g[..., 0]
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    out = np.take_along_axis(x.value, idx[..., None], axis=-1)
    return Tensor(out if keepdims else out[..., 0], (x,), back)


def sort_last(x: Tensor) -> Tensor:
    """Sort along the last axis (a permutation, so gradients are routed back)."""
    idx = np.argsort(x.value, axis=-1, kind="stable")

    def back(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, idx, g, axis=-1)
        return (out,)

    return Tensor(np.take_along_axis(x.value, idx, axis=-1), (x,), back)


def sum_all(x: Tensor) -> Tensor:
    return Tensor(np.asarray(x.value.sum(), dtype=x.value.dtype), (x,),
                  lambda g: (np.broadcast_to(g, x.value.shape).astype(x.value.dtype),))


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.value.dtype)
    diff = pred.value - target
    n = diff.size
    return Tensor(np.asarray((diff * diff).sum() / n, dtype=pred.value.dtype), (pred,),
                  lambda g: (g * 2.0 * diff / n,))


# --- parameters ------------------------------------------------------------

def he_uniform(rng, fan_in, shape, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Params:
    """Named parameter arrays plus the leaf tensors of the current forward pass."""

    def __init__(self, arrays: dict | None = None):
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})
        self.leaves: dict[str, Tensor] = {}

    def add(self, name, value):
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name}")
        self.arrays[name] = value
        return value

    def __getitem__(self, name) -> Tensor:
        leaf = self.leaves.get(name)
        if leaf is None:
            leaf = Tensor(self.arrays[name])
            self.leaves[name] = leaf
        return leaf

    def reset(self):
        self.leaves = {}

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.arrays.items():
            leaf = self.leaves.get(name)
            out[name] = np.zeros_like(arr) if leaf is None or leaf.grad is None else leaf.grad
        return out

    def astype(self, dtype) -> "Params":
        return Params({k: v.astype(dtype) for k, v in self.arrays.items()})

    def count(self) -> int:
        return sum(v.size for v in self.arrays.values())


def add_dense(params: Params, name, n_in, n_out, rng, dtype=np.float32, scale: float = 1.0, bias: float = 0.0):
    params.add(f"{name}.W", (scale * he_uniform(rng, n_in, (n_in, n_out), np.float64)).astype(dtype))
    params.add(f"{name}.b", np.full(n_out, bias, dtype=dtype))


def apply_dense(params: Params, name, x: Tensor) -> Tensor:
    return dense(x, params[f"{name}.W"], params[f"{name}.b"])


# --- squeeze-excite attention ----------------------------------------------

ATTENTION_TYPES = ("density", "phase", "transmittance")


def attention_input(density: Tensor, phase: Tensor, transmittance: Tensor, g: Tensor, alpha: Tensor) -> Tensor:
    """The 8-vector ``[avg rho, avg f, avg T, max rho, max f, max T, g, alpha]`` per row.

    ``density`` etc. are the layer's per-point features, shape (B, n_i).
    """
    avgs = [mean_last(t) for t in (density, phase, transmittance)]
    maxs = [max_last(t) for t in (density, phase, transmittance)]
    return concat(avgs + maxs + [g, alpha], axis=-1)


def attention_weight(v: Tensor, params: Params | None = None, name: str = "se",
                     mode: str = "learned") -> Tensor:
    """Per-type excitation weights in (0, 1), shape (B, 3).

    ``literal``: ``sigmoid(mean(relu(v)))`` shared by all three types.
    ``learned``: dense 8->4, relu, dense 4->3, sigmoid.
    """
    if mode == "literal":
        w = sigmoid(mean_last(relu(v)))
        return concat([w, w, w], axis=-1)
    if mode != "learned":
        raise ValueError(f"unknown attention mode {mode!r}")
    h = relu(apply_dense(params, f"{name}.squeeze", v))
    return sigmoid(apply_dense(params, f"{name}.excite", h))


def add_attention(params: Params, name, rng, dtype=np.float32):
    add_dense(params, f"{name}.squeeze", 8, 4, rng, dtype)
    add_dense(params, f"{name}.excite", 4, 3, rng, dtype)


def attention_apply(features: Tensor, w: Tensor, type_index: int | None = None) -> Tensor:
    """Scale a feature block by its type's weight.

    With ``type_index`` the block belongs to one type and column
    ``type_index`` of ``w`` is used; otherwise ``features`` is (B, 3, ...)
    and each type row gets its own weight.
    """
    if type_index is not None:
        return mul(features, take(w, slice(type_index, type_index + 1)))
    extra = features.value.ndim - 2
    wv = Tensor(w.value.reshape(w.value.shape + (1,) * extra), (w,),
                lambda g: (g.reshape(g.shape[:2] + (-1,)).sum(-1),))
    return mul(features, wv)


# --- optimizer -------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))


def adam_step(state: TrainState, grads: dict, lr: float | None = None) -> TrainState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    lr = state.lr if lr is None else lr
    for k, g in grads.items():
        if g.shape != state.params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {state.params[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        p = state.params[k]
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= upd.astype(p.dtype)
    return state
