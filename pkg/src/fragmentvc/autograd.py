"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Only the kernels the voice-conversion network needs are provided. Every op
records its parents plus a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the graph once in reverse
topological order.

Shapes are explicit: the only implicit expansion anywhere is adding a bias
vector to the rows of a matrix.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

GROUPS = ("source_encoder", "target_encoder", "extractors", "other")


class Tensor:
    """A dense array that may take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        elif 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar for the handful of ops that have operator forms
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    _check(b.data.ndim == 1 and a.shape[-1] == b.shape[0],
           f"cannot add shapes {a.shape} and {b.shape}")
    axes = tuple(range(a.data.ndim - 1))
    return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    _check(int(np.prod(shape)) == x.data.size, f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the time (first) axis."""
    _check(len(xs) > 0, "concat_rows needs at least one tensor")
    widths = {x.shape[1:] for x in xs}
    _check(len(widths) == 1, f"concat_rows width mismatch: {sorted(widths)}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=0), xs, back)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the time axis, keeping a single row: ``T x D -> 1 x D``."""
    n = x.shape[0]
    return _result(x.data.mean(axis=0, keepdims=True), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def tensor_sum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant array ``w``; used by gradient checks."""
    w = np.asarray(w, dtype=x.dtype)
    _check(w.shape == x.shape, f"weight shape {w.shape} != {x.shape}")
    return _result(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes when both inputs share them."""
    _check(a.data.ndim == b.data.ndim and a.data.ndim >= 2,
           f"matmul needs equal-rank inputs, got {a.shape} and {b.shape}")
    _check(a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2],
           f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` for ``x: T x Din``, ``W: Din x Dout``, ``b: Dout``."""
    _check(x.data.ndim == 2 and W.data.ndim == 2, "linear expects 2-D input and weight")
    _check(x.shape[1] == W.shape[0], f"linear dimension mismatch: {x.shape} @ {W.shape}")
    y = x.data @ W.data
    if b is None:
        return _result(y, (x, W), lambda g: (g @ W.data.T, x.data.T @ g))
    _check(b.shape == (W.shape[1],), f"bias shape {b.shape} != ({W.shape[1]},)")
    return _result(y + b.data, (x, W, b),
                   lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


def conv1d(x: Tensor, kernel: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution over time with zero "same" padding.

    ``x`` is ``T x Cin``; ``kernel`` is ``K x Cin x Cout`` with odd ``K``.
    Output row ``t`` sees input rows ``t - (K-1)/2 .. t + (K-1)/2``.
    """
    _check(x.data.ndim == 2 and kernel.data.ndim == 3, "conv1d expects T x Cin input and K x Cin x Cout kernel")
    K, cin, cout = kernel.shape
    _check(K % 2 == 1, f"conv1d kernel size must be odd, got {K}")
    _check(x.shape[1] == cin, f"conv1d channel mismatch: input {x.shape[1]}, kernel {cin}")
    T = x.shape[0]
    pad = (K - 1) // 2
    xp = np.zeros((T + 2 * pad, cin), dtype=x.data.dtype)
    xp[pad:pad + T] = x.data
    # gather windows as a contiguous (T, K, Cin) copy, then flatten to (T, K*Cin)
    cols = xp[np.arange(T)[:, None] + np.arange(K)].reshape(T, K * cin)
    wmat = kernel.data.reshape(K * cin, cout)
    y = cols @ wmat
    if b is not None:
        _check(b.shape == (cout,), f"bias shape {b.shape} != ({cout},)")
        y = y + b.data

    def back(g):
        dcols = (g @ wmat.T).reshape(T, K, cin)
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[k:k + T] += dcols[:, k]
        grads = [dxp[pad:pad + T], (cols.T @ g).reshape(K, cin, cout)]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, kernel) if b is None else (x, kernel, b)
    return _result(y, parents, back)


# --------------------------------------------------------------------------
# normalisation, attention, loss
# --------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit variance, then apply ``gain``, ``bias``."""
    D = x.shape[-1]
    _check(gain.shape == (D,) and bias.shape == (D,), "layer_norm gain/bias must match the feature size")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    axes = tuple(range(x.data.ndim - 1))

    def back(g):
        gh = g * gain.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(y.astype(x.dtype), (x, gain, bias), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back)


def multi_head_attention(q_in: Tensor, kv_in: Tensor, params: dict[str, Tensor],
                         n_heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with ``n_heads`` heads.

    ``params`` holds ``wq, bq, wk, wv, bv, wo, bo``. There is no key bias:
    it shifts every score in a row equally, so softmax ignores it. Returns the
    output (``Tq x D``) and the per-head softmax weights (``H x Tq x Tk``).
    """
    D = q_in.shape[1]
    _check(D % n_heads == 0, f"model size {D} not divisible by {n_heads} heads")
    _check(kv_in.shape[1] == D, f"key/value width {kv_in.shape[1]} != {D}")
    dh = D // n_heads
    Tq, Tk = q_in.shape[0], kv_in.shape[0]

    def heads(t: Tensor, T: int) -> Tensor:
        return transpose(reshape(t, (T, n_heads, dh)), (1, 0, 2))

    q = heads(linear(q_in, params["wq"], params["bq"]), Tq)
    k = heads(linear(kv_in, params["wk"]), Tk)
    v = heads(linear(kv_in, params["wv"], params["bv"]), Tk)
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    weights = softmax_rows(scores)
    ctx = matmul(weights, v)
    merged = reshape(transpose(ctx, (1, 0, 2)), (Tq, D))
    return linear(merged, params["wo"], params["bo"]), weights


def l1_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean absolute difference. The subgradient at ties is zero."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    _check(pred.shape == tgt.shape, f"l1_loss shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    n = diff.size
    sign = np.sign(diff)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def back(g):
        gp = g * sign / n
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _result(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), parents, back)


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call; leaf
    gradients accumulate across calls until reset.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.full((), seed, dtype=loss.dtype)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# parameters and gradient checking
# --------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors, each tagged with a learning-rate group."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def add(self, name: str, data: np.ndarray, group: str) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        t = Tensor(data, requires_grad=True, dtype=data.dtype, name=name)
        self._entries[name] = (t, group)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def group(self, name: str) -> str:
        return self._entries[name][1]

    def items(self):
        for name, (t, _) in self._entries.items():
            yield name, t

    def zero_grad(self) -> None:
        for t, _ in self._entries.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t, _ in self._entries.values())

    def astype(self, dtype) -> None:
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for t, _ in self._entries.values():
            t.data = t.data.astype(dtype)
            t.grad = None


def finite_diff_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                      refine_above: float = 1e-6) -> float:
    """Max relative error between the analytic and a numeric gradient.

    ``f`` must rebuild the scalar graph from the current value of ``x`` each
    call. ``x`` is perturbed in place and restored. Errors are
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    Every entry is first estimated by two-point central differences. Entries
    that disagree by more than ``refine_above`` are re-estimated with the
    fourth-order five-point stencil at step ``10 h``, whose rounding error is
    ten times smaller; this matters for entries whose true gradient is tiny
    relative to the loss.
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_diff_check requires float64 tensors")
    prev = x.grad
    x.grad = None
    loss = f()
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = prev

    flat = x.data.reshape(-1)

    def at(i: int, delta: float) -> float:
        orig = flat[i]
        flat[i] = orig + delta
        try:
            return float(f().data)
        finally:
            flat[i] = orig

    a = analytic.reshape(-1)
    numeric = np.array([(at(i, h) - at(i, -h)) / (2 * h) for i in range(flat.size)])

    def rel(num):
        return np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)

    H = 10 * h
    for i in np.flatnonzero(rel(numeric) > refine_above):
        numeric[i] = (at(i, -2 * H) - 8 * at(i, -H) + 8 * at(i, H) - at(i, 2 * H)) / (12 * H)
    return float(np.max(rel(numeric)))
