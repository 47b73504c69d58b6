"""Minimal reverse-mode autodiff substrate on float64 numpy arrays.

Implements exactly the operations the two training stages need: affine maps,
pointwise nonlinearities, softmax, an LSTM cell, multi-head attention,
diagonal-Gaussian KL, reparameterized sampling, binary cross-entropy, and an
Adam optimizer with decoupled weight decay. Every differentiable op records
its parents on a tape; ``backward`` walks the tape in reverse topological
order. Gradients are checkable against central finite differences via
``numeric_gradient`` / ``gradient_check``, which never touch the tape.

Randomness never enters an op implicitly: sampling noise is an explicit
argument, so every op is a pure function of its inputs.
"""

from __future__ import annotations

import json
from typing import Callable, NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """backward() called on a node that is not a scalar loss on the tape."""


class DomainError(ValueError):
    """An input lies outside an op's mathematical domain."""


class StateError(RuntimeError):
    """Optimizer stepped before any gradients were produced."""


class KernelConfigError(ValueError):
    """A structural hyperparameter is invalid (e.g. head-count divisibility)."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    """A float64 array plus the tape bookkeeping needed for reverse mode.

    ``data`` is the row-major numpy array; ``grad`` is populated on leaf
    tensors (parameters) by :func:`backward` and is ``None`` until then.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _vjp=None):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor contains NaN or Inf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("tensor/tensor division is not part of the kernel")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, keeping the tape only where gradients can flow."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs,
                 _parents=parents if needs else (),
                 _vjp=vjp if needs else None)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes numpy broadcast over."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                            _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                            _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; operands must be at least 2-D.

    Leading batch axes follow numpy broadcasting; gradients are summed back
    over any broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim>=2 operands, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape)
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape)
        return ga, gb

    return _result(data, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # piecewise form avoids exp overflow for large |x|
    pos = x.data >= 0
    z = np.exp(-np.abs(x.data))
    y = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise NumericError("exp overflow")
    return _result(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the non-saturated region."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; output slices sum to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}") from exc
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _result(data, tuple(parts), vjp)


def narrow(x, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice of length ``size`` along ``axis``."""
    x = as_tensor(x)
    if start < 0 or start + size > x.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + size}] exceeds axis "
                         f"{axis} of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.shape} -> {shape}") from exc
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,),
                   lambda g: (g.transpose(inverse),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _result(data, (x,), vjp)


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        n = x.data.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) / n


# ---------------------------------------------------------------------------
# model-level ops
# ---------------------------------------------------------------------------

def affine(x, w, b) -> Tensor:
    """x @ w + b, accepting a single vector or a batch of row vectors."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2:
        raise ShapeError(f"affine weight must be 2-D, got {w.shape}")
    if x.ndim == 1:
        if x.shape[0] != w.shape[0]:
            raise ShapeError(f"affine: x{x.shape} @ w{w.shape}")
        row = reshape(x, (1, x.shape[0]))
        return reshape(matmul(row, w) + b, (w.shape[1],))
    return matmul(x, w) + b


class LstmWeights(NamedTuple):
    """Packed LSTM cell weights; gate order along the last axis is i, f, g, o."""

    w_ih: Tensor  # [input_dim, 4*hidden]
    w_hh: Tensor  # [hidden, 4*hidden]
    b: Tensor     # [4*hidden]


def lstm_cell(x, h, c, weights: LstmWeights) -> tuple[Tensor, Tensor]:
    """One LSTM cell step; returns (h', c')."""
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = weights.w_hh.shape[0]
    if weights.w_ih.shape[1] != 4 * hidden or weights.w_hh.shape[1] != 4 * hidden:
        raise ShapeError("lstm weights must pack 4 gates on the last axis")
    gates = affine(x, weights.w_ih, weights.b) + matmul_or_vec(h, weights.w_hh)
    axis = gates.ndim - 1
    i = sigmoid(narrow(gates, axis, 0, hidden))
    f = sigmoid(narrow(gates, axis, hidden, hidden))
    g = tanh(narrow(gates, axis, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, axis, 3 * hidden, hidden))
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def matmul_or_vec(x, w) -> Tensor:
    """x @ w where x may be a bare vector."""
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, x.shape[0])), w), (w.shape[1],))
    return matmul(x, w)


class AttentionWeights(NamedTuple):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_attention(tokens, weights: AttentionWeights, n_heads: int,
                         return_weights: bool = False):
    """Scaled dot-product attention over a token sequence.

    ``tokens`` is [n, d_model] or [batch, n, d_model]. Each head attends over
    all tokens; head outputs are concatenated and passed through the output
    projection. There is no positional term: the op is permutation
    equivariant.
    """
    tokens = as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
    if tokens.ndim != 3:
        raise ShapeError(f"attention tokens must be 2-D or 3-D, got {tokens.shape}")
    batch, n, d_model = tokens.shape
    if d_model % n_heads != 0:
        raise KernelConfigError(
            f"d_model={d_model} not divisible by n_heads={n_heads}")
    dk = d_model // n_heads

    def heads(t):
        return transpose(reshape(t, (batch, n, n_heads, dk)), (0, 2, 1, 3))

    q = heads(matmul(tokens, weights.wq) + weights.bq)
    k = heads(matmul(tokens, weights.wk) + weights.bk)
    v = heads(matmul(tokens, weights.wv) + weights.bv)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dk))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [batch, heads, n, dk]
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (batch, n, d_model))
    out = matmul(merged, weights.wo) + weights.bo
    if squeeze:
        out = reshape(out, (n, d_model))
        if return_weights:
            return out, reshape(attn, (n_heads, n, n))
    if return_weights:
        return out, attn
    return out


def gaussian_kl(mu, sigma) -> Tensor:
    """KL( N(mu, diag sigma^2) || N(0, I) ), summed over all elements."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise DomainError("gaussian_kl requires sigma > 0")
    var = sigma * sigma
    return sum_(mu * mu + var - log(var) - 1.0) * 0.5


def reparameterize(mu, sigma, eps) -> Tensor:
    """z = mu + sigma * eps with shapes required to match exactly."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    eps = as_tensor(eps)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ShapeError(
            f"reparameterize: mu{mu.shape}, sigma{sigma.shape}, eps{eps.shape}")
    return mu + sigma * eps


PROB_EPS = 1e-7


def bce(prob, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    prob = as_tensor(prob)
    target = as_tensor(target)
    p = clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    losses = neg(target * log(p) + (1.0 - target) * log(1.0 - p))
    return mean_(reshape(losses, (losses.size,)))


def cross_entropy(logits, target) -> Tensor:
    """Mean binary cross-entropy from logits (numerically stable primitive)."""
    logits = as_tensor(logits)
    y = _as_f64(target if not isinstance(target, Tensor) else target.data)
    if y.shape != logits.shape:
        raise ShapeError(f"cross_entropy: logits{logits.shape} vs target{y.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(per.size, 1)

    def vjp(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                     np.exp(z) / (1.0 + np.exp(z)))
        return (g * (s - y) / n,)

    return _result(np.array(per.sum() / n), (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``loss`` must be a scalar produced by kernel ops and connected to at
    least one gradient-requiring tensor. Leaves keep their previous gradient
    contents and receive ``+=``; callers zero grads between steps.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward target is not a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward target must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every trainable parameter")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors plus their gradients, in insertion order."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def gradient(self, name: str) -> np.ndarray:
        """Gradient array for ``name``; zeros if backward never reached it."""
        t = self._tensors[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def l2(self) -> Tensor:
        """Sum of squares of every parameter, as a graph node."""
        total = None
        for t in self._tensors.values():
            sq = sum_(t * t)
            total = sq if total is None else total + sq
        if total is None:
            return Tensor(0.0)
        return total

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            arr = _as_f64(values[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} != parameter "
                                 f"{name!r} shape {t.data.shape}")
            t.data = arr.copy()

    def to_checkpoint(self, opt: "Adam | None" = None) -> dict:
        return {
            "version": 1,
            "tensors": {
                name: {"shape": list(t.data.shape),
                       "data": t.data.reshape(-1).tolist()}
                for name, t in self._tensors.items()
            },
            "opt": opt.state_dict() if opt is not None else None,
        }

    def save(self, path, opt: "Adam | None" = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_checkpoint(opt), fh)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict | None]:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        store = cls()
        for name, spec in doc["tensors"].items():
            arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            store.add(name, arr)
        return store, doc.get("opt")


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay is applied as ``theta <- theta * (1 - lr * wd)`` before the moment
    update. Parameters whose gradient was never produced are skipped; calling
    ``step`` when no gradient exists at all is a :class:`StateError`.
    """

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.store = store
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> None:
        if all(t.grad is None for t in self.store.tensors()):
            raise StateError("adam step before any backward pass")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, param in self.store.items():
            g = param.grad
            if g is None:
                continue
            if self.weight_decay:
                param.data *= (1.0 - self.lr * self.weight_decay)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "weight_decay": self.weight_decay,
            "step": self.step_count,
            "m": {k: v.reshape(-1).tolist() for k, v in self._m.items()},
            "v": {k: v.reshape(-1).tolist() for k, v in self._v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        self.step_count = int(state["step"])
        for name in self._m:
            self._m[name] = np.array(state["m"][name]).reshape(self._m[name].shape)
            self._v[name] = np.array(state["v"][name]).reshape(self._v[name].shape)


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# finite-difference oracle (no tape involvement)
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[], float], tensor: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f()`` wrt every entry of ``tensor``.

    ``f`` must re-run the forward computation from current tensor values.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(build_loss: Callable[[], Tensor],
                   tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max norm-relative error between reverse-mode and FD gradients.

    Returns max over ``tensors`` of ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||,
    1e-6). Reverse-mode grads are read fresh (existing grads are cleared).
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for t in tensors:
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        g_fd = numeric_gradient(lambda: build_loss().item(), t, h=h)
        num = float(np.linalg.norm(g_ad - g_fd))
        den = max(float(np.linalg.norm(g_ad)), float(np.linalg.norm(g_fd)), 1e-6)
        worst = max(worst, num / den)
    return worst
