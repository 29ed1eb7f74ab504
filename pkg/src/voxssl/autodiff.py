"""Dense arrays with reverse-mode differentiation.

Define-by-run: every operation on a gradient-requiring Tensor records its
inputs and a backward rule on the output; ``backward`` replays the reachable
ops in reverse topological order, visiting each exactly once. The graph is
rebuilt from scratch on every forward pass.

Tensors are float32 or float64 (tests and gradient checks run in 64-bit,
training defaults to 32-bit). A tensor and the tape it participates in are
confined to one thread; independent tapes may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense n-d array plus an optional gradient buffer.

    Leaf tensors are created directly; op outputs carry the backward rule
    (``_vjp``) and references to their inputs. A leaf never has a ``_vjp``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def strides(self) -> tuple[int, ...]:
        return self.data.strides

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{tag})"

    # -- gradient plumbing ----------------------------------------------

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, scale: float = 1.0) -> "BackwardStats":
        return trace(self).backward(scale)

    # -- operator sugar --------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of the ops reachable from a root tensor.

    ``nodes`` lists op outputs in forward (topological) order; ``backward``
    walks it once in reverse, applying each backward rule exactly once.
    """

    def __init__(self, root: Tensor, nodes: list[Tensor]):
        self.root = root
        self.nodes = nodes

    def backward(self, scale: float = 1.0) -> "BackwardStats":
        root = self.root
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root._accumulate(np.full_like(root.data, scale))
        applied = 0
        for node in reversed(self.nodes):
            assert node.grad is not None, "tape node left without incoming gradient"
            node._vjp(node.grad)
            applied += 1
            if node is not root:
                node.grad = None  # free intermediate buffers; leaves keep theirs
        assert applied == len(self.nodes)
        return BackwardStats(n_nodes=len(self.nodes), n_applied=applied)


@dataclass(frozen=True)
class BackwardStats:
    n_nodes: int
    n_applied: int


def trace(root: Tensor) -> Tape:
    """Collect the op nodes reachable from ``root`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            if t._vjp is not None:
                order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            stack.append((p, False))
    return Tape(root, order)


# -- op construction helpers ------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          vjp: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise primitives ---------------------------------------------------


def _scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    # python scalars stay weakly typed so float32 graphs are not upcast
    if _scalar(b):
        a, c = as_tensor(a), b

        def vjp_s(g):
            a._accumulate(g)

        return _make(a.data + c, (a,), vjp_s)
    if _scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    if _scalar(b):
        return add(a, -b)
    if _scalar(a):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    if _scalar(b):
        a, c = as_tensor(a), b

        def vjp_s(g):
            a._accumulate(g * c)

        return _make(a.data * c, (a,), vjp_s)
    if _scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    if _scalar(b):
        a, c = as_tensor(a), b

        def vjp_s(g):
            a._accumulate(g / c)

        return _make(a.data / c, (a,), vjp_s)
    if _scalar(a):
        b, c = as_tensor(b), a

        def vjp_sa(g):
            if b.requires_grad:
                b._accumulate(-g * c / (b.data * b.data))

        return _make(c / b.data, (b,), vjp_sa)
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), vjp)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def vjp(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + x * pdf))

    return _make(data, (a,), vjp)


# -- matmul -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product: both 2-d, or both n-d with identical batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), vjp)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), vjp)


def take(a, idx) -> Tensor:
    """Basic indexing with gradient scatter-add back into the source."""
    a = as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            np.add.at(z, idx, g)
            a._accumulate(z)

    return _make(a.data[idx], (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    data = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(data, tuple(parts), vjp)


# -- reductions ---------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axis, keepdims))

    return _make(data, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / count)

    return _make(data, (a,), vjp)


# -- normalisation / probability primitives -----------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise FloatingPointError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise FloatingPointError("log_softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), vjp)


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if a.shape[-1] < 1:
        raise ValueError(f"layernorm needs last-axis extent >= 1, got {a.shape}")
    n = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            dxhat = g * gain.data
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
            dmu = (-inv) * dxhat.sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * xc.sum(axis=-1, keepdims=True)
            a._accumulate(dxhat * inv + dvar * (2.0 / n) * xc + dmu / n)

    return _make(data, (a, gain, bias), vjp)


# -- losses -------------------------------------------------------------------


def l2_loss(a, b, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared difference, restricted to mask-selected positions.

    Changes at unmasked positions cannot affect the value: the difference is
    multiplied by the mask before squaring.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l2_loss shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        count = a.size
        diff = sub(a, b)
    else:
        mask = np.asarray(mask)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} != input shape {a.shape}")
        count = int(np.count_nonzero(mask))
        if count == 0:
            raise ValueError("l2_loss over an empty mask")
        diff = mul(sub(a, b), mask.astype(a.dtype))
    return div(reduce_sum(mul(diff, diff)), float(count))


def cross_entropy(target_probs, logits) -> Tensor:
    """-sum(t * log softmax(logits)) over the last axis, meaned over rows."""
    t = as_tensor(target_probs)
    s = as_tensor(logits)
    if t.shape != s.shape:
        raise ValueError(f"cross_entropy shape mismatch: {t.shape} vs {s.shape}")
    per_row = neg(reduce_sum(mul(t, log_softmax(s, axis=-1)), axis=-1))
    if per_row.ndim == 0:
        return per_row
    return reduce_mean(per_row)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor] | dict,
               step: float = 1e-5, tol: float = 1e-4,
               samples: int | None = None, rng: np.random.Generator | None = None,
               ) -> GradCheckReport:
    """Compare the tape gradient of ``f`` against central finite differences.

    ``f`` is re-evaluated with each sampled coordinate perturbed by +-step;
    relative error uses a 1e-2 floor in the denominator so near-zero
    gradients are judged on absolute error. With ``samples`` set, only that
    many randomly chosen coordinates are checked (cost: 2 evaluations each).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    plist = [p for _, p in named]

    for p in plist:
        p.zero_grad()
    out = f(plist)
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]

    coords = [(i, idx) for i, (_, p) in enumerate(named)
              for idx in np.ndindex(p.shape)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(c)] for c in chosen]

    max_rel, worst_param, worst_index = 0.0, "", ()
    for i, idx in coords:
        p = plist[i]
        orig = p.data[idx]
        p.data[idx] = orig + step
        f_plus = float(f(plist).data)
        p.data[idx] = orig - step
        f_minus = float(f(plist).data)
        p.data[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        an = float(analytic[i][idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-2)
        if rel > max_rel:
            max_rel, worst_param, worst_index = rel, named[i][0], idx
    return GradCheckReport(max_rel_err=max_rel, worst_param=worst_param,
                           worst_index=worst_index, n_checked=len(coords), tol=tol)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
