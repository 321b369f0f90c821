"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure. Ops build the
tape on the fly; ``backward()`` walks it once in reverse topological order
and accumulates gradients additively, so running backward twice on the same
graph doubles every gradient. The tape is rebuilt each forward pass.

Default precision is single (training); wrap gradient checks in
``precision("double")``. All reductions use numpy's fixed pairwise order,
so results are deterministic for identical inputs.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError, UsageError

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dt


@contextlib.contextmanager
def precision(kind: str):
    """Temporarily switch default precision: "single" or "double"."""
    if kind not in ("single", "double"):
        raise UsageError(f"precision must be 'single' or 'double', got {kind!r}")
    prev = _default_dtype
    set_default_dtype(np.float32 if kind == "single" else np.float64)
    try:
        yield
    finally:
        set_default_dtype(prev)


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (forward values only) inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array node in the differentiation graph.

    ``data`` is always an ndarray; ``grad`` stays None until backward
    reaches this node. Graph edges (``_parents`` / ``_vjp``) exist only on
    op outputs whose inputs require gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._vjp = vjp

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() requires a scalar, got shape {self.data.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The loss must be scalar. Gradients accumulate additively both across
        multiple uses inside one graph and across repeated backward calls.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.data.shape}")

        # Iterative postorder over grad-requiring nodes (children first).
        topo = []
        seen = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            child = next(it, None)
            if child is None:
                topo.append(node)
                stack.pop()
            elif id(child) not in seen and child.requires_grad:
                seen.add(id(child))
                stack.append((child, iter(child._parents)))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    # -- operators ----------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        data = self.data[idx]
        if isinstance(data, np.ndarray):
            data = np.ascontiguousarray(data)
        else:
            data = np.asarray(data)
        src_shape = self.data.shape
        src_dtype = self.data.dtype
        fancy = any(isinstance(i, (np.ndarray, list)) for i in
                    (idx if isinstance(idx, tuple) else (idx,)))

        def vjp(g):
            out = np.zeros(src_shape, dtype=src_dtype)
            if fancy:  # array indices may repeat; scatter-add
                np.add.at(out, idx, g)
            else:  # basic indexing never aliases
                out[idx] += g
            return (out,)

        return _op(data, (self,), vjp)

    # -- conveniences -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _op(data, parents, vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _op(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _op(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _op(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                        _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise DimensionError(str(e)) from None

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _op(data, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = _lift(a)
    data = a.data ** p
    return _op(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    return _op(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- reductions / shape ------------------------------------------------------


def tensor_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)
    src = t.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(a % len(src) for a in ax)
            shape = tuple(1 if i in ax else s for i, s in enumerate(src))
            g = g.reshape(shape)
        return (np.broadcast_to(g, src).copy(),)

    return _op(np.asarray(data), (t,), vjp)


def tensor_mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    count = t.data.size if axis is None else np.prod(
        [t.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(t, shape) -> Tensor:
    t = _lift(t)
    src = t.data.shape
    data = t.data.reshape(shape)
    return _op(data, (t,), lambda g: (g.reshape(src),))


def transpose(t) -> Tensor:
    t = _lift(t)
    if t.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {t.data.shape}")
    return _op(np.ascontiguousarray(t.data.T), (t,), lambda g: (g.T,))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, sizes, axis=axis))

    return _op(data, tuple(parts), vjp)


# -- pointwise nonlinearities ------------------------------------------------


def exp(t) -> Tensor:
    t = _lift(t)
    data = np.exp(t.data)
    return _op(data, (t,), lambda g: (g * data,))


def log(t) -> Tensor:
    t = _lift(t)
    return _op(np.log(t.data), (t,), lambda g: (g / t.data,))


def sqrt(t) -> Tensor:
    t = _lift(t)
    data = np.sqrt(t.data)
    return _op(data, (t,), lambda g: (g * 0.5 / data,))


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two stable branches share it.
    e = np.exp(-np.abs(x))
    denom = 1.0 + e
    return np.where(x >= 0, 1.0 / denom, e / denom)


def sigmoid(t) -> Tensor:
    t = _lift(t)
    data = _sigmoid_data(t.data)
    return _op(data, (t,), lambda g: (g * data * (1.0 - data),))


def silu(t) -> Tensor:
    return mul(t, sigmoid(t))


def softplus(t) -> Tensor:
    t = _lift(t)
    data = np.logaddexp(0.0, t.data).astype(t.data.dtype)
    return _op(data, (t,), lambda g: (g * _sigmoid_data(t.data),))


def softmax(t, axis: int = -1) -> Tensor:
    # Shifting by the detached max is exact: softmax is shift invariant.
    t = _lift(t)
    shifted = sub(t, Tensor(t.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, tensor_sum(e, axis=axis, keepdims=True))


def clamp(t, lo=None, hi=None) -> Tensor:
    t = _lift(t)
    data = np.clip(t.data, lo, hi)
    mask = np.ones_like(t.data, dtype=bool)
    if lo is not None:
        mask &= t.data >= lo
    if hi is not None:
        mask &= t.data <= hi

    return _op(data, (t,), lambda g: (g * mask,))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tensor_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tensor_mean(mul(xc, xc), axis=-1, keepdims=True)
    xhat = mul(xc, power(add(var, eps), -0.5))
    return add(mul(xhat, gamma), beta)


def normalize_rows(t, fallback=None, eps: float = 1e-6) -> Tensor:
    """Normalize each row of an [N, k] tensor to unit length.

    Rows with norm below ``eps`` map to ``fallback`` (constant, zero
    gradient) so degenerate inputs stay well defined.
    """
    t = _lift(t)
    d = t.data
    norms = np.sqrt((d * d).sum(axis=1))
    small = norms < eps
    safe = np.where(small, 1.0, norms)
    out = d / safe[:, None]
    if fallback is not None and small.any():
        out[small] = np.asarray(fallback, dtype=d.dtype)

    def vjp(g):
        gd = (g - out * (g * out).sum(axis=1, keepdims=True)) / safe[:, None]
        gd[small] = 0.0
        return (gd,)

    return _op(out, (t,), vjp)


def depthwise_conv1d(x, kernel, causal: bool = True) -> Tensor:
    """Per-channel 1-D convolution: y[l, d] = sum_j kernel[j, d] * x[l - j(+off), d].

    ``causal`` pads with zeros on the left only, so y[l] never reads x beyond
    position l; otherwise the kernel is centered. Output length equals input
    length either way.
    """
    x, kernel = _lift(x), _lift(kernel)
    if x.data.ndim != 2 or kernel.data.ndim != 2:
        raise DimensionError("depthwise_conv1d expects x [L, D] and kernel [w, D]")
    if kernel.data.shape[1] != x.data.shape[1]:
        raise DimensionError(f"channel mismatch: x {x.data.shape}, kernel {kernel.data.shape}")
    w = kernel.data.shape[0]
    if w < 1:
        raise DimensionError("kernel width must be >= 1")
    L = x.data.shape[0]
    offset = 0 if causal else (w - 1) // 2
    xd, kd = x.data, kernel.data

    data = np.zeros_like(xd)
    for j in range(w):
        s = j - offset
        if s >= 0:
            if s < L:
                data[s:] += kd[j] * xd[: L - s]
        else:
            data[: L + s] += kd[j] * xd[-s:]

    def vjp(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for j in range(w):
            s = j - offset
            if s >= 0:
                if s < L:
                    gx[: L - s] += kd[j] * g[s:]
                    gk[j] = (g[s:] * xd[: L - s]).sum(axis=0)
            else:
                gx[-s:] += kd[j] * g[: L + s]
                gk[j] = (g[: L + s] * xd[-s:]).sum(axis=0)
        return gx, gk

    return _op(data, (x, kernel), vjp)


# -- gradient checking ---------------------------------------------------------


def gradcheck(build, params, eps: float = 1e-5, samples=None, rng=None, floor: float = 1e-6):
    """Compare reverse-mode gradients of ``build()`` against central differences.

    ``build`` re-runs the forward pass and returns a scalar Tensor; the tape
    is rebuilt on every call, so in-place perturbation of parameter data is
    observed. Probes every entry unless ``samples`` limits the count per
    tensor. Returns the worst relative error seen. Run under
    ``precision("double")`` for meaningful tolerances.
    """
    loss = build()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            raise UsageError("a parameter received no gradient; is it used by build()?")
        analytic.append(p.grad.reshape(-1).copy())

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idxs = range(flat.size)
        else:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, size=samples, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            f_plus = float(build().data.reshape(-1)[0])
            flat[i] = keep - eps
            f_minus = float(build().data.reshape(-1)[0])
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(ga[i]) - fd) / max(abs(float(ga[i])), abs(fd), floor)
            worst = max(worst, err)
    return worst


def global_grad_norm(params) -> float:
    """L2 norm over all gradients, accumulated in double precision."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
