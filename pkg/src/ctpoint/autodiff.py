"""Dense tensor algebra with reverse-mode automatic differentiation.

Covers exactly the primitives the classifier needs: broadcast arithmetic,
matmul, activations, normalizations, max/sum reductions, concat/gather and
the linear/batchnorm building blocks.  Tensors wrap numpy arrays; every
differentiable op records a backward closure and backpropagation walks the
graph in reverse topological order.

Two precisions are in play: float32 is the training default, float64 is used
by the finite-difference gradient checker (tolerances are unreliable in
single precision).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values are outside the operation's domain (e.g. zero divisor)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference-speed forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d array plus the bookkeeping reverse-mode autodiff needs.

    `data` is always a numpy float array (row-major).  Nodes created by ops
    carry a `_backward` closure and references to their parents; leaves have
    neither.  Gradients accumulate into `.grad` during `backward()`.
    """

    __slots__ = (
        "data", "grad", "requires_grad", "retain_grad",
        "_backward", "_prev", "_grad_owned",
    )

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self._backward: Callable[[np.ndarray], None] | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: np.ndarray | None = None, retain_grads: bool = False) -> None:
        """Backpropagate from this node (single use: the graph is consumed).

        A non-scalar root requires an explicit `seed` of matching shape.
        Gradients of interior nodes are freed as soon as they have been
        consumed unless `retain_grads` is set or the node asked for
        `retain_grad`; graph links are dropped as the walk progresses so
        captured forward activations can be reclaimed eagerly.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward on non-scalar output of shape {self.shape} requires an explicit seed"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.shape}")

        order = _toposort(self)
        self.grad = seed
        self._grad_owned = False
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
                if not (retain_grads or node.retain_grad):
                    node.grad = None
                    node._grad_owned = False
            # release the closure (and the arrays it captured) immediately
            node._backward = None
            node._prev = ()


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS: deep graphs must not hit the recursion limit
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
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # First contribution is stored by reference (no copy); a second
    # contribution forces an out-of-place add so shared upstream arrays are
    # never mutated.
    if t.grad is None:
        if g.dtype != t.data.dtype:
            t.grad = g.astype(t.data.dtype)
            t._grad_owned = True
        else:
            t.grad = g
            t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retain_grad = False
    out._grad_owned = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._prev = tuple(parents)
        out._backward = backward
    else:
        out._prev = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make_node(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make_node(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make_node(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero: divisor contains exact zeros")
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * data / b.data, b.shape))

    return _make_node(data, (a, b), backward)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Broadcasting componentwise arithmetic; `op` in {add, sub, mul, div}."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def backward(g):
        _accumulate(x, g * c)

    return _make_node(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics; batched leading dims broadcast."""
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires operands with at least 1 dimension")
    a_inner = a.shape[-1]
    b_inner = b.shape[-2] if b.ndim >= 2 else b.shape[-1]
    if a_inner != b_inner:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    # promote 1-d operands so one batched 2-d backward rule covers everything
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    out2 = np.matmul(a2, b2)
    squeeze = []
    if a.ndim == 1:
        squeeze.append(out2.ndim - 2)
    if b.ndim == 1:
        squeeze.append(out2.ndim - 1)
    data = np.squeeze(out2, axis=tuple(squeeze)) if squeeze else out2

    def backward(g):
        g2 = g.reshape(out2.shape)
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            _accumulate(a, _unbroadcast(ga, a2.shape).reshape(a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            _accumulate(b, _unbroadcast(gb, b2.shape).reshape(b.shape))

    return _make_node(data, (a, b), backward)


# ---------------------------------------------------------------------------
# activations and normalizations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make_node(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)

    return _make_node(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make_node(data, (x,), backward)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along `axis`; output sums to 1 along that axis."""
    axis = _check_axis(x, axis)
    data = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _make_node(data, (x,), backward)


def l1_normalize(x: Tensor, axis: int) -> Tensor:
    """Divide by the sum of absolute values along `axis`.

    Slices whose absolute sum is zero pass through unchanged.
    """
    axis = _check_axis(x, axis)
    s = np.abs(x.data).sum(axis=axis, keepdims=True)
    safe = np.where(s == 0, 1.0, s)
    data = x.data / safe

    def backward(g):
        sign = np.sign(x.data)
        inner = (g * x.data).sum(axis=axis, keepdims=True)
        gx = g / safe - sign * inner / (safe * safe)
        _accumulate(x, np.where(s == 0, g, gx))

    return _make_node(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def max_reduce(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Per-slice maximum along `axis` plus argmax indices.

    Ties resolve to the lowest index; backward routes the upstream gradient
    only to the argmax positions.
    """
    axis = _check_axis(x, axis)
    if x.shape[axis] < 1:
        raise ShapeError(f"axis {axis} has extent 0 in shape {x.shape}")
    idx = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accumulate(x, gx)

    return _make_node(data, (x,), backward), idx


def sum_reduce(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            if not keepdims:
                for ax in sorted(a % x.ndim for a in axes):
                    g = np.expand_dims(g, ax)
        # read-only broadcast view is fine: accumulated grads are never
        # mutated in place unless owned
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make_node(data, (x,), backward)


def mean_reduce(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
    )
    return scale(sum_reduce(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make_node(data, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(x.data, a, b)

    def backward(g):
        _accumulate(x, np.swapaxes(g, a, b))

    return _make_node(data, (x,), backward)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.broadcast_to(x.data, shape)

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))

    return _make_node(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    axis = _check_axis(tensors[0], axis)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != axis and other[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat extents disagree off axis {axis}: {tensors[0].shape} vs {t.shape}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make_node(data, tuple(tensors), backward)


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Take `indices` along `axis` (numpy take semantics).

    Backward scatter-adds: duplicated indices accumulate gradient.
    """
    axis = _check_axis(x, axis)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather index out of range for extent {x.shape[axis]}")
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        gxm = np.moveaxis(gx, axis, 0)
        # move the idx-shaped block of axes in g to the front to match gxm
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(gxm, idx, gm)
        _accumulate(x, gx)

    return _make_node(data, (x,), backward)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Batched row gather: x (B, N, ...), indices (B, ...) -> (B, ..., ...).

    Row i of every batch element is selected independently; backward
    scatter-adds per batch element.
    """
    idx = np.asarray(indices)
    if idx.ndim < 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"batched gather needs leading extent {x.shape[0]}, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"gather index out of range for extent {x.shape[1]}")
    b_idx = np.arange(x.shape[0]).reshape((x.shape[0],) + (1,) * (idx.ndim - 1))
    data = x.data[b_idx, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b_idx, idx), g)
        _accumulate(x, gx)

    return _make_node(data, (x,), backward)


# ---------------------------------------------------------------------------
# parameterized building blocks
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: x @ w (+ b), fused into one node.

    Fusing the bias add into the matmul output avoids materializing a second
    activation-sized array (the hot path allocates these constantly).
    """
    if x.ndim < 2 or w.ndim != 2:
        raise ShapeError(f"linear expects x ndim >= 2 and 2-d weights, got {x.shape}, {w.shape}")
    d_in, d_out = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear input width {x.shape[-1]} != weight rows {d_in}")
    if b is not None and b.shape != (d_out,):
        raise ShapeError(f"bias shape {b.shape} != ({d_out},)")
    data = np.matmul(x.data, w.data)
    if b is not None:
        data += b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g, w.data.T))
        if w.requires_grad:
            g2 = g.reshape(-1, d_out)
            x2 = x.data.reshape(-1, d_in)
            _accumulate(w, np.matmul(x2.T, g2))
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, d_out).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make_node(data, parents, backward)


def weighted_value_sum(weights: Tensor, values: Tensor) -> Tensor:
    """out[..., m, d] = sum_n weights[..., m, n, d] * values[..., n, d].

    The channel-modulated value reduction of vector attention, computed
    without materializing the (..., S, S, D) product.
    """
    if weights.shape[-1] != values.shape[-1] or weights.shape[-2] != values.shape[-2]:
        raise ShapeError(f"weight shape {weights.shape} incompatible with values {values.shape}")
    s, d = values.shape[-2], values.shape[-1]
    w4 = weights.data.reshape(-1, weights.shape[-3], s, d)
    v3 = values.data.reshape(-1, s, d)
    data = np.einsum("bmnd,bnd->bmd", w4, v3, optimize=True)
    data = data.reshape(weights.shape[:-2] + (d,))

    def backward(g):
        g3 = g.reshape(-1, weights.shape[-3], d)
        if weights.requires_grad:
            gw = g3[:, :, None, :] * v3[:, None, :, :]
            _accumulate(weights, gw.reshape(weights.shape))
        if values.requires_grad:
            gv = np.einsum("bmnd,bmd->bnd", w4, g3, optimize=True)
            _accumulate(values, gv.reshape(values.shape))

    return _make_node(data, (weights, values), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per-channel (last axis) over all leading axes.

    Train mode normalizes with the batch's biased variance and updates the
    running statistics in place (unbiased variance, momentum blend); eval
    mode normalizes with the running statistics.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameter shape mismatch: channels {c}, gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if train:
        if n < 2:
            raise DomainError("batchnorm train mode requires normalization extent >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
        inv_std = 1.0 / np.sqrt(var + eps)
        # single fresh array; x_hat is recomputed from x in backward
        data = x.data - mean
        data *= inv_std * gamma.data
        data += beta.data

        def backward(g):
            x_hat = (x.data - mean) * inv_std
            if gamma.requires_grad:
                _accumulate(gamma, (g * x_hat).sum(axis=axes))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=axes))
            if x.requires_grad:
                g_hat = g * gamma.data
                m1 = g_hat.mean(axis=axes)
                m2 = (g_hat * x_hat).mean(axis=axes)
                x_hat *= m2
                x_hat += m1
                _accumulate(x, inv_std * (g_hat - x_hat))

        return _make_node(data, (x, gamma, beta), backward)

    inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype, copy=False)
    data = x.data - running_mean
    data *= inv_std * gamma.data
    data += beta.data

    def backward(g):
        if gamma.requires_grad:
            x_hat = (x.data - running_mean) * inv_std
            _accumulate(gamma, (g * x_hat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accumulate(x, (g * (gamma.data * inv_std)).astype(x.data.dtype, copy=False))

    return _make_node(data.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
) -> dict:
    """Compare analytic gradients of scalar-valued `f` to central differences.

    Inputs must be float64 tensors with requires_grad set.  The error metric
    is |analytic - numeric| / max(1, |analytic|, |numeric|), i.e. absolute
    below unit scale and relative above it.  Returns a report dict with the
    max error, per-input errors, and a pass flag against `tol`.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()

    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check target must be scalar-valued")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    per_input = []
    for t, a in zip(inputs, analytic):
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(f(*inputs).data)
                flat[i] = orig - step
                lo = float(f(*inputs).data)
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(num)))
        per_input.append(float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0)

    max_err = max(per_input) if per_input else 0.0
    return {"max_rel_err": max_err, "per_input": per_input, "passed": max_err < tol}
