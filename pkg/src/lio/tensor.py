"""Reverse-mode automatic differentiation over dense float64 arrays.

Graph nodes are ``Value`` objects holding a numpy array, the producing
op-tag, and parent links.  Ops are module functions that build the graph;
``backward`` runs one reverse topological sweep and accumulates gradients
additively across fan-out.

Conventions, fixed once:
  * all math in 64-bit floats;
  * broadcast rule is trailing-dimension alignment (extents equal or 1);
  * ReLU subgradient at exactly 0 is 0;
  * max reductions route gradient to the first maximal element in
    row-major order;
  * sqrt uses a guarded derivative: 0 whenever the radicand < 1e-12.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DomainError, ShapeError

SQRT_GUARD = 1e-12

# Optional probe for gradient-check harnesses: called as hook(op, margin)
# where margin is the distance to the nearest non-differentiable point
# (ReLU kink, sqrt guard, max tie).  None disables probing.
_trace_hook = None


def set_trace_hook(fn) -> None:
    global _trace_hook
    _trace_hook = fn


def _trace(op: str, margin: float) -> None:
    if _trace_hook is not None:
        _trace_hook(op, float(margin))


class Value:
    """One node of the computation graph."""

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, data, parents=(), op="leaf", requires_grad=False, _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def const(data) -> Value:
    return Value(data)


def param(data) -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True)


def detach(v: Value) -> Value:
    """A leaf sharing v's array; gradients never flow through it."""
    return Value(v.data)


# ---------------------------------------------------------------------------
# broadcast helpers

def _check_broadcast(a_shape, b_shape):
    for x, y in zip(reversed(a_shape), reversed(b_shape)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: Value, b: Value, op: str, fwd, dfa, dfb) -> Value:
    _check_broadcast(a.shape, b.shape)
    out_data = fwd(a.data, b.data)

    def backward(g):
        return ((a, _unbroadcast(dfa(g), a.shape)), (b, _unbroadcast(dfb(g), b.shape)))

    return Value(out_data, (a, b), op, _backward=backward)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Value, b: Value) -> Value:
    return _binary(a, b, "add", np.add, lambda g: g, lambda g: g)


def sub(a: Value, b: Value) -> Value:
    return _binary(a, b, "sub", np.subtract, lambda g: g, lambda g: -g)


def mul(a: Value, b: Value) -> Value:
    return _binary(a, b, "mul", np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def scale(a: Value, s: float) -> Value:
    s = float(s)
    return Value(a.data * s, (a,), "scale", _backward=lambda g: ((a, g * s),))


def relu(a: Value) -> Value:
    if a.data.size:
        _trace("relu", np.min(np.abs(a.data)))
    mask = a.data > 0
    return Value(
        np.maximum(a.data, 0.0), (a,), "relu",
        _backward=lambda g: ((a, g * mask),),
    )


def sqrt(a: Value) -> Value:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative input")
    if a.data.size:
        _trace("sqrt", np.min(a.data))
    out = np.sqrt(a.data)

    def backward(g):
        safe = a.data >= SQRT_GUARD
        d = np.zeros_like(a.data)
        np.divide(0.5, out, out=d, where=safe)
        return ((a, g * d),)

    return Value(out, (a,), "sqrt", _backward=backward)


def square(a: Value) -> Value:
    return Value(a.data * a.data, (a,), "square", _backward=lambda g: ((a, g * 2.0 * a.data),))


_ELEMENTWISE = {"relu": relu, "add": add, "sub": sub, "mul": mul, "scale": scale,
                "sqrt": sqrt, "square": square}


def elementwise(kind: str, *inputs) -> Value:
    """Dispatch by kind: relu, add, sub, mul, scale, sqrt, square."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractViolation(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Value, shape) -> Value:
    shape = tuple(shape)
    return Value(a.data.reshape(shape), (a,), "reshape",
                 _backward=lambda g: ((a, g.reshape(a.shape)),))


def concat(a: Value, b: Value, axis: int) -> Value:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat ranks differ: {a.shape} vs {b.shape}")
    ax = axis % a.ndim if a.ndim else 0
    for i, (x, y) in enumerate(zip(a.shape, b.shape)):
        if i != ax and x != y:
            raise ShapeError(f"concat off-axis extent mismatch at dim {i}: {a.shape} vs {b.shape}")
    na = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ((a, ga), (b, gb))

    return Value(np.concatenate([a.data, b.data], axis=ax), (a, b), "concat", _backward=backward)


def take(a: Value, index: int, axis: int = -1) -> Value:
    """Select one index along an axis (rank drops by one)."""
    ax = axis % a.ndim
    out = np.take(a.data, index, axis=ax)

    def backward(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[ax] = index
        ga[tuple(sl)] = g
        return ((a, ga),)

    return Value(out, (a,), "take", _backward=backward)


def gather_cells(a: Value, rows, cols) -> Value:
    """Pick one (row, col) cell per batch item from (B, N, N, C) -> (B, C)."""
    if a.ndim != 4:
        raise ShapeError(f"gather_cells expects rank 4, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    bidx = np.arange(a.shape[0])
    out = a.data[bidx, rows, cols, :]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (bidx, rows, cols), g)
        return ((a, ga),)

    return Value(out, (a,), "gather_cells", _backward=backward)


# ---------------------------------------------------------------------------
# reductions

def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def _reduce_common(a: Value, axes):
    axes = _normalize_axes(axes, a.ndim)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    for ax in axes:
        if a.shape[ax] == 0:
            raise DomainError(f"empty reduction axis {ax} of shape {a.shape}")
    return axes


def reduce_sum(a: Value, axes=None) -> Value:
    axes = _reduce_common(a, axes)
    out = a.data.sum(axis=axes)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return ((a, np.broadcast_to(ge, a.shape).copy()),)

    return Value(out, (a,), "sum", _backward=backward)


def reduce_mean(a: Value, axes=None) -> Value:
    axes = _reduce_common(a, axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return ((a, np.broadcast_to(ge, a.shape) / count),)

    return Value(out, (a,), "mean", _backward=backward)


def reduce_max(a: Value, axes=None) -> Value:
    axes = _reduce_common(a, axes)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    # move reduced axes last so each reduced block is contiguous row-major
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    kshape = moved.shape[:len(kept)]
    flat = moved.reshape(int(np.prod(kshape, dtype=np.intp)) if kshape else 1, -1)
    arg = np.argmax(flat, axis=1)  # first maximum in row-major order
    out_flat = flat[np.arange(flat.shape[0]), arg]
    if flat.shape[1] > 1:
        part = np.partition(flat, -2, axis=1)
        _trace("max", np.min(part[:, -1] - part[:, -2]))
    out = out_flat.reshape(kshape)

    def backward(g):
        gm = np.zeros_like(flat)
        gm[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        gm = gm.reshape(moved.shape)
        inv = np.argsort(perm)
        return ((a, np.transpose(gm, inv)),)

    return Value(out, (a,), "max", _backward=backward)


def global_avg_pool(a: Value) -> Value:
    """Mean over the two spatial axes of (..., H, W, C) -> (..., C)."""
    if a.ndim < 3:
        raise ShapeError(f"global_avg_pool expects rank >= 3, got {a.shape}")
    return reduce_mean(a, axes=(a.ndim - 3, a.ndim - 2))


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(kind: str, a: Value, axes=None) -> Value:
    if kind == "global-average-pool":
        return global_avg_pool(a)
    try:
        fn = _REDUCE[kind]
    except KeyError:
        raise ContractViolation(f"unknown reduction kind {kind!r}") from None
    return fn(a, axes)


# ---------------------------------------------------------------------------
# conv2d / dense

def _conv_pad(H, W, k, stride, padding):
    if padding == "valid":
        if H < k or W < k:
            raise ShapeError(f"valid conv needs input >= kernel, got {(H, W)} vs k={k}")
        return (H - k) // stride + 1, (W - k) // stride + 1, 0, 0, 0, 0
    if padding == "same":
        Ho = (H - 1) // stride + 1
        Wo = (W - 1) // stride + 1
        ph = max((Ho - 1) * stride + k - H, 0)
        pw = max((Wo - 1) * stride + k - W, 0)
        return Ho, Wo, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")


def _conv_check(x_shape, kernel_shape, stride):
    if len(kernel_shape) != 4 or kernel_shape[0] != kernel_shape[1]:
        raise ShapeError(f"kernel must be (k, k, Cin, Cout), got {kernel_shape}")
    if kernel_shape[0] % 2 != 1:
        raise ContractViolation(f"kernel size must be odd, got {kernel_shape[0]}")
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    if len(x_shape) not in (3, 4):
        raise ShapeError(f"conv2d input must be rank 3 or 4, got {x_shape}")
    if x_shape[-1] != kernel_shape[2]:
        raise ShapeError(f"input channels {x_shape[-1]} != kernel channels {kernel_shape[2]}")


def _conv_forward(xd: np.ndarray, kern: np.ndarray, stride: int, padding: str,
                  keep_taps: bool):
    """Shared conv kernel: one GEMM per kernel tap, accumulated in fixed
    (ky, kx) order so summation is deterministic."""
    B, H, W, Cin = xd.shape
    k = kern.shape[0]
    Cout = kern.shape[3]
    Ho, Wo, pt, pb, pl, pr = _conv_pad(H, W, k, stride, padding)
    if pt | pb | pl | pr:
        xp = np.zeros((B, H + pt + pb, W + pl + pr, Cin))
        xp[:, pt:pt + H, pl:pl + W, :] = xd
    else:
        xp = xd
    taps = [] if keep_taps else None
    out2 = np.zeros((B * Ho * Wo, Cout))
    for ky in range(k):
        ye = ky + (Ho - 1) * stride + 1
        for kx in range(k):
            xe = kx + (Wo - 1) * stride + 1
            xs = np.ascontiguousarray(xp[:, ky:ye:stride, kx:xe:stride, :]).reshape(-1, Cin)
            out2 += xs @ kern[ky, kx]
            if keep_taps:
                taps.append(xs)
    out = out2.reshape(B, Ho, Wo, Cout)
    return out, taps, (xp.shape, Ho, Wo, pt, pl)


def conv2d_raw(xd: np.ndarray, kern: np.ndarray, stride: int = 1,
               padding: str = "same") -> np.ndarray:
    """Forward-only convolution on plain arrays; same kernel code as conv2d."""
    _conv_check(xd.shape, kern.shape, stride)
    squeeze = xd.ndim == 3
    out, _, _ = _conv_forward(xd[None] if squeeze else xd, kern, stride, padding, False)
    return out[0] if squeeze else out


def conv2d(x: Value, kernel: Value, stride: int = 1, padding: str = "same") -> Value:
    """2-D convolution, NHWC input (rank 3 or 4), kernel (k, k, Cin, Cout).

    Output extents: valid -> floor((H-k)/stride)+1; same -> floor((H-1)/stride)+1
    with zero padding split evenly (extra row/col at bottom/right).
    """
    _conv_check(x.shape, kernel.shape, stride)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, H, W, Cin = xd.shape
    k = kernel.shape[0]
    Cout = kernel.shape[3]
    out, taps, (xp_shape, Ho, Wo, pt, pl) = _conv_forward(xd, kernel.data, stride, padding, True)

    def backward(g):
        gd = g[None] if squeeze else g
        g2 = gd.reshape(B * Ho * Wo, Cout)
        gk = np.empty(kernel.shape)
        gxp = np.zeros(xp_shape)
        for i, (ky, kx) in enumerate((a, b) for a in range(k) for b in range(k)):
            gk[ky, kx] = taps[i].T @ g2
            ye = ky + (Ho - 1) * stride + 1
            xe = kx + (Wo - 1) * stride + 1
            gxp[:, ky:ye:stride, kx:xe:stride, :] += \
                (g2 @ kernel.data[ky, kx].T).reshape(B, Ho, Wo, Cin)
        gx = gxp[:, pt:pt + H, pl:pl + W, :]
        return ((x, gx[0] if squeeze else gx), (kernel, gk))

    out_v = out[0] if squeeze else out
    return Value(out_v, (x, kernel), "conv2d", _backward=backward)


def dense(x: Value, weight: Value, bias: Value) -> Value:
    """Affine map on the trailing axis: (..., d) @ (d, m) + (m,)."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got {weight.shape}")
    d, m = weight.shape
    if x.shape[-1] != d:
        raise ShapeError(f"input dim {x.shape[-1]} != weight rows {d}")
    if bias.shape != (m,):
        raise ShapeError(f"bias must be ({m},), got {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d)
    out = (x2 @ weight.data + bias.data).reshape(*lead, m)

    def backward(g):
        g2 = g.reshape(-1, m)
        return ((x, (g2 @ weight.data.T).reshape(x.shape)),
                (weight, x2.T @ g2),
                (bias, g2.sum(axis=0)))

    return Value(out, (x, weight, bias), "dense", _backward=backward)


# ---------------------------------------------------------------------------
# classification loss

def softmax_cross_entropy(logits: Value, onehot) -> Value:
    """-sum(l * log softmax(logits)); rank 1 -> scalar, rank 2 -> per-row vector.

    Stabilized by max subtraction.  Gradient wrt logits is softmax - l.
    """
    if logits.ndim not in (1, 2):
        raise ShapeError(f"logits must be rank 1 or 2, got {logits.shape}")
    if logits.shape[-1] == 0:
        raise DomainError("zero classes")
    l = onehot.data if isinstance(onehot, Value) else np.asarray(onehot, dtype=np.float64)
    if l.shape != logits.shape:
        raise ShapeError(f"label shape {l.shape} != logits shape {logits.shape}")
    sums = l.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise DomainError("label rows must sum to 1")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    y = np.exp(logp)
    loss = -(l * logp).sum(axis=-1)

    def backward(g):
        return ((logits, (y - l) * np.expand_dims(g, -1)),)

    return Value(loss, (logits,), "softmax_xent", _backward=backward)


# ---------------------------------------------------------------------------
# backward pass

def _topo(root: Value):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value, leaves=None) -> dict:
    """Reverse sweep from a scalar loss.

    Populates ``.grad`` on every reachable node that requires grad and
    returns a map from leaf Value to its gradient array.  Leaves passed in
    but unreachable get zeros.
    """
    if loss.data.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in node._backward(node.grad):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros(parent.shape, dtype=np.float64)
            parent.grad += g
    grads = {}
    if leaves is not None:
        for leaf in leaves:
            grads[id(leaf)] = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
    return grads


def count_graph_ops(root: Value) -> int:
    """Number of non-leaf nodes reachable from root (inference cost proxy)."""
    seen, stack, n = set(), [root], 0
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.parents:
            n += 1
        stack.extend(node.parents)
    return n
