"""Dense float64 tensors with a reverse-mode tape, an Adam optimizer and
counter-based random streams.

Only the handful of ops needed by the segmentation model, the losses and
the optimizer are provided.  Every op checks its output for non-finite
values and raises :class:`NumericFault` naming the op.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class NumericFault(ArithmeticError):
    """A NaN or Inf showed up in a forward value or a gradient."""


class ContractViolation(ValueError):
    """An op was called with inputs outside its contract (shape, range, ...)."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values produced by '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        return tape_backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward, op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- tape ---------------------------------------------------------------------

def tape_backward(root):
    """Propagate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a dict mapping ``id(leaf)`` to its gradient array.  Gradients are
    accumulated into existing ``.grad`` arrays, as with most tape libraries;
    call ``zero_grad`` between steps.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")

    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward of {node.op}")
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


# -- elementwise and reductions ----------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a, exponent):
    exponent = float(exponent)
    if exponent == 2.0:
        out = a.data * a.data
    else:
        out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), backward, "pow")


def absolute(a):
    # sign(0) = 0 is a valid subgradient
    def backward(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), backward, "abs")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a):
    def backward(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), backward, "log")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def relu(a):
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def take(a, index):
    """Basic or advanced indexing; backward scatters with accumulation."""

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "take")


def pick(a, rows, cols):
    """``a[rows, cols]`` for a 2-D tensor with distinct (row, col) pairs."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        return (full,)

    return _make(a.data[rows, cols], (a,), backward, "pick")


def take_rows(a, rows):
    """``a[rows]`` along axis 0 (faster backward than the general ``take``)."""
    rows = np.asarray(rows)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), backward, "take_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def sort_columns(a):
    """Sort a 2-D tensor along axis 0, column by column.

    Stable sort order fixes which subgradient is used at ties.
    """
    order = np.argsort(a.data, axis=0, kind="stable")
    out = np.take_along_axis(a.data, order, axis=0)

    def backward(g):
        full = np.empty_like(g)
        np.put_along_axis(full, order, g, axis=0)
        return (full,)

    return _make(out, (a,), backward, "sort_columns")


# -- softmax family ------------------------------------------------------------

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def logsumexp(x, axis=-1, keepdims=False):
    """Plain-array log-sum-exp (no tape)."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


# -- image ops (channels-last: B x W x H x C) --------------------------------------

def _windows(xp, kh, kw, stride, out_h, out_w):
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # v: B x (Hp-kh+1) x (Wp-kw+1) x C x kh x kw
    v = v[:, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    return v.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation on channels-last input.

    ``weight`` is kh x kw x C_in x C_out, ``bias`` is C_out.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ContractViolation(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, _, cout = weight.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    out_h = (Hp - kh) // stride + 1
    out_w = (Wp - kw) // stride + 1
    cols = _windows(xp, kh, kw, stride, out_h, out_w).reshape(B * out_h * out_w, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * C, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, out_h, out_w, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, out_h, out_w, kh, kw, C)
            gxp = np.zeros((B, Hp, Wp, C))
            hs = (out_h - 1) * stride + 1
            ws = (out_w - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + hs : stride, j : j + ws : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding : Hp - padding, padding : Wp - padding, :] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def upsample_nearest(x, factor=2):
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return _make(out, (x,), backward, "upsample_nearest")


def pixel_linear(x, weight, bias=None):
    """Per-pixel affine map over the last axis (a 1x1 convolution)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[1],))


# -- gradient checking ------------------------------------------------------------

def gradient_check(fn, point, eps=1e-6, coords=None):
    """Max relative error between the tape gradient and central differences.

    ``fn`` maps a Tensor to a scalar Tensor.  ``coords`` optionally limits the
    check to a subset of flat coordinates (for large inputs).
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    x = Tensor(x0.copy(), requires_grad=True)
    tape_backward(fn(x))
    analytic = x.grad.reshape(-1)

    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        fp = fn(Tensor(plus.reshape(x0.shape))).item()
        fm = fn(Tensor(minus.reshape(x0.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericFault(f"function not finite at perturbed coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst


# -- optimizer ---------------------------------------------------------------------

class AdamState:
    """First/second moment estimates and step counter for a parameter list."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.0):
    """One in-place Adam update with bias correction.

    ``decay`` adds ``decay * param`` to each gradient (L2 penalty).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params, grads and optimizer state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ContractViolation(f"shape mismatch for parameter {i}: {p.data.shape} vs {g.shape}")
        if decay:
            g = g + decay * p.data
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        # overflow shows up as non-finite parameters, which callers check for
        with np.errstate(over="ignore", invalid="ignore"):
            p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.0):
        self.params = list(params)
        self.state = AdamState(self.params)
        self.lr, self.beta1, self.beta2, self.eps, self.decay = lr, beta1, beta2, eps, decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps, self.decay)


# -- random streams -------------------------------------------------------------------

class RngStream:
    """Deterministic random stream keyed by (seed, stream name).

    Backed by numpy's Philox counter-based bit generator; ``counter`` counts
    how many times ``generator()`` has been handed out by ``spawn``.
    """

    def __init__(self, seed, name=""):
        self.seed = int(seed) & (2**64 - 1)
        self.name = name
        key = np.random.SeedSequence([self.seed, *_name_words(name)]).generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.counter = 0

    @property
    def gen(self):
        return self._gen

    def spawn(self, name):
        """Independent child stream; identical children for identical names."""
        self.counter += 1
        return RngStream(self.seed, f"{self.name}/{name}")

    def __getattr__(self, attr):
        # forward draw methods (normal, integers, choice, ...) to the generator
        return getattr(self._gen, attr)


def _name_words(name):
    data = name.encode("utf-8")
    return [int.from_bytes(data[i : i + 4].ljust(4, b"\0"), "little") for i in range(0, len(data), 4)]
