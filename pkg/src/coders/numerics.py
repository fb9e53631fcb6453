"""Dense float64 arrays with a small reverse-mode tape.

Only the operations the pipeline needs are provided. Every op records a
closure that maps the output gradient to input gradients; ``backward``
walks the tape in reverse topological order.
"""
import json
import math
import struct

import numpy as np
from scipy.special import erf


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A learnable leaf. Gradients accumulate until ``zero_grad`` is called."""

    __slots__ = ()

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _make(data, parents, backward_fn):
    req = _needs_grad(*parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root, grad=None):
    """Accumulate d(root)/d(leaf) into every ``requires_grad`` leaf."""
    if grad is None:
        if root.data.size != 1:
            raise DimensionError("backward() without grad needs a scalar output")
        grad = np.ones_like(root.data)
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, W, b=None):
    """y = x W + b over the last axis of ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    y = y.reshape(lead + (W.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W, b) if b is not None else (x, W)
    return _make(y, parents, bw if b is not None else (lambda g: bw(g)[:2]))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p):
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return _make(x * cdf, (a,),
                 lambda g: (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, idx, g)
        else:
            ga[idx] = g
        return (ga,)

    return _make(a.data[idx], (a,), bw)


def concat(ts, axis=-1):
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), bw)


def stack(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), bw)


def where_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    a = as_tensor(a)
    keep = ~np.asarray(mask, dtype=bool)
    out = np.where(keep, a.data, value)
    return _make(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalization and attention building blocks


def softmax(a, axis=-1):
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {a.ndim}-d input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def bw(g):
        w = np.exp(a.data - m) / s
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), bw)


def normalize(v, axis=-1):
    """v / ||v|| along ``axis``."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    u = v.data / norm

    def bw(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return _make(u, (v,), bw)


def cross(a, b):
    """Cross product over the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.cross(a.data, b.data)

    def bw(g):
        # d(a x b) . g  =  (b x g) . da  +  (g x a) . db
        return (_unbroadcast(np.cross(b.data, g), a.shape),
                _unbroadcast(np.cross(g, a.data), b.shape))

    return _make(out, (a, b), bw)


def multi_head_attention(q_in, k_in, v_in, params, n_heads):
    """Scaled dot-product attention with ``n_heads`` heads.

    ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors; inputs are
    ``(..., N, C)`` with a shared leading batch shape.
    """
    C = q_in.shape[-1]
    if C % n_heads:
        raise ConfigurationError(f"model dim {C} not divisible by {n_heads} heads")
    dh = C // n_heads
    q = linear(q_in, params["wq"], params["bq"])
    k = linear(k_in, params["wk"], params["bk"])
    v = linear(v_in, params["wv"], params["bv"])

    def split(t):
        lead = t.shape[:-2]
        n = t.shape[-2]
        t = reshape(t, lead + (n, n_heads, dh))
        nd = len(lead)
        return transpose(t, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    qh, kh, vh = split(q), split(k), split(v)
    nd = qh.ndim
    kt = transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = mul(matmul(qh, kt), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, vh)
    lead = ctx.shape[:-3]
    nl = len(lead)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (q_in.shape[-2], C))
    return linear(ctx, params["wo"], params["bo"])


# ---------------------------------------------------------------------------
# optimisation


class OptimState:
    def __init__(self, params):
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.step = 0


def adamw_step(params, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def cosine_lr(step, total_steps, lr0):
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn, params, epsilon=1e-5, probes=None, rng=None, floor=1e-6):
    """Max elementwise relative error between analytic and central-difference gradients.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. ``probes`` limits how many coordinates per tensor are
    checked (all when None). The relative error uses
    ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    out = fn()
    backward(out)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            coords = rng.choice(flat.size, size=probes, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn().data)
            flat[i] = orig - epsilon
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            an = ga.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout: 8-byte little-endian header length, UTF-8 JSON header, then the
# concatenated little-endian float64 payload. Header "tensors" entries are
# [name, shape, offset] with offset counted in float64 elements.

_MAGIC = b"CODRCKPT"


def save_checkpoint(path, tensors, meta=None):
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append([name, list(arr.shape), offset])
        chunks.append(arr.reshape(-1))
        offset += arr.size
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    tensors = {}
    for name, shape, offset in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = payload[offset:offset + n].reshape(shape).astype(np.float64)
    return tensors, header["meta"]


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")
    return t
