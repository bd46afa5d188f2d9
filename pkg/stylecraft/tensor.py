#!/usr/bin/python3

"""
Dense row-major tensors with reverse-mode differentiation.

Every op records its inputs and an adjoint closure when at least one input
requires a gradient. `Tensor.backward` orders the recorded graph into a
`Tape` and replays the adjoints in reverse. Broadcasting is limited to an
operand whose shape is a suffix (trailing broadcast, e.g. a bias row) or a
prefix (leading-axis batch, e.g. one scalar per sample) of the other.
"""

import contextlib
import math
import threading

import numpy as np

from stylecraft.errors import ConfigurationError, NumericalError, ShapeError

DTYPES = {'f32': np.float32, 'f64': np.float64}
LN_EPS = 1e-5

_state = threading.local()


def default_dtype():
    return getattr(_state, 'dtype', np.float32)


def dtype_name(dtype):
    return 'f64' if np.dtype(dtype) == np.float64 else 'f32'


@contextlib.contextmanager
def precision(mode):
    if mode not in DTYPES:
        raise ConfigurationError("Precision must be f32 or f64, but you entered %s." % mode)
    previous = default_dtype()
    _state.dtype = DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled():
    return getattr(_state, 'grad', True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class Tensor(object):

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._adjoint = None
        self._op = 'leaf'

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
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar, got shape %s." % (self.shape,))
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        Tape.record(self).replay(np.asarray(grad, dtype=self.data.dtype))

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (self.shape, dtype_name(self.data.dtype), self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return transpose(self, axes)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


class Parameter(Tensor):

    def __init__(self, data, name=None):
        super(Parameter, self).__init__(data, requires_grad=True, name=name)


class Tape(object):
    """Ordered record of the ops reachable from one output; inputs precede their consumers."""

    def __init__(self, records):
        self.records = records

    def __len__(self):
        return len(self.records)

    @classmethod
    def record(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, seed):
        pending = {id(self.records[-1]): seed}
        for node in reversed(self.records):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._adjoint is None:
                continue
            for parent, pg in zip(node._parents, node._adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, adjoint, op):
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=default_dtype())
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._adjoint = adjoint
    else:
        out._parents = ()
        out._adjoint = None
    return out


#=====================================================================#
# Elementwise
#=====================================================================#

def _layout(a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape, 'full', 'full'
    if len(b_shape) <= len(a_shape):
        if a_shape[len(a_shape) - len(b_shape):] == b_shape:
            return a_shape, 'full', 'suffix'
        if a_shape[:len(b_shape)] == b_shape:
            return a_shape, 'full', 'prefix'
    if len(a_shape) < len(b_shape):
        if b_shape[len(b_shape) - len(a_shape):] == a_shape:
            return b_shape, 'suffix', 'full'
        if b_shape[:len(a_shape)] == a_shape:
            return b_shape, 'prefix', 'full'
    raise ShapeError("Operands of shapes %s and %s do not align." % (a_shape, b_shape))


def _aligned(data, mode, ndim):
    if mode == 'prefix':
        return data.reshape(data.shape + (1,) * (ndim - data.ndim))
    return data


def _reduced(grad, mode, shape):
    if mode == 'suffix':
        grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    elif mode == 'prefix':
        grad = grad.sum(axis=tuple(range(len(shape), grad.ndim)))
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape, ma, mb = _layout(a.shape, b.shape)
    n = len(shape)
    data = _aligned(a.data, ma, n) + _aligned(b.data, mb, n)

    def adjoint(g):
        return _reduced(g, ma, a.shape), _reduced(g, mb, b.shape)

    return _result(data, (a, b), adjoint, 'add')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    shape, ma, mb = _layout(a.shape, b.shape)
    n = len(shape)
    xa, xb = _aligned(a.data, ma, n), _aligned(b.data, mb, n)

    def adjoint(g):
        return _reduced(g * xb, ma, a.shape), _reduced(g * xa, mb, b.shape)

    return _result(xa * xb, (a, b), adjoint, 'mul')


def neg(x):
    return _result(-x.data, (x,), lambda g: (-g,), 'neg')


def square(x):
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), 'square')


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("where needs equal shapes, got %s and %s." % (a.shape, b.shape))
    mask = np.broadcast_to(_aligned(np.asarray(cond, dtype=bool), 'prefix', a.ndim), a.shape)

    def adjoint(g):
        zero = np.zeros_like(g)
        return np.where(mask, g, zero), np.where(mask, zero, g)

    return _result(np.where(mask, a.data, b.data), (a, b), adjoint, 'where')


def gelu(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)

    def adjoint(g):
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * d,)

    return _result(0.5 * x.data * (1.0 + t), (x,), adjoint, 'gelu')


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), 'relu')


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), 'sigmoid')


#=====================================================================#
# Reductions and layout
#=====================================================================#

def reduce_sum(x, axis=None):
    data = x.data.sum(axis=axis)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(data, (x,), adjoint, 'sum')


def reduce_mean(x, axis=None):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis), 1.0 / float(count))


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), 'reshape')


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), 'transpose')


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError("Cannot concatenate %s and %s along axis %d." % (tensors[0].shape, t.shape, axis))
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint, 'concat')


def slice_axis(x, axis, start, stop):
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def adjoint(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), adjoint, 'slice')


def expand(x, axis, n):
    """Insert a new axis at `axis` and repeat `x` n times along it."""
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(data, (x,), lambda g: (g.sum(axis=axis),), 'expand')


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)

    def adjoint(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), adjoint, 'embedding')


def unfold2d(x, kernel, stride=1, padding=0):
    """im2col for channels-last images: (B, H, W, C) -> (B, Ho, Wo, kernel*kernel*C)."""
    if x.ndim != 4:
        raise ShapeError("unfold2d expects (B, H, W, C), got %s." % (x.shape,))
    b, h, w, c = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    rows = (np.arange(ho) * stride)[:, None] + np.arange(kernel)[None, :]
    cols = (np.arange(wo) * stride)[:, None] + np.arange(kernel)[None, :]
    iy = rows[:, None, :, None]
    ix = cols[None, :, None, :]
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    data = padded[:, iy, ix, :].reshape(b, ho, wo, kernel * kernel * c)

    def adjoint(g):
        gp = np.zeros((padded.shape[1], padded.shape[2], b, c), dtype=g.dtype)
        patches = np.transpose(g.reshape(b, ho, wo, kernel, kernel, c), (1, 2, 3, 4, 0, 5))
        np.add.at(gp, (np.broadcast_to(iy, (ho, wo, kernel, kernel)), np.broadcast_to(ix, (ho, wo, kernel, kernel))), patches)
        gp = np.transpose(gp, (2, 0, 1, 3))
        return (gp[:, padding:padding + h, padding:padding + w, :],)

    return _result(data, (x,), adjoint, 'unfold2d')


def upsample2x(x):
    b, h, w, c = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result(data, (x,), lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),), 'upsample2x')


#=====================================================================#
# Linear algebra and neural-net kernels
#=====================================================================#

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise ShapeError("Cannot multiply %s by %s." % (a.shape, b.shape))

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), adjoint, 'matmul')


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), adjoint, 'softmax')


def layer_norm(x, gain, bias, eps=LN_EPS):
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least 2 features, got %d." % d)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def adjoint(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), adjoint, 'layer_norm')


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def adjoint(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _result(loss, (logits,), adjoint, 'cross_entropy')


def mse(pred, target):
    return reduce_mean(square(add(pred, neg(as_tensor(target)))))


def split_heads(x, heads):
    b, length, d = x.shape
    return transpose(reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x):
    b, heads, length, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, heads * dh))


def multi_head_attention(q, k, v, heads, weights, mask=None):
    """
    Scaled dot-product attention over `heads` heads.

    weights holds (wq, bq, wk, bk, wv, bv, wo, bo); inputs are (L, d) or
    (B, L, d). mask is an optional additive array over the key axis.
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ConfigurationError("Width %d is not divisible by %d heads." % (d, heads))
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = [reshape(t, (1,) + t.shape) for t in (q, k, v)]
    wq, bq, wk, bk, wv, bv, wo, bo = weights
    qh = split_heads(linear(q, wq, bq), heads)
    kh = split_heads(linear(k, wk, bk), heads)
    vh = split_heads(linear(v, wv, bv), heads)
    logits = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        logits = add(logits, Tensor(mask))
    out = linear(merge_heads(matmul(softmax(logits, -1), vh)), wo, bo)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


#=====================================================================#
# Gradient checking
#=====================================================================#

def grad_check(f, params, eps=1e-4, max_coords=None, seed=0, atol=1e-8):
    """
    Max relative error |a - n| / max(|a|, |n|, 1e-8) between analytic
    gradients and central differences.

    f is a zero-argument callable returning a scalar Tensor and must be
    deterministic. With max_coords, that many coordinates per parameter are
    drawn with the given seed instead of checking all of them. Coordinates
    whose absolute difference is at most atol count as exact, so structural
    zeros do not compare round-off against round-off.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigurationError("grad_check needs 64-bit mode, but %s is %s." % (p.name or 'a parameter', p.data.dtype))
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar function, got shape %s." % (loss.shape,))
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for index, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                plus = float(f().data)
                flat[i] = original - eps
                minus = float(f().data)
            flat[i] = original
            analytic_i = float(a.reshape(-1)[i])
            if not (np.isfinite(plus) and np.isfinite(minus) and np.isfinite(analytic_i)):
                raise NumericalError("Non-finite value while checking %s[%d]." % (p.name or 'param%d' % index, i))
            numeric = (plus - minus) / (2.0 * eps)
            diff = abs(analytic_i - numeric)
            error = 0.0 if diff <= atol else diff / max(abs(analytic_i), abs(numeric), 1e-8)
            worst = max(worst, error)
    return worst
