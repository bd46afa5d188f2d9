#!/usr/bin/python3

import fnmatch
from collections import OrderedDict

import numpy as np

from stylecraft import tensor as T
from stylecraft.errors import ConfigurationError, ShapeError


def xavier_uniform(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module(object):
    """Parameters are discovered from attributes, in assignment order."""

    def named_parameters(self, prefix=''):
        for key, value in vars(self).items():
            if key.startswith('_'):
                continue
            if isinstance(value, T.Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                for item in value.named_parameters(prefix + key + '.'):
                    yield item
            elif isinstance(value, (list, tuple)):
                for i, child in enumerate(value):
                    if isinstance(child, Module):
                        for item in child.named_parameters('%s%s.%d.' % (prefix, key, i)):
                            yield item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return OrderedDict((name, p.data) for name, p in self.named_parameters())

    def load_state_dict(self, arrays, strict=True):
        params = OrderedDict(self.named_parameters())
        missing = [name for name in params if name not in arrays]
        if strict and missing:
            raise KeyError("Missing tensors: %s" % ', '.join(missing[:5]))
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise ShapeError("Tensor %s has shape %s, expected %s." % (name, value.shape, p.shape))
            p.data = np.ascontiguousarray(value, dtype=p.data.dtype)

    def matching(self, globs):
        return [(name, p) for name, p in self.named_parameters() if any(fnmatch.fnmatchcase(name, g) for g in globs)]

    def set_trainable(self, globs):
        for name, p in self.named_parameters():
            p.requires_grad = any(fnmatch.fnmatchcase(name, g) for g in globs)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def count(self):
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):

    def __init__(self, rng, fan_in, fan_out, bias=True, zero=False, gain=1.0):
        init = np.zeros((fan_in, fan_out)) if zero else xavier_uniform(rng, fan_in, fan_out, gain)
        self.weight = T.Parameter(init)
        if bias:
            self.bias = T.Parameter(np.zeros(fan_out))
        else:
            self.bias = None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):

    def __init__(self, width):
        self.gain = T.Parameter(np.ones(width))
        self.bias = T.Parameter(np.zeros(width))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class Attention(Module):
    """Multi-head attention with q/k/v/output projections; self-attention when no context is given."""

    def __init__(self, rng, width, heads, zero_output=False):
        if width % heads != 0:
            raise ConfigurationError("Width %d is not divisible by %d heads." % (width, heads))
        self.heads = heads
        self.query = Linear(rng, width, width)
        self.key = Linear(rng, width, width)
        self.value = Linear(rng, width, width)
        self.output = Linear(rng, width, width, zero=zero_output)

    def weights(self):
        return (self.query.weight, self.query.bias, self.key.weight, self.key.bias,
                self.value.weight, self.value.bias, self.output.weight, self.output.bias)

    def __call__(self, x, context=None, mask=None, value=None):
        context = x if context is None else context
        value = context if value is None else value
        return T.multi_head_attention(x, context, value, self.heads, self.weights(), mask=mask)


class FeedForward(Module):

    def __init__(self, rng, width, multiplier=4):
        self.hidden = Linear(rng, width, width * multiplier)
        self.out = Linear(rng, width * multiplier, width)

    def __call__(self, x):
        return self.out(T.gelu(self.hidden(x)))


class TransformerBlock(Module):

    def __init__(self, rng, width, heads):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.ff = FeedForward(rng, width)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class QueryBlock(Module):
    """Self-attention over queries, cross-attention to a token context, feed-forward."""

    def __init__(self, rng, width, heads):
        self.norm_self = LayerNorm(width)
        self.self_attn = Attention(rng, width, heads)
        self.norm_query = LayerNorm(width)
        self.norm_context = LayerNorm(width)
        self.cross_attn = Attention(rng, width, heads)
        self.norm_ff = LayerNorm(width)
        self.ff = FeedForward(rng, width)

    def __call__(self, queries, context):
        queries = queries + self.self_attn(self.norm_self(queries))
        queries = queries + self.cross_attn(self.norm_query(queries), self.norm_context(context))
        return queries + self.ff(self.norm_ff(queries))


def sinusoidal(steps, width, max_period=10000.0):
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
