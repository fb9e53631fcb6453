"""Parameter containers built on :mod:`coders.numerics`."""
import math

import numpy as np

from . import numerics as nx
from .numerics import Parameter


class Module:
    """Holds named Parameters and child modules.

    Parameter names are dotted paths, assigned when the module tree is
    built, so ``state_dict`` keys are stable across runs.
    """

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}."))
        return out

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise nx.DimensionError(f"{name}: shape {arr.shape} != {p.data.shape}")
                p.data[...] = arr

    def zero_grad(self):
        nx.zero_grad(self.parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, scale=None):
        # uniform fan-in init, as in common deep-learning defaults
        bound = scale if scale is not None else 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=n_out) if bias else np.zeros(n_out))

    def __call__(self, x):
        return nx.linear(x, self.weight, self.bias)


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nx.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, dim, n_heads, rng):
        if dim % n_heads:
            raise nx.ConfigurationError(f"model dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        bound = math.sqrt(6.0 / (2 * dim))  # xavier-uniform
        for key in ("q", "k", "v", "o"):
            setattr(self, "w" + key, Parameter(rng.uniform(-bound, bound, size=(dim, dim))))
            setattr(self, "b" + key, Parameter(np.zeros(dim)))

    def params(self):
        return {k: getattr(self, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def __call__(self, q, k, v):
        return nx.multi_head_attention(q, k, v, self.params(), self.n_heads)
