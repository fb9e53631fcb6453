"""Query-based transformer decoder over both views' stereo-aware features."""
import numpy as np

from . import numerics as nx
from .layers import MLP, LayerNorm, Module, MultiHeadAttention
from .numerics import ConfigurationError, Parameter


class DecoderLayer(Module):
    """Post-norm block: self-attn, norm, FFN, cross-attn, norm, FFN (residual around each)."""

    def __init__(self, dim, n_heads, ffn_dim, rng):
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn1 = MLP([dim, ffn_dim, dim], rng)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn2 = MLP([dim, ffn_dim, dim], rng)

    def __call__(self, q, memory):
        if q.shape[-1] != memory.shape[-1]:
            raise ConfigurationError(f"query dim {q.shape[-1]} != feature dim {memory.shape[-1]}")
        q = nx.add(q, self.self_attn(q, q, q))
        q = self.norm1(q)
        q = nx.add(q, self.ffn1(q))
        q = nx.add(q, self.cross_attn(q, memory, memory))
        q = self.norm2(q)
        return nx.add(q, self.ffn2(q))


def flatten_tokens(features, views=(0, 1)):
    """(B, 2, h, w, C) stereo-aware features -> (B, len(views)*h*w, C) key/value tokens."""
    B, V, h, w, C = features.shape
    if tuple(views) != tuple(range(V)):
        features = nx.index(features, (slice(None), list(views)))
    return nx.reshape(features, (B, len(views) * h * w, C))


def decode(queries, memory, layers):
    """Apply the decoder layers in sequence; ``queries`` is (N_q, C) or (B, N_q, C)."""
    if len(layers) < 1:
        raise ConfigurationError("decoder needs at least one layer")
    q = queries
    if q.ndim == 2 and memory.ndim == 3:
        q = nx.add(nx.reshape(q, (1,) + q.shape), np.zeros((memory.shape[0],) + q.shape))
    for layer in layers:
        q = layer(q, memory)
    return q


class TransformerDecoder(Module):
    def __init__(self, dim, n_queries, n_layers, n_heads, ffn_dim, rng):
        if n_layers < 1:
            raise ConfigurationError("decoder needs at least one layer")
        self.queries = Parameter(rng.normal(0.0, 1.0, size=(n_queries, dim)))
        self.layers = [DecoderLayer(dim, n_heads, ffn_dim, rng) for _ in range(n_layers)]

    def __call__(self, memory):
        return decode(self.queries, memory, self.layers)
