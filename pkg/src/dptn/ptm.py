"""Pose transformer: context-augment blocks and texture-transfer blocks.

Feature maps ``[N,C,h,w]`` are read as ``h*w`` tokens of width ``C``. Every
residual sum is followed by instance norm over the spatial grid of the map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dptn import autograd as ag
from dptn.nn import InstanceNorm, Linear, Module


@dataclass(frozen=True)
class PtmConfig:
    blocks: int = 2
    heads: int = 2
    d_model: int = 256
    mlp_hidden: int | None = None  # defaults to 2 * d_model
    slope: float = 0.2

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def hidden(self):
        return self.mlp_hidden or 2 * self.d_model


def to_tokens(x):
    N, C, h, w = x.shape
    return ag.transpose(ag.reshape(x, (N, C, h * w)), (0, 2, 1))


def from_tokens(t, h, w):
    N, L, C = t.shape
    return ag.reshape(ag.transpose(t, (0, 2, 1)), (N, C, h, w))


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes. Returns (out, weights)."""
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ag.ShapeError(f"attention: query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ag.ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = ag.scale(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ag.softmax(scores, axis=-1)
    return ag.matmul(weights, v), weights


def _split_heads(t, heads):
    N, L, C = t.shape
    return ag.transpose(ag.reshape(t, (N, L, heads, C // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, wq, wk, wv, wo=None, bo=None, heads=2):
    """Project tokens [N,L,C] per head, attend, concatenate heads, then the output map.

    ``wq``/``wk``/``wv`` are [C,C] and hold the per-head projections side by
    side (head i uses columns ``i*d:(i+1)*d``). Passing ``wo=None`` stops at
    the head concatenation. Returns (out [N,Lq,C], weights [N,h,Lq,Lk]).
    """
    N, Lq, C = q.shape
    if C % heads:
        raise ag.ShapeError(f"multi-head attention: width {C} not divisible by {heads} heads")
    qh = _split_heads(ag.matmul(q, wq), heads)
    kh = _split_heads(ag.matmul(k, wk), heads)
    vh = _split_heads(ag.matmul(v, wv), heads)
    out, weights = scaled_dot_attention(qh, kh, vh)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (N, Lq, C))
    if wo is not None:
        out = ag.matmul(out, wo)
        if bo is not None:
            out = ag.add(out, bo)
    return out, weights


class MultiHeadAttention(Module):
    def __init__(self, rng, d_model, heads, dtype=np.float64):
        self.heads = heads
        self.q = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        self.k = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        self.v = Linear(rng, d_model, d_model, bias=False, dtype=dtype)
        self.out = Linear(rng, d_model, d_model, dtype=dtype)

    def forward(self, q, k, v):
        return multi_head_attention(q, k, v, self.q.w, self.k.w, self.v.w,
                                    self.out.w, self.out.b, self.heads)


class MLP(Module):
    def __init__(self, rng, d_model, hidden, slope=0.2, dtype=np.float64):
        self.slope = slope
        self.fc1 = Linear(rng, d_model, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, d_model, dtype=dtype)

    def forward(self, t):
        return self.fc2(ag.leaky_relu(self.fc1(t), self.slope))


def _residual_norm(norm, x, delta_tokens):
    N, C, h, w = x.shape
    return norm(ag.add(x, from_tokens(delta_tokens, h, w)))


class ContextAugmentBlock(Module):
    """x1 = IN(x + MHSA(x)); out = IN(x1 + MLP(x1))."""

    def __init__(self, rng, cfg, dtype=np.float64):
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads, dtype)
        self.norm1 = InstanceNorm(cfg.d_model, dtype=dtype)
        self.mlp = MLP(rng, cfg.d_model, cfg.hidden, cfg.slope, dtype)
        self.norm2 = InstanceNorm(cfg.d_model, dtype=dtype)

    def forward(self, f):
        t = to_tokens(f)
        sa, _ = self.attn(t, t, t)
        f1 = _residual_norm(self.norm1, f, sa)
        return _residual_norm(self.norm2, f1, self.mlp(to_tokens(f1)))


class TextureTransferBlock(Module):
    """Self-attention on the target-path feature, then cross attention with
    queries from it, keys from the refined source feature and values from
    the texture feature, then an MLP; each step residual + IN."""

    def __init__(self, rng, cfg, dtype=np.float64):
        self.self_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads, dtype)
        self.norm1 = InstanceNorm(cfg.d_model, dtype=dtype)
        self.cross_attn = MultiHeadAttention(rng, cfg.d_model, cfg.heads, dtype)
        self.norm2 = InstanceNorm(cfg.d_model, dtype=dtype)
        self.mlp = MLP(rng, cfg.d_model, cfg.hidden, cfg.slope, dtype)
        self.norm3 = InstanceNorm(cfg.d_model, dtype=dtype)

    def forward(self, f_st, keys, values):
        t = to_tokens(f_st)
        sa, _ = self.self_attn(t, t, t)
        f1 = _residual_norm(self.norm1, f_st, sa)
        ca, weights = self.cross_attn(to_tokens(f1), to_tokens(keys), to_tokens(values))
        f2 = _residual_norm(self.norm2, f1, ca)
        return _residual_norm(self.norm3, f2, self.mlp(to_tokens(f2))), weights


class PoseTransformer(Module):
    def __init__(self, rng, cfg, dtype=np.float64):
        self.cfg = cfg
        self.cabs = [ContextAugmentBlock(rng, cfg, dtype) for _ in range(cfg.blocks)]
        self.ttbs = [TextureTransferBlock(rng, cfg, dtype) for _ in range(cfg.blocks)]

    def forward(self, f_ss, f_st, f_s, use_cabs=True):
        """Returns (refined target feature, list of cross-attention weights per TTB)."""
        keys = f_ss
        if use_cabs:
            for cab in self.cabs:
                keys = cab(keys)
        out, maps = f_st, []
        for ttb in self.ttbs:
            out, w = ttb(out, keys, f_s)
            maps.append(w.data)
        return out, maps


def ptm_forward(ptm, f_ss, f_st, f_s, use_cabs=True):
    return ptm(f_ss, f_st, f_s, use_cabs)
