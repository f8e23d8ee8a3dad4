"""Siamese generator (shared encoder / ResBlocks / decoder, texture encoder,
pose transformer) and the PatchGAN discriminator."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from dptn import autograd as ag
from dptn.data import K
from dptn.nn import Conv2d, InstanceNorm, Module
from dptn.ptm import PoseTransformer, PtmConfig


@dataclass(frozen=True)
class AblationConfig:
    use_dtl: bool = True
    use_ptm: bool = True
    use_cabs: bool = True
    use_en_s: bool = True

    @classmethod
    def variant(cls, name):
        table = {
            "full": cls(),
            "wo_dtl": cls(use_dtl=False),
            "wo_ptm": cls(use_ptm=False),
            "wo_cabs": cls(use_cabs=False),
            "wo_en_s": cls(use_en_s=False),
        }
        if name not in table:
            raise ValueError(f"unknown ablation variant {name!r}; choose from {sorted(table)}")
        return table[name]


ABLATION_VARIANTS = ("full", "wo_dtl", "wo_ptm", "wo_cabs", "wo_en_s")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64  # encoder widths are width, 2*width, 4*width
    n_res: int = 3
    ptm_blocks: int = 2
    heads: int = 2
    mlp_hidden: int | None = None
    disc_width: int = 64
    keypoints: int = K
    slope: float = 0.2
    dtype: str = "float64"

    @property
    def channels(self):
        return 4 * self.width

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def ptm_config(self):
        return PtmConfig(self.ptm_blocks, self.heads, self.channels, self.mlp_hidden, self.slope)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _lrelu(x, slope):
    return ag.leaky_relu(x, slope)


class Encoder(Module):
    """conv(s1) -> conv(s2) -> conv(s2), each with IN + LeakyReLU; /4 spatially."""

    def __init__(self, rng, cin, width, slope=0.2, dtype=np.float64):
        self.slope = slope
        self.conv1 = Conv2d(rng, cin, width, 3, 1, dtype=dtype)
        self.norm1 = InstanceNorm(width, dtype=dtype)
        self.conv2 = Conv2d(rng, width, 2 * width, 3, 2, dtype=dtype)
        self.norm2 = InstanceNorm(2 * width, dtype=dtype)
        self.conv3 = Conv2d(rng, 2 * width, 4 * width, 3, 2, dtype=dtype)
        self.norm3 = InstanceNorm(4 * width, dtype=dtype)

    def forward(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ag.ShapeError(f"encoder input {x.shape}: spatial dims must be divisible by 4")
        for conv, norm in ((self.conv1, self.norm1), (self.conv2, self.norm2), (self.conv3, self.norm3)):
            x = _lrelu(norm(conv(x)), self.slope)
        return x


class ResBlock(Module):
    def __init__(self, rng, ch, slope=0.2, dtype=np.float64):
        self.slope = slope
        self.conv1 = Conv2d(rng, ch, ch, 3, 1, dtype=dtype)
        self.norm1 = InstanceNorm(ch, dtype=dtype)
        self.conv2 = Conv2d(rng, ch, ch, 3, 1, dtype=dtype)
        self.norm2 = InstanceNorm(ch, dtype=dtype)

    def forward(self, x):
        h = _lrelu(self.norm1(self.conv1(x)), self.slope)
        return ag.add(x, self.norm2(self.conv2(h)))


class ResStack(Module):
    def __init__(self, rng, ch, n, slope=0.2, dtype=np.float64):
        self.blocks = [ResBlock(rng, ch, slope, dtype) for _ in range(n)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class Decoder(Module):
    """Two (nearest upsample, conv, IN, LeakyReLU) stages, then conv + tanh mapped to [0,1]."""

    def __init__(self, rng, width, slope=0.2, dtype=np.float64):
        self.slope = slope
        self.conv1 = Conv2d(rng, 4 * width, 2 * width, 3, 1, dtype=dtype)
        self.norm1 = InstanceNorm(2 * width, dtype=dtype)
        self.conv2 = Conv2d(rng, 2 * width, width, 3, 1, dtype=dtype)
        self.norm2 = InstanceNorm(width, dtype=dtype)
        self.conv_out = Conv2d(rng, width, 3, 3, 1, dtype=dtype)

    def forward(self, f):
        x = _lrelu(self.norm1(self.conv1(ag.upsample2(f))), self.slope)
        x = _lrelu(self.norm2(self.conv2(ag.upsample2(x))), self.slope)
        return ag.scale(ag.add(ag.tanh(self.conv_out(x)), 1.0), 0.5)


class Discriminator(Module):
    """PatchGAN: three stride-2 convs then a 3x3 conv to one logit per patch, sigmoid."""

    def __init__(self, rng, width=64, slope=0.2, dtype=np.float64):
        self.slope = slope
        self.conv1 = Conv2d(rng, 3, width, 3, 2, dtype=dtype)
        self.conv2 = Conv2d(rng, width, 2 * width, 3, 2, dtype=dtype)
        self.norm2 = InstanceNorm(2 * width, dtype=dtype)
        self.conv3 = Conv2d(rng, 2 * width, 4 * width, 3, 2, dtype=dtype)
        self.norm3 = InstanceNorm(4 * width, dtype=dtype)
        self.conv_out = Conv2d(rng, 4 * width, 1, 3, 1, dtype=dtype)

    def forward(self, x):
        x = _lrelu(self.conv1(x), self.slope)
        x = _lrelu(self.norm2(self.conv2(x)), self.slope)
        x = _lrelu(self.norm3(self.conv3(x)), self.slope)
        return ag.sigmoid(self.conv_out(x))


@dataclass
class BranchView:
    """What one Siamese branch sees: references to the shared sub-networks."""

    en_c: Encoder
    resblocks: ResStack
    de: Decoder


@dataclass
class DualOutput:
    x_s_rec: ag.Tensor | None  # self-reconstruction, absent without dual-task learning
    x_t_gen: ag.Tensor
    f_ss: ag.Tensor | None
    f_st: ag.Tensor
    f_st_star: ag.Tensor
    attention: list = field(default_factory=list)  # per TTB: [N, heads, L, L] arrays


GENERATOR_PARTS = ("en_c", "resblocks", "de", "en_s", "ptm")


class DPTN(Module):
    """All learnable weights; ``en_c``/``resblocks``/``de`` are shared by both branches."""

    def __init__(self, cfg=ModelConfig(), seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        C = cfg.channels
        self.en_c = Encoder(rng, 3 + 2 * cfg.keypoints, cfg.width, cfg.slope, dt)
        self.resblocks = ResStack(rng, C, cfg.n_res, cfg.slope, dt)
        self.de = Decoder(rng, cfg.width, cfg.slope, dt)
        self.en_s = Encoder(rng, 3, cfg.width, cfg.slope, dt)
        self.ptm = PoseTransformer(rng, cfg.ptm_config(), dt)
        self.disc = Discriminator(rng, cfg.disc_width, cfg.slope, dt)
        self.s2s = BranchView(self.en_c, self.resblocks, self.de)
        self.s2t = BranchView(self.en_c, self.resblocks, self.de)

    def named_parameters(self, prefix=""):
        for part in GENERATOR_PARTS + ("disc",):
            yield from getattr(self, part).named_parameters(f"{prefix}{part}.")

    def generator_parameters(self):
        return {n: p for part in GENERATOR_PARTS for n, p in getattr(self, part).named_parameters(part + ".")}

    def discriminator_parameters(self):
        return dict(self.disc.named_parameters("disc."))

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, p in own.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    # -- pieces ------------------------------------------------------------
    def encode(self, x):
        return self.en_c(ag.as_tensor(x))

    def resblocks_forward(self, f):
        return self.resblocks(f)

    def decode(self, f):
        return self.de(f)

    def encode_texture(self, x_s):
        return self.en_s(ag.as_tensor(x_s))

    def discriminate(self, x):
        return self.disc(ag.as_tensor(x))

    # -- full generator ----------------------------------------------------
    def dual_forward(self, s2t, s2s, x_s, ablation=AblationConfig()):
        """Run both branches. Inputs are [N,...] arrays or Tensors."""
        s2t, s2s, x_s = (ag.as_tensor(a, dtype=self.cfg.np_dtype) for a in (s2t, s2s, x_s))
        N = s2t.shape[0]
        need_ss = ablation.use_dtl or ablation.use_ptm
        if need_ss:
            # the branches share weights, so both go through one batched pass
            feats = self.resblocks(self.en_c(ag.concat([s2s, s2t], axis=0)))
            f_ss, f_st = feats[:N], feats[N:]
        else:
            f_ss, f_st = None, self.resblocks(self.en_c(s2t))
        attention = []
        if ablation.use_ptm:
            f_s = self.en_s(x_s) if ablation.use_en_s else f_ss
            f_star, attention = self.ptm(f_ss, f_st, f_s, use_cabs=ablation.use_cabs)
        else:
            f_star = f_st
        if ablation.use_dtl:
            imgs = self.de(ag.concat([f_ss, f_star], axis=0))
            x_s_rec, x_t_gen = imgs[:N], imgs[N:]
        else:
            x_s_rec, x_t_gen = None, self.de(f_star)
        return DualOutput(x_s_rec, x_t_gen, f_ss, f_st, f_star, attention)

    def generate(self, s2t, x_s, ablation=AblationConfig()):
        """Source-to-target image only (evaluation path)."""
        s2t, x_s = ag.as_tensor(s2t, dtype=self.cfg.np_dtype), ag.as_tensor(x_s, dtype=self.cfg.np_dtype)
        if not ablation.use_ptm:
            return self.de(self.resblocks(self.en_c(s2t))), []
        N = s2t.shape[0]
        s2s = ag.as_tensor(_s2s_from_s2t(s2t.data, self.cfg.keypoints))
        feats = self.resblocks(self.en_c(ag.concat([s2s, s2t], axis=0)))
        f_ss, f_st = feats[:N], feats[N:]
        f_s = self.en_s(x_s) if ablation.use_en_s else f_ss
        f_star, attention = self.ptm(f_ss, f_st, f_s, use_cabs=ablation.use_cabs)
        return self.de(f_star), attention


def _s2s_from_s2t(s2t, k):
    out = s2t.copy()
    out[:, 3 + k:3 + 2 * k] = s2t[:, 3:3 + k]
    return out
