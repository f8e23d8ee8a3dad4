"""Training objectives: l1, perceptual, style (Gram), adversarial, and their weighted sums."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dptn import autograd as ag
from dptn.nn import Conv2d, Module

PROB_EPS = 1e-7


class FeatureStub(Module):
    """Frozen random conv net standing in for a pretrained VGG.

    Three 3x3 conv + LeakyReLU stages with 2x average pooling in between;
    the taps are the activations after each stage. ``first_kernel=1`` makes
    the first tap a per-pixel map (used to test Gram permutation invariance).
    """

    def __init__(self, seed=7, channels=(16, 32, 64), first_kernel=3, slope=0.2, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.slope = slope
        cin = 3
        self.convs = []
        for i, c in enumerate(channels):
            k = first_kernel if i == 0 else 3
            self.convs.append(Conv2d(rng, cin, c, k, 1, dtype=dtype))
            cin = c
        # biases get a small frozen offset so taps are not purely odd functions of the input
        for conv in self.convs:
            conv.b.data[...] = rng.uniform(-0.1, 0.1, size=conv.b.shape)
        self.set_requires_grad(False)

    def cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def forward(self, x):
        x = ag.scale(ag.sub(ag.as_tensor(x), 0.5), 2.0)
        taps = []
        for i, conv in enumerate(self.convs):
            if i:
                x = ag.avg_pool2(x)
            x = ag.leaky_relu(conv(x), self.slope)
            taps.append(x)
        return taps


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ag.ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def l1_loss(a, b):
    """Mean absolute difference."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return ag.mean(ag.tabs(ag.sub(a, b)))


def gram_matrix(phi):
    """F F^T / (C*H*W) with F the [C, H*W] flattening; accepts [C,H,W] or [N,C,H,W]."""
    phi = ag.as_tensor(phi)
    batched = phi.ndim == 4
    if not batched:
        phi = ag.reshape(phi, (1,) + phi.shape)
    N, C, H, W = phi.shape
    f = ag.reshape(phi, (N, C, H * W))
    g = ag.scale(ag.matmul(f, ag.swap_last(f)), 1.0 / (C * H * W))
    return g if batched else ag.reshape(g, (C, C))


def perceptual_loss(a, b, stub, taps=None):
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    _same_shape(a, b, "perceptual_loss")
    fa, fb = stub(a), stub(b)
    idx = range(len(fa)) if taps is None else taps
    total = None
    for i in idx:
        term = ag.mean(ag.tabs(ag.sub(fa[i], fb[i])))
        total = term if total is None else ag.add(total, term)
    return total


def style_loss(a, b, stub, taps=None):
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    _same_shape(a, b, "style_loss")
    fa, fb = stub(a), stub(b)
    idx = range(len(fa)) if taps is None else taps
    total = None
    for j in idx:
        term = ag.mean(ag.tabs(ag.sub(gram_matrix(fa[j]), gram_matrix(fb[j]))))
        total = term if total is None else ag.add(total, term)
    return total


def feature_losses(a, b, stub):
    """(perceptual, style) sharing one pass of the stub over each image."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    _same_shape(a, b, "feature_losses")
    fa, fb = stub(a), stub(b)
    perc = style = None
    for x, y in zip(fa, fb):
        p = ag.mean(ag.tabs(ag.sub(x, y)))
        s = ag.mean(ag.tabs(ag.sub(gram_matrix(x), gram_matrix(y))))
        perc = p if perc is None else ag.add(perc, p)
        style = s if style is None else ag.add(style, s)
    return perc, style


def _check_probs(p, who):
    d = p.data
    if not np.all(np.isfinite(d)):
        raise ValueError(f"{who}: non-finite discriminator output")
    if d.min() < 0.0 or d.max() > 1.0:
        raise ValueError(f"{who}: discriminator output outside [0,1] (min={d.min():.3g}, max={d.max():.3g})")
    return p


def _log_prob(p):
    return ag.log(ag.clamp(p, PROB_EPS, 1.0 - PROB_EPS))


def discriminator_loss(disc, real, fake):
    """-E[log D(real)] - E[log(1 - D(fake))], with ``fake`` detached from the generator."""
    fake = ag.as_tensor(fake).detach()
    d_real = _check_probs(disc(real), "discriminator_loss")
    d_fake = _check_probs(disc(fake), "discriminator_loss")
    return ag.add(ag.scale(ag.mean(_log_prob(d_real)), -1.0),
                  ag.scale(ag.mean(_log_prob(ag.sub(1.0, d_fake))), -1.0))


def generator_adv_loss(disc, fake, mode="nonsaturating"):
    """Non-saturating -E[log D(fake)], or the literal minimax E[log(1 - D(fake))]."""
    d_fake = _check_probs(disc(fake), "generator_adv_loss")
    if mode == "nonsaturating":
        return ag.scale(ag.mean(_log_prob(d_fake)), -1.0)
    if mode == "saturating":
        return ag.mean(_log_prob(ag.sub(1.0, d_fake)))
    raise ValueError(f"unknown adversarial mode {mode!r}")


def adversarial_losses(disc, x_t, x_t_gen, mode="nonsaturating"):
    """(L_D, generator adversarial term) evaluated with the same discriminator."""
    return discriminator_loss(disc, x_t, x_t_gen), generator_adv_loss(disc, x_t_gen, mode)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 2.5
    perc: float = 0.25
    style: float = 250.0
    adv: float = 2.0


REPORT_COLUMNS = (
    "s_l1", "s_perc", "s_style", "t_l1", "t_perc", "t_style", "t_adv",
    "loss_ss", "loss_st", "loss", "loss_d",
)


@dataclass
class LossReport:
    s_l1: float = 0.0
    s_perc: float = 0.0
    s_style: float = 0.0
    t_l1: float = 0.0
    t_perc: float = 0.0
    t_style: float = 0.0
    t_adv: float = 0.0
    loss_ss: float = 0.0
    loss_st: float = 0.0
    loss: float = 0.0
    loss_d: float = math.nan
    total: ag.Tensor | None = field(default=None, repr=False, compare=False)

    def recompute_totals(self, w):
        ss = w.l1 * self.s_l1 + w.perc * self.s_perc + w.style * self.s_style
        st = w.l1 * self.t_l1 + w.perc * self.t_perc + w.style * self.t_style + w.adv * self.t_adv
        return ss, st, ss + st

    @staticmethod
    def header():
        return "step\t" + "\t".join(REPORT_COLUMNS)

    def to_row(self, step):
        return f"{step}\t" + "\t".join(repr(float(getattr(self, c))) for c in REPORT_COLUMNS)


def _val(x):
    return float(x.data) if isinstance(x, ag.Tensor) else float(x)


def _weighted(terms):
    total = None
    for c, t in terms:
        if t is None:
            continue
        piece = ag.scale(t, c) if isinstance(t, ag.Tensor) else ag.Tensor(c * float(t))
        total = piece if total is None else ag.add(total, piece)
    return total


def total_loss(parts, w=LossWeights(), use_dtl=True):
    """Combine per-term losses into the dual-task objective.

    ``parts`` maps ``s_l1``/``s_perc``/``s_style`` and ``t_l1``/``t_perc``/
    ``t_style``/``t_adv`` to Tensors or floats. Without dual-task learning the
    source-to-source sum is zero and its terms are ignored.
    """
    rep = LossReport()
    for k in ("t_l1", "t_perc", "t_style", "t_adv"):
        setattr(rep, k, _val(parts[k]))
    loss_st = _weighted([(w.l1, parts["t_l1"]), (w.perc, parts["t_perc"]),
                         (w.style, parts["t_style"]), (w.adv, parts["t_adv"])])
    if use_dtl:
        for k in ("s_l1", "s_perc", "s_style"):
            setattr(rep, k, _val(parts[k]))
        loss_ss = _weighted([(w.l1, parts["s_l1"]), (w.perc, parts["s_perc"]), (w.style, parts["s_style"])])
        total = ag.add(loss_ss, loss_st)
        rep.loss_ss = _val(loss_ss)
    else:
        total = loss_st
        rep.loss_ss = 0.0
    rep.loss_st = _val(loss_st)
    rep.loss = _val(total)
    rep.total = total
    return rep
