"""Finite-difference checks for every differentiable op and the full training loss.

Each case builds small random inputs (at most 64 elements per checked
tensor), contracts the op output against a fixed random tensor to get a
scalar, and compares backprop against central differences. Inputs to kinked
ops (abs, leaky ReLU, clamp) are kept away from the kinks.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from dptn import autograd as ag
from dptn.autograd import Tensor, gradcheck
from dptn.backbone import DPTN, AblationConfig, ModelConfig
from dptn.data import generate_sample, make_batch
from dptn.losses import (
    FeatureStub,
    LossWeights,
    discriminator_loss,
    feature_losses,
    generator_adv_loss,
    gram_matrix,
    l1_loss,
    perceptual_loss,
    style_loss,
    total_loss,
)
from dptn.ptm import multi_head_attention, scaled_dot_attention

THRESHOLD = 1e-4
STEP = 1e-4
MAX_DRAWS = 6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self):
        return self.max_rel_error < THRESHOLD


def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _contract(out, r):
    return ag.tsum(ag.mul(out, r))


def _check_op(op, inputs, rng, h=STEP):
    """Max error over all inputs of ``sum(op(*inputs) * R)``."""
    tensors = [Tensor(x) for x in inputs]
    with ag.no_grad():
        shape = op(*tensors).shape
    r = Tensor(rng.normal(size=shape))
    worst = 0.0
    for t in tensors:
        for other in tensors:
            other.requires_grad = other is t
        worst = max(worst, gradcheck(lambda: _contract(op(*tensors), r), t, h))
    return worst


_OP_CASES = {
    "add": lambda r: _check_op(ag.add, [r.normal(size=(3, 4)), r.normal(size=(4,))], r),
    "sub": lambda r: _check_op(ag.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 1))], r),
    "mul": lambda r: _check_op(ag.mul, [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], r),
    "div": lambda r: _check_op(ag.div, [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4))], r),
    "scale": lambda r: _check_op(lambda x: ag.scale(x, -1.7), [r.normal(size=(5,))], r),
    "exp": lambda r: _check_op(ag.exp, [r.normal(size=(4, 4))], r),
    "log": lambda r: _check_op(ag.log, [r.uniform(0.2, 3.0, size=(4, 4))], r),
    "abs": lambda r: _check_op(ag.tabs, [_away_from_zero(r, (4, 4))], r),
    "square": lambda r: _check_op(ag.square, [r.normal(size=(4, 4))], r),
    "tanh": lambda r: _check_op(ag.tanh, [r.normal(size=(4, 4))], r),
    "sigmoid": lambda r: _check_op(ag.sigmoid, [r.normal(size=(4, 4)) * 3], r),
    "leaky_relu": lambda r: _check_op(lambda x: ag.leaky_relu(x, 0.2), [_away_from_zero(r, (4, 4))], r),
    "clamp": lambda r: _check_op(lambda x: ag.clamp(x, -0.5, 0.5),
                                 [np.where(np.abs(v := r.normal(size=(4, 4))) - 0.5 > 0.05, v, 0.0)], r),
    "sum": lambda r: _check_op(lambda x: ag.tsum(x, axis=1, keepdims=True), [r.normal(size=(3, 4))], r),
    "mean": lambda r: _check_op(lambda x: ag.mean(x, axis=(0, 2)), [r.normal(size=(2, 3, 4))], r),
    "reshape": lambda r: _check_op(lambda x: ag.reshape(x, (4, 6)), [r.normal(size=(2, 3, 4))], r),
    "transpose": lambda r: _check_op(lambda x: ag.transpose(x, (2, 0, 1)), [r.normal(size=(2, 3, 4))], r),
    "getitem": lambda r: _check_op(lambda x: x[1:, ::2], [r.normal(size=(3, 5))], r),
    "concat": lambda r: _check_op(lambda a, b: ag.concat([a, b], axis=1),
                                  [r.normal(size=(2, 3)), r.normal(size=(2, 4))], r),
    "matmul": lambda r: _check_op(ag.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], r),
    "softmax": lambda r: _check_op(lambda x: ag.softmax(x, axis=-1), [r.normal(size=(3, 5))], r),
    "conv2d": lambda r: _check_op(lambda x, w, b: ag.conv2d(x, w, b, 1, 1),
                                  [r.normal(size=(2, 2, 4, 4)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))], r),
    "conv2d_stride2": lambda r: _check_op(lambda x, w: ag.conv2d(x, w, None, 2, 1),
                                          [r.normal(size=(1, 2, 6, 5)), r.normal(size=(2, 2, 3, 3))], r),
    "instance_norm": lambda r: _check_op(lambda x, g, b: ag.instance_norm(x, g, b, 1e-5),
                                         [r.normal(size=(2, 3, 3, 3)), r.normal(size=(3,)), r.normal(size=(3,))], r),
    "avg_pool2": lambda r: _check_op(ag.avg_pool2, [r.normal(size=(1, 2, 4, 4))], r),
    "upsample2": lambda r: _check_op(ag.upsample2, [r.normal(size=(1, 2, 3, 2))], r),
    "attention": lambda r: _check_op(lambda q, k, v: scaled_dot_attention(q, k, v)[0],
                                     [r.normal(size=(4, 3)), r.normal(size=(5, 3)), r.normal(size=(5, 2))], r),
    "multi_head_attention": lambda r: _check_op(
        lambda q, k, v, wq, wk, wv, wo: multi_head_attention(q, k, v, wq, wk, wv, wo, None, heads=2)[0],
        [r.normal(size=(1, 4, 4)), r.normal(size=(1, 4, 4)), r.normal(size=(1, 4, 4))]
        + [r.normal(size=(4, 4)) * 0.5 for _ in range(4)], r),
    "l1_loss": lambda r: _check_op(l1_loss, [(a := r.normal(size=(2, 3, 2, 2))),
                                             a + _away_from_zero(r, (2, 3, 2, 2))], r),
    "gram_matrix": lambda r: _check_op(gram_matrix, [r.normal(size=(2, 3, 4, 4))], r),
    "perceptual_loss": lambda r: _check_op(lambda a, b: perceptual_loss(a, b, FeatureStub(channels=(4, 4, 4))),
                                           [r.uniform(size=(1, 3, 4, 4)), r.uniform(size=(1, 3, 4, 4))], r),
    "style_loss": lambda r: _check_op(lambda a, b: style_loss(a, b, FeatureStub(channels=(4, 4, 4))),
                                      [r.uniform(size=(1, 3, 4, 4)), r.uniform(size=(1, 3, 4, 4))], r),
    "discriminator_loss": lambda r: _disc_case(r),
    "generator_adv_loss": lambda r: _gen_adv_case(r, "nonsaturating"),
    "generator_adv_loss_saturating": lambda r: _gen_adv_case(r, "saturating"),
}


def _tiny_disc(w):
    # a smooth one-conv discriminator; the real network's ops are checked on their own
    return lambda x: ag.sigmoid(ag.conv2d(x, w, None, 2, 1))


def _disc_case(r):
    # the D loss detaches fake on purpose, so only real and the D weights are perturbed
    fake = Tensor(r.uniform(size=(1, 3, 4, 4)))
    return _check_op(lambda real, w: discriminator_loss(_tiny_disc(w), real, fake),
                     [r.uniform(size=(1, 3, 4, 4)), r.normal(size=(1, 3, 3, 3)) * 0.5], r)


def _gen_adv_case(r, mode):
    return _check_op(lambda fake, w: generator_adv_loss(_tiny_disc(w), fake, mode),
                     [r.uniform(size=(1, 3, 4, 4)), r.normal(size=(1, 3, 3, 3)) * 0.5], r)


def micro_setup(seed=0):
    """Tiny float64 model + 2-sample 8x8 batch for the full-loss check.

    Norm affine parameters and biases are jittered off their 0/1 init: at 8x8
    the last discriminator stage is 1x1, where instance norm outputs exactly
    beta, and beta = 0 would sit on the LeakyReLU kink.
    """
    cfg = ModelConfig(width=4, n_res=2, ptm_blocks=2, heads=2, disc_width=2, dtype="float64")
    model = DPTN(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in model.named_parameters():
        if name.endswith(".gamma"):
            p.data += rng.uniform(-0.2, 0.2, size=p.shape)
        elif name.endswith((".beta", ".b")):
            p.data += rng.uniform(-0.2, 0.2, size=p.shape)
    batch = make_batch([generate_sample(s, 16, 16) for s in (11, 12)])
    # sprites need 16px to render; average-pool them down to 8x8
    for name in ("s2t", "s2s", "x_s", "x_t"):
        arr = getattr(batch, name)
        n, c, hh, ww = arr.shape
        setattr(batch, name, arr.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5)))
    stub = FeatureStub(channels=(4, 4, 4))
    return model, batch, stub


def full_loss(model, batch, stub, ablation=AblationConfig(), weights=LossWeights()):
    """Generator objective (both tasks + adversarial term) as one scalar Tensor."""
    out = model.dual_forward(batch.s2t, batch.s2s, batch.x_s, ablation)
    x_t, x_s = Tensor(batch.x_t), Tensor(batch.x_s)
    parts = {"t_adv": generator_adv_loss(model.disc, out.x_t_gen), "t_l1": l1_loss(out.x_t_gen, x_t)}
    parts["t_perc"], parts["t_style"] = feature_losses(out.x_t_gen, x_t, stub)
    if ablation.use_dtl:
        parts["s_l1"] = l1_loss(out.x_s_rec, x_s)
        parts["s_perc"], parts["s_style"] = feature_losses(out.x_s_rec, x_s, stub)
    return total_loss(parts, weights, ablation.use_dtl).total


def _pattern(f):
    with ag.no_grad(), ag.record_kinks() as log:
        value = float(f().data)
    return value, log


def _same_side(pa, pb):
    return len(pa) == len(pb) and all(np.array_equal(a, b) for a, b in zip(pa, pb))


def central_difference_off_kinks(f, x, i, h=STEP):
    """Central difference at flat index ``i``, or None if x[i] +- h straddles a kink."""
    flat = x.data.reshape(-1)
    orig = flat[i]
    _, p0 = _pattern(f)
    flat[i] = orig + h
    fp, pp = _pattern(f)
    flat[i] = orig - h
    fm, pm = _pattern(f)
    flat[i] = orig
    if not (_same_side(pp, p0) and _same_side(pm, p0)):
        return None
    return (fp - fm) / (2 * h)


@dataclass
class FullLossCheck:
    max_rel_error: float
    worst_param: str | None
    checked: int
    straddled: int


def check_full_loss(coords_per_param=4, seed=0):
    """Full objective vs central differences on sampled coordinates of every parameter.

    Coordinates whose +-h step changes the branch of any ReLU/abs/clamp are
    redrawn (at most ``MAX_DRAWS`` draws per wanted coordinate), since the
    loss is not differentiable there.
    """
    model, batch, stub = micro_setup(seed)
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    model.set_requires_grad(True)
    full_loss(model, batch, stub).backward()
    analytic = {n: (np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()) for n, p in params.items()}
    model.zero_grad()
    f = lambda: full_loss(model, batch, stub)
    worst, worst_name, checked, straddled = 0.0, None, 0, 0
    for name, p in params.items():
        found = 0
        for i in rng.permutation(p.size)[:MAX_DRAWS * coords_per_param]:
            if found == coords_per_param:
                break
            num = central_difference_off_kinks(f, p, int(i))
            if num is None:
                straddled += 1
                continue
            a = analytic[name][i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            found += 1
            if err > worst:
                worst, worst_name = err, name
        checked += found
    return FullLossCheck(worst, worst_name, checked, straddled)


def op_names():
    return list(_OP_CASES) + ["full_loss"]


def run(ops="all", seed=0, coords_per_param=4):
    names = op_names() if ops in ("all", None) else [o.strip() for o in ops.split(",")]
    unknown = [n for n in names if n not in op_names()]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; known: {op_names()}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        if name == "full_loss":
            err = check_full_loss(coords_per_param, seed).max_rel_error
        else:
            err = _OP_CASES[name](np.random.default_rng(seed))
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results


def format_table(results):
    lines = ["op\tmax_rel_error\tpass"]
    lines += [f"{r.name}\t{r.max_rel_error:.3e}\t{'yes' if r.ok else 'no'}" for r in results]
    return "\n".join(lines) + "\n"
