import math

import numpy as np
import pytest

from dptn import autograd as ag
from dptn.backbone import DPTN, ModelConfig
from dptn.losses import (
    FeatureStub,
    LossReport,
    LossWeights,
    adversarial_losses,
    discriminator_loss,
    gram_matrix,
    l1_loss,
    perceptual_loss,
    style_loss,
    total_loss,
)

T = ag.Tensor


def half(x):
    return ag.add(ag.mul(x, 0.0), 0.5)


def test_l1_closed_forms():
    assert l1_loss(T([0.0, 1.0]), T([1.0, 1.0])).item() == 0.5
    a = np.random.default_rng(0).uniform(size=(2, 3, 4, 4))
    assert l1_loss(T(a), T(a)).item() == 0.0
    assert l1_loss(T(a), T(a + 0.1)).item() == pytest.approx(0.1, abs=1e-12)


def test_l1_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        l1_loss(T(np.zeros(3)), T(np.zeros(4)))


def test_gram_constant_channel():
    g = gram_matrix(T(np.full((1, 5, 7), 0.3))).data
    assert g.shape == (1, 1)
    assert g[0, 0] == pytest.approx(0.09, abs=1e-15)


def test_gram_disjoint_support_and_symmetry():
    phi = np.zeros((2, 4, 4))
    phi[0, :2] = 1.0
    phi[1, 2:] = 2.0
    g = gram_matrix(T(phi)).data
    assert g[0, 1] == 0.0 and g[1, 0] == 0.0
    rnd = gram_matrix(T(np.random.default_rng(1).normal(size=(3, 8, 5, 5)))).data
    np.testing.assert_allclose(rnd, np.swapaxes(rnd, 1, 2), atol=1e-12)
    assert np.all(np.linalg.eigvalsh(rnd) > -1e-12)


def test_stub_is_frozen_and_deterministic():
    a, b = FeatureStub(), FeatureStub()
    assert all(not p.requires_grad for p in a.parameters())
    x = np.random.default_rng(2).uniform(size=(1, 3, 16, 16))
    for fa, fb in zip(a(x), b(x)):
        assert np.array_equal(fa.data, fb.data)
    assert [f.shape[1:] for f in a(x)] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_feature_losses_zero_on_identical_and_nonnegative():
    stub = FeatureStub()
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(2, 3, 16, 16)), rng.uniform(size=(2, 3, 16, 16))
    assert perceptual_loss(a, a, stub).item() == 0.0
    assert style_loss(a, a, stub).item() == 0.0
    assert perceptual_loss(a, b, stub).item() > 0.0
    assert style_loss(a, b, stub).item() > 0.0


def test_perceptual_loss_grows_with_noise():
    stub = FeatureStub()
    amps = [0.02, 0.05, 0.1, 0.2, 0.4]
    curves = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.2, 0.8, size=(1, 3, 16, 16))
        noise = rng.uniform(-1, 1, size=a.shape)
        curves.append([perceptual_loss(a, a + s * noise, stub).item() for s in amps])
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) > 0)


def test_style_loss_ignores_spatial_permutation_of_pointwise_tap():
    stub = FeatureStub(first_kernel=1)
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(1, 3, 8, 8))
    perm = rng.permutation(64)
    b = a.reshape(1, 3, 64)[:, :, perm].reshape(1, 3, 8, 8)
    assert style_loss(a, b, stub, taps=[0]).item() < 1e-12
    # deeper taps see neighbourhoods, so the permutation does change them
    assert style_loss(a, b, stub, taps=[1]).item() > 1e-6


def test_adversarial_closed_forms():
    x = T(np.zeros((2, 3, 4, 4)))
    l_d, l_g = adversarial_losses(half, x, x)
    assert l_d.item() == pytest.approx(2 * math.log(2), abs=1e-9)
    assert l_g.item() == pytest.approx(math.log(2), abs=1e-9)


def test_perfect_discriminator_loss_near_zero():
    real, fake = T(np.ones((1, 1, 2, 2))), T(np.zeros((1, 1, 2, 2)))
    assert discriminator_loss(lambda x: x, real, fake).item() < 1e-6


def test_discriminator_output_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        discriminator_loss(lambda x: ag.add(x, 0.5), T(np.ones(2)), T(np.zeros(2)))


def test_discriminator_loss_does_not_reach_generator():
    m = DPTN(ModelConfig(width=2, disc_width=2, n_res=1, ptm_blocks=1), seed=0)
    z = T(np.random.default_rng(5).normal(size=(1, 8, 4, 4)))
    fake = m.decode(z)
    l_d = discriminator_loss(m.disc, T(np.full((1, 3, 16, 16), 0.5)), fake)
    l_d.backward()
    assert all(p.grad is None or not np.any(p.grad) for p in m.de.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in m.disc.parameters())


def test_unknown_adversarial_mode():
    from dptn.losses import generator_adv_loss
    with pytest.raises(ValueError):
        generator_adv_loss(half, T(np.zeros(2)), mode="hinge")


def test_total_with_unit_parts():
    parts = {k: T(1.0) for k in ("s_l1", "s_perc", "s_style", "t_l1", "t_perc", "t_style", "t_adv")}
    rep = total_loss(parts, LossWeights())
    assert rep.loss_ss == 252.75
    assert rep.loss_st == 254.75
    assert rep.loss == 507.5
    assert rep.total.item() == 507.5


def test_total_without_dual_task_is_transformation_only():
    parts = {"t_l1": 0.2, "t_perc": 0.3, "t_style": 0.01, "t_adv": 0.7}
    rep = total_loss(parts, LossWeights(), use_dtl=False)
    assert rep.loss_ss == 0.0
    assert rep.loss == rep.loss_st == pytest.approx(2.5 * 0.2 + 0.25 * 0.3 + 250 * 0.01 + 2 * 0.7)


def test_report_totals_recompute():
    rng = np.random.default_rng(6)
    parts = {k: float(v) for k, v in zip(("s_l1", "s_perc", "s_style", "t_l1", "t_perc", "t_style", "t_adv"),
                                          rng.uniform(size=7))}
    w = LossWeights(1.5, 0.5, 10.0, 0.1)
    rep = total_loss(parts, w)
    ss, st, tot = rep.recompute_totals(w)
    assert abs(ss - rep.loss_ss) < 1e-9 and abs(st - rep.loss_st) < 1e-9 and abs(tot - rep.loss) < 1e-9


def test_report_row_format():
    rep = LossReport(t_l1=0.5, loss=1.0)
    cols = LossReport.header().split("\t")
    row = rep.to_row(3).split("\t")
    assert len(cols) == len(row) and row[0] == "3"
