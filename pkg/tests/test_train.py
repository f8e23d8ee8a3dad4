import math

import numpy as np
import pytest

from dptn import autograd as ag
from dptn import checkpoint
from dptn.train import (
    CURVE_COLUMNS,
    Adam,
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    adam_step,
    parse_config,
    read_curves,
)

TINY = TrainConfig(res="16x16", width=2, disc_width=2, n_res=1, ptm_blocks=1, batch_size=2,
                   holdout=2, eval_every=2, steps=4, dtype="float64")


def test_adam_first_step_closed_form():
    p = ag.Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.ones(1)
    Adam({"p": p}, lr=1e-4).step()
    assert p.data[0] == pytest.approx(-1e-4, rel=1e-6)


def test_functional_adam_matches_class():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(3)]
    p = ag.Tensor(w.copy(), requires_grad=True)
    opt = Adam({"w": p}, lr=1e-2)
    state, cur = {}, [w.copy()]
    for g in grads:
        p.grad = g.copy()
        opt.step()
        cur = adam_step(cur, [g], state, lr=1e-2)
    np.testing.assert_allclose(p.data, cur[0], atol=1e-15)


def test_adam_refuses_non_finite_gradient():
    p = ag.Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        Adam({"p": p}).step()
    assert np.all(p.data == 0.0)


def test_config_defaults_and_parsing():
    cfg = parse_config("# desk run\nlr = 2e-4\nuse_ptm = false  # ablate\nres = 16x24\n")
    assert cfg.lr == 2e-4 and cfg.use_ptm is False and cfg.hw == (16, 24)
    assert cfg.beta1 == 0.5 and cfg.beta2 == 0.999
    assert (cfg.lambda_l1, cfg.lambda_perc, cfg.lambda_style, cfg.lambda_adv) == (2.5, 0.25, 250.0, 2.0)


def test_config_round_trips_through_text():
    cfg = TINY.replace(seed=5, use_cabs=False)
    assert parse_config(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", [
    "lr = -1",
    "batch_size = 0",
    "res = 30x30",
    "res = big",
    "nope = 1",
    "use_dtl = maybe",
    "adv_mode = hinge",
    "just a line",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_short_run_writes_outputs(tmp_path):
    tr = Trainer(TINY)
    tr.fit(out_dir=tmp_path)
    for name in ("config.cfg", "losses.tsv", "model.ckpt", "curves.tsv", "last_good.ckpt"):
        assert (tmp_path / name).exists()
    curves = read_curves(tmp_path / "curves.tsv")
    assert len(curves) == TINY.steps // TINY.eval_every
    assert list(curves[0]) == list(CURVE_COLUMNS)
    assert all(math.isfinite(r["loss"]) for r in curves)
    losses = (tmp_path / "losses.tsv").read_text().splitlines()
    assert len(losses) == TINY.steps + 1


def test_every_parameter_finite_and_shared_after_steps():
    tr = Trainer(TINY)
    tr.fit()
    m = tr.model
    assert m.s2s.en_c is m.s2t.en_c and m.s2s.de is m.s2t.de
    assert all(np.all(np.isfinite(p.data)) for p in m.parameters())


def test_discriminator_frozen_during_generator_update():
    tr = Trainer(TINY)
    before = {n: p.data.copy() for n, p in tr.model.disc.named_parameters()}
    tr.opt_d.step = lambda: None  # isolate the generator update
    tr.train_step(tr.batch_at(0))
    for n, p in tr.model.disc.named_parameters():
        assert np.array_equal(p.data, before[n]), n
    assert all(p.requires_grad for p in tr.model.disc.parameters())


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    a = Trainer(TINY)
    a.fit(steps=4)
    b = Trainer(TINY)
    b.fit(steps=2)
    b.save(tmp_path / "mid.ckpt")
    c = Trainer.load(tmp_path / "mid.ckpt")
    c.fit(steps=2)
    for (n, p), (_, q) in zip(a.model.named_parameters(), c.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_checkpoint_container_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.w": rng.normal(size=(2, 3)), "b": np.array(3.5), "c": np.zeros((0, 4))}
    checkpoint.save(tmp_path / "x.ckpt", tensors, {"step": 7})
    header, back = checkpoint.load(tmp_path / "x.ckpt")
    assert header == {"step": 7}
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        checkpoint.load(tmp_path / "bad.ckpt")


def test_non_finite_loss_aborts_with_last_checkpoint(tmp_path):
    tr = Trainer(TINY)
    tr.fit(steps=2, out_dir=tmp_path)
    tr.model.de.conv_out.w.data[...] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        tr.train_step(tr.batch_at(tr.step))
    assert info.value.last_checkpoint == str(tmp_path / "last_good.ckpt")
