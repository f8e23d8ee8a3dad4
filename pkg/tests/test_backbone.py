import numpy as np
import pytest

from dptn import autograd as ag
from dptn.backbone import DPTN, ABLATION_VARIANTS, AblationConfig, ModelConfig
from dptn.data import generate_sample, make_batch


@pytest.fixture(scope="module")
def default_model():
    return DPTN(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def small_model():
    return DPTN(ModelConfig(width=4, disc_width=4), seed=1)


def test_encoder_shape(default_model):
    with ag.no_grad():
        out = default_model.encode(np.zeros((1, 39, 64, 48)) + 0.1)
    assert out.shape == (1, 256, 16, 12)


def test_encoder_rejects_indivisible_input(small_model):
    with pytest.raises(ag.ShapeError):
        small_model.encode(np.zeros((1, 39, 30, 32)))


def test_decoder_shape_and_range(default_model):
    rng = np.random.default_rng(0)
    with ag.no_grad():
        out = default_model.decode(ag.Tensor(rng.normal(size=(1, 256, 16, 12)) * 5))
    assert out.shape == (1, 3, 64, 48)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_texture_encoder_matches_token_grid(default_model):
    with ag.no_grad():
        assert default_model.encode_texture(np.full((1, 3, 64, 48), 0.5)).shape == (1, 256, 16, 12)


def test_discriminator_patch_map(default_model):
    with ag.no_grad():
        p = default_model.discriminate(np.random.default_rng(0).uniform(size=(1, 3, 64, 48)))
    assert p.shape == (1, 1, 8, 6)
    assert np.all((p.data > 0) & (p.data < 1))


def test_zero_final_discriminator_layer_gives_one_half():
    m = DPTN(ModelConfig(width=4, disc_width=4), seed=2)
    m.disc.conv_out.w.data[...] = 0.0
    m.disc.conv_out.b.data[...] = 0.0
    with ag.no_grad():
        p = m.discriminate(np.random.default_rng(1).uniform(size=(2, 3, 32, 32)))
    assert np.all(p.data == 0.5)


def test_zero_residual_branches_give_identity():
    m = DPTN(ModelConfig(width=4, disc_width=4), seed=3)
    for blk in m.resblocks.blocks:
        blk.norm2.gamma.data[...] = 0.0
        blk.norm2.beta.data[...] = 0.0
    f = ag.Tensor(np.random.default_rng(2).normal(size=(2, 16, 4, 4)))
    with ag.no_grad():
        assert np.array_equal(m.resblocks_forward(f).data, f.data)


def test_branches_share_storage(small_model):
    m = small_model
    assert m.s2s.en_c is m.s2t.en_c is m.en_c
    assert m.s2s.resblocks is m.s2t.resblocks
    assert m.s2s.de is m.s2t.de
    before = m.s2t.en_c.conv1.w.data[0, 0, 0, 0]
    m.s2s.en_c.conv1.w.data[0, 0, 0, 0] += 1.0
    assert m.s2t.en_c.conv1.w.data[0, 0, 0, 0] == before + 1.0
    m.s2s.en_c.conv1.w.data[0, 0, 0, 0] = before


def test_texture_encoder_is_separate(small_model):
    m = small_model
    x = np.random.default_rng(3).uniform(size=(1, 39, 16, 16))
    with ag.no_grad():
        before = m.encode(x).data.copy()
        m.en_s.conv1.w.data += 1.0
        after = m.encode(x).data
        m.en_s.conv1.w.data -= 1.0
    assert np.array_equal(before, after)
    assert not {id(p) for p in m.en_s.parameters()} & {id(p) for p in m.en_c.parameters()}


def test_default_parameter_budget(default_model):
    assert default_model.num_parameters() < 10_000_000


def _batch(n=2, hw=16):
    return make_batch([generate_sample(s, hw, hw) for s in range(n)])


@pytest.mark.parametrize("variant", ABLATION_VARIANTS)
def test_dual_forward_shapes(small_model, variant):
    b = _batch()
    ab = AblationConfig.variant(variant)
    with ag.no_grad():
        out = small_model.dual_forward(b.s2t, b.s2s, b.x_s, ab)
    assert out.x_t_gen.shape == b.x_t.shape
    assert (out.x_s_rec is None) == (not ab.use_dtl)
    if ab.use_dtl:
        assert out.x_s_rec.shape == b.x_s.shape
    assert (out.f_ss is None) == (not (ab.use_dtl or ab.use_ptm))
    assert len(out.attention) == (small_model.cfg.ptm_blocks if ab.use_ptm else 0)


def test_without_ptm_decoder_reads_transformed_feature(small_model):
    b = _batch()
    with ag.no_grad():
        out = small_model.dual_forward(b.s2t, b.s2s, b.x_s, AblationConfig(use_ptm=False))
        assert out.f_st_star is out.f_st
        direct = small_model.decode(small_model.resblocks_forward(small_model.encode(b.s2t)))
    np.testing.assert_allclose(out.x_t_gen.data, direct.data, atol=1e-12)


def test_batched_branches_match_separate_passes(small_model):
    b = _batch()
    with ag.no_grad():
        out = small_model.dual_forward(b.s2t, b.s2s, b.x_s)
        f_ss = small_model.resblocks_forward(small_model.encode(b.s2s))
        x_s_rec = small_model.decode(f_ss)
    np.testing.assert_allclose(out.f_ss.data, f_ss.data, atol=1e-12)
    np.testing.assert_allclose(out.x_s_rec.data, x_s_rec.data, atol=1e-12)


def test_without_texture_encoder_values_are_source_features(small_model):
    b = _batch()
    with ag.no_grad():
        out = small_model.dual_forward(b.s2t, b.s2s, b.x_s, AblationConfig(use_en_s=False))
        ref, _ = small_model.ptm(out.f_ss, out.f_st, out.f_ss)
    np.testing.assert_allclose(out.f_st_star.data, ref.data, atol=1e-12)


def test_generate_matches_transformation_branch(small_model):
    b = _batch()
    with ag.no_grad():
        out = small_model.dual_forward(b.s2t, b.s2s, b.x_s)
        gen, _ = small_model.generate(b.s2t, b.x_s)
    np.testing.assert_allclose(gen.data, out.x_t_gen.data, atol=1e-12)


def test_state_dict_round_trip(small_model):
    other = DPTN(small_model.cfg, seed=99)
    other.load_state_dict({k: v.copy() for k, v in small_model.state_dict().items()})
    for (n, a), (_, b) in zip(small_model.named_parameters(), other.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_state_dict_rejects_wrong_keys(small_model):
    state = dict(small_model.state_dict())
    state.pop("en_c.conv1.w")
    with pytest.raises(KeyError):
        small_model.load_state_dict(state)
