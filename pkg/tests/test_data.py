import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dptn import data
from dptn.data import K, PoseKeypoints, generate_sample, make_batch, make_inputs, pose_to_heatmap


def test_generation_is_deterministic():
    a, b = generate_sample(42, 32, 32), generate_sample(42, 32, 32)
    assert np.array_equal(a.x_s, b.x_s) and np.array_equal(a.x_t, b.x_t)
    assert np.array_equal(a.p_t.points, b.p_t.points)


def test_source_and_target_share_identity_but_not_pose():
    s = generate_sample(3, 64, 48)
    assert not np.allclose(s.p_s.xy, s.p_t.xy)
    # both renders use only the identity palette plus black background (up to antialiasing)
    for img in (s.x_s, s.x_t):
        assert img.shape == (3, 64, 48)
        assert 0.0 <= img.min() and img.max() <= 1.0
        assert np.all(img[:, 0, 0] == 0.0)


def test_different_seeds_give_different_identities():
    a, b = generate_sample(1, 32, 32), generate_sample(2, 32, 32)
    assert not np.allclose(a.identity.colors, b.identity.colors)


def test_keypoints_stay_inside_the_frame():
    for seed in range(10_000):
        rng = np.random.default_rng(seed)
        pts = data._articulate(rng, 32, 24)
        assert pts.shape == (K, 3)
        assert np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= 23)
        assert np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= 31)


def test_too_small_resolution_rejected():
    with pytest.raises(ValueError):
        generate_sample(0, 8, 8)


def test_heatmap_values():
    pts = np.zeros((K, 3))
    pts[:, 2] = 1.0
    pts[0] = (10.0, 12.0, 1.0)
    pts[1] = (5.0, 5.0, 0.0)  # hidden
    hm = pose_to_heatmap(PoseKeypoints(pts), 32, 32, sigma=1.0)
    assert hm.shape == (K, 32, 32)
    assert hm[0, 12, 10] == 1.0
    assert hm[0, 12, 11] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert hm[0, 13, 11] == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert np.all(hm[1] == 0.0)


def test_heatmap_peak_at_rounded_subpixel_keypoint():
    pts = np.zeros((K, 3))
    pts[:, 2] = 1
    pts[0] = (7.5, 3.49, 1)
    hm = pose_to_heatmap(pts, 16, 16)
    assert np.unravel_index(np.argmax(hm[0]), hm[0].shape) == (3, 8)


def test_default_sigma_scales_with_height():
    assert data.default_sigma(64) == 1.5
    assert data.default_sigma(32) == 0.75


def test_network_inputs_have_39_channels():
    s = generate_sample(0, 32, 32)
    s2t, s2s = make_inputs(s)
    assert s2t.shape == s2s.shape == (3 + 2 * K, 32, 32)
    assert np.array_equal(s2s[3:3 + K], s2s[3 + K:])
    assert np.array_equal(s2t[:3], s.x_s)


def test_self_target_batch_uses_source_everywhere():
    s = generate_sample(5, 32, 32)
    b = make_batch([s], self_target=True)
    assert np.array_equal(b.s2t, b.s2s)
    assert np.array_equal(b.x_t, b.x_s)


def test_train_and_test_seeds_are_disjoint():
    train = set()
    for run in (0, 1, 999):
        for step in (0, 1, 10_000):
            train.update(data.train_seeds(run, step, 8))
    assert not train & set(data.test_seeds(64))


def test_manifest_round_trip(tmp_path):
    seeds = data.test_seeds(3)
    data.write_manifest(tmp_path / "m.tsv", seeds, 32, 24)
    assert data.read_manifest(tmp_path / "m.tsv") == [(s, 32, 24) for s in seeds]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([16, 32, 48]), st.sampled_from([16, 24, 32]))
def test_any_seed_renders_valid_images(seed, H, W):
    s = generate_sample(seed, H, W)
    assert s.x_s.shape == (3, H, W)
    assert np.all(np.isfinite(s.x_t)) and s.x_t.min() >= 0 and s.x_t.max() <= 1
    # the figure covers a visible part of the frame
    assert (s.x_s.max(axis=0) > 0).mean() > 0.05
