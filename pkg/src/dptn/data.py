"""Synthetic articulated-sprite pose-transfer pairs and pose heatmaps.

Each seed fixes one sprite identity (limb colours, head colour, a two-colour
striped torso) and two articulations of it: the source pose and the target
pose. Keypoints follow the 18-point OpenPose/COCO ordering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

K = 18
KEYPOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)
# (parent, child, colour slot); slots 0-7 are limb colours, 8 is the head colour
LIMBS = (
    (2, 3, 0), (3, 4, 1), (5, 6, 2), (6, 7, 3),
    (8, 9, 4), (9, 10, 5), (11, 12, 6), (12, 13, 7),
)
NECK_HEAD = (1, 0, 8)

# test seeds live above this, training seeds below
TEST_SEED_BASE = 2**31


@dataclass(frozen=True)
class PoseKeypoints:
    """K rows of (x, y, visible) in pixel coordinates (pixel (r, c) has centre (c, r))."""

    points: np.ndarray

    @property
    def xy(self):
        return self.points[:, :2]

    @property
    def visible(self):
        return self.points[:, 2] > 0


@dataclass(frozen=True)
class SpriteIdentity:
    colors: np.ndarray  # [9, 3]: eight limbs then head
    torso_colors: np.ndarray  # [2, 3]
    stripe_period: float  # in body units
    stripe_along: bool  # stripes stacked along the spine (True) or across it


@dataclass(frozen=True)
class PoseSample:
    x_s: np.ndarray  # [3,H,W] in [0,1]
    p_s: PoseKeypoints
    p_t: PoseKeypoints
    x_t: np.ndarray
    seed: int
    identity: SpriteIdentity


# -- pose synthesis ------------------------------------------------------------

def _rot(v, a):
    c, s = math.cos(a), math.sin(a)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _limb_dir(angle, side):
    # angle 0 points straight down; positive swings away from the body on either side
    return np.array([side * math.sin(angle), math.cos(angle)])


def _articulate(rng, H, W):
    """Random pose in body units, then placed in the image. Returns [K,3]."""
    lean = rng.uniform(-0.25, 0.25)
    tilt = rng.uniform(-0.3, 0.3)
    hip_c = np.array([0.0, 0.08])
    pts = np.zeros((K, 2))

    def torso(v):
        return hip_c + _rot(np.asarray(v) - hip_c, lean)

    pts[1] = torso([0.0, -0.28])
    pts[2] = torso([-0.13, -0.26])
    pts[5] = torso([0.13, -0.26])
    pts[8] = np.array([-0.08, 0.08])
    pts[11] = np.array([0.08, 0.08])
    up = _rot(np.array([0.0, -1.0]), lean + tilt)
    side = _rot(np.array([1.0, 0.0]), lean + tilt)
    pts[0] = pts[1] + 0.13 * up
    pts[14] = pts[0] - 0.035 * side + 0.03 * up
    pts[15] = pts[0] + 0.035 * side + 0.03 * up
    pts[16] = pts[0] - 0.06 * side + 0.01 * up
    pts[17] = pts[0] + 0.06 * side + 0.01 * up
    for sh, el, wr, s in ((2, 3, 4, -1), (5, 6, 7, 1)):
        a = rng.uniform(0.0, 2.6)
        b = a + rng.uniform(-1.5, 1.5)
        pts[el] = pts[sh] + 0.16 * _limb_dir(a, s)
        pts[wr] = pts[el] + 0.15 * _limb_dir(b, s)
    for hp, kn, an, s in ((8, 9, 10, -1), (11, 12, 13, 1)):
        a = rng.uniform(-0.3, 0.8)
        b = a + rng.uniform(-1.0, 0.2)
        pts[kn] = pts[hp] + 0.2 * _limb_dir(a, s)
        pts[an] = pts[kn] + 0.2 * _limb_dir(b, s)

    scale = rng.uniform(0.7, 0.85) * H
    cx = W / 2.0 + rng.uniform(-0.05, 0.05) * W
    cy = H / 2.0 + rng.uniform(-0.04, 0.04) * H
    xy = pts * scale + np.array([cx, cy])
    xy[:, 0] = np.clip(xy[:, 0], 0.0, W - 1.0)
    xy[:, 1] = np.clip(xy[:, 1], 0.0, H - 1.0)
    vis = np.ones(K)
    if rng.uniform() < 0.25:
        # profile view: the far ear is hidden
        vis[16 + int(rng.integers(2))] = 0.0
    return np.column_stack([xy, vis])


def _identity(rng):
    return SpriteIdentity(
        colors=rng.uniform(0.25, 1.0, size=(9, 3)),
        torso_colors=rng.uniform(0.15, 1.0, size=(2, 3)),
        stripe_period=float(rng.uniform(0.08, 0.14)),
        stripe_along=bool(rng.integers(2)),
    )


# -- rendering ------------------------------------------------------------------

def _segment_coverage(px, py, a, b, half):
    d = b - a
    L2 = float(d @ d)
    if L2 < 1e-12:
        dist = np.hypot(px - a[0], py - a[1])
    else:
        t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2, 0.0, 1.0)
        dist = np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))
    return np.clip(half + 0.5 - dist, 0.0, 1.0)


def _polygon_coverage(px, py, poly):
    """Anti-aliased coverage of a convex polygon (vertices in either winding)."""
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    orient = 1.0 if area >= 0 else -1.0
    sd = np.full(px.shape, -np.inf)
    for i in range(n):
        p0, p1 = poly[i], poly[(i + 1) % n]
        e = p1 - p0
        norm = math.hypot(e[0], e[1]) or 1.0
        # outward distance is positive outside the edge
        dist = -orient * (e[0] * (py - p0[1]) - e[1] * (px - p0[0])) / norm
        sd = np.maximum(sd, dist)
    return np.clip(0.5 - sd, 0.0, 1.0)


def _blend(img, cov, color):
    img *= 1.0 - cov
    img += cov * color[:, None, None]


def render(kp, ident, H, W, thickness=None):
    """Rasterise one pose of a sprite onto a black canvas. Returns [3,H,W]."""
    thickness = max(1.5, H / 16.0) if thickness is None else thickness
    half = thickness / 2.0
    py, px = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((3, H, W))
    xy = kp.points[:, :2]

    quad = np.array([xy[2], xy[5], xy[11], xy[8]])
    cov = _polygon_coverage(px, py, quad)
    hip_c = 0.5 * (xy[8] + xy[11])
    spine = xy[1] - hip_c
    spine_len = math.hypot(*spine) or 1.0
    axis = spine / spine_len
    if not ident.stripe_along:
        axis = np.array([-axis[1], axis[0]])
    # stripes are fixed to the torso so they follow the pose
    unit = spine_len / 0.36
    t = ((px - hip_c[0]) * axis[0] + (py - hip_c[1]) * axis[1]) / (ident.stripe_period * unit)
    band = (np.floor(t).astype(np.int64) % 2)[None]
    torso_rgb = np.where(band == 0, ident.torso_colors[0][:, None, None], ident.torso_colors[1][:, None, None])
    img *= 1.0 - cov
    img += cov * torso_rgb

    for a, b, slot in LIMBS:
        _blend(img, _segment_coverage(px, py, xy[a], xy[b], half), ident.colors[slot])
    _blend(img, _segment_coverage(px, py, xy[1], xy[0], half * 0.8), ident.colors[8])
    head_r = 0.065 * unit
    _blend(img, np.clip(head_r + 0.5 - np.hypot(px - xy[0, 0], py - xy[0, 1]), 0.0, 1.0), ident.colors[8])
    return np.clip(img, 0.0, 1.0)


def generate_sample(seed, H, W, thickness=None):
    if H < 16 or W < 16:
        raise ValueError(f"generate_sample needs H, W >= 16, got {H}x{W}")
    rng = np.random.default_rng(seed)
    ident = _identity(rng)
    p_s = PoseKeypoints(_articulate(rng, H, W))
    p_t = PoseKeypoints(_articulate(rng, H, W))
    return PoseSample(
        x_s=render(p_s, ident, H, W, thickness),
        p_s=p_s,
        p_t=p_t,
        x_t=render(p_t, ident, H, W, thickness),
        seed=int(seed),
        identity=ident,
    )


# -- tensors for the network -----------------------------------------------------

def default_sigma(H):
    return 1.5 * H / 64.0


def pose_to_heatmap(kp, H, W, sigma=None):
    """[K,H,W] Gaussian bumps, peak exactly 1 at the rounded keypoint; hidden points give zeros."""
    sigma = default_sigma(H) if sigma is None else sigma
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = kp.points if isinstance(kp, PoseKeypoints) else np.asarray(kp)
    cx = np.floor(pts[:, 0] + 0.5)
    cy = np.floor(pts[:, 1] + 0.5)
    ys = np.arange(H, dtype=np.float64)
    xs = np.arange(W, dtype=np.float64)
    gy = np.exp(-((ys[None, :] - cy[:, None]) ** 2) / (2 * sigma * sigma))
    gx = np.exp(-((xs[None, :] - cx[:, None]) ** 2) / (2 * sigma * sigma))
    hm = gy[:, :, None] * gx[:, None, :]
    hm[pts[:, 2] <= 0] = 0.0
    return hm


def make_inputs(sample, sigma=None, self_target=False):
    """(s2t_input, s2s_input), each [3+2K,H,W]: image | heatmap(p_s) | heatmap(p_t or p_s).

    With ``self_target`` the s2t input is built with p_t replaced by p_s,
    which is how self-reconstruction is probed at evaluation time.
    """
    _, H, W = sample.x_s.shape
    hs = pose_to_heatmap(sample.p_s, H, W, sigma)
    ht = hs if self_target else pose_to_heatmap(sample.p_t, H, W, sigma)
    s2t = np.concatenate([sample.x_s, hs, ht], axis=0)
    s2s = np.concatenate([sample.x_s, hs, hs], axis=0)
    return s2t, s2s


@dataclass
class Batch:
    s2t: np.ndarray  # [N,3+2K,H,W]
    s2s: np.ndarray
    x_s: np.ndarray  # [N,3,H,W]
    x_t: np.ndarray
    seeds: list

    def __len__(self):
        return len(self.seeds)


def make_batch(samples, sigma=None, dtype=np.float64, self_target=False):
    pairs = [make_inputs(s, sigma, self_target) for s in samples]
    x_t = [s.x_s if self_target else s.x_t for s in samples]
    return Batch(
        s2t=np.stack([p[0] for p in pairs]).astype(dtype),
        s2s=np.stack([p[1] for p in pairs]).astype(dtype),
        x_s=np.stack([s.x_s for s in samples]).astype(dtype),
        x_t=np.stack(x_t).astype(dtype),
        seeds=[s.seed for s in samples],
    )


# -- seed bookkeeping ------------------------------------------------------------

def train_seeds(run_seed, step, batch_size):
    """Sample seeds for one training batch; always below TEST_SEED_BASE."""
    base = (run_seed % 1000) * 2_000_000 + step * batch_size
    seeds = [base + i for i in range(batch_size)]
    if seeds[-1] >= TEST_SEED_BASE:
        raise ValueError("training seed range exhausted")
    return seeds


def test_seeds(n, offset=0):
    return [TEST_SEED_BASE + offset + i for i in range(n)]


def write_manifest(path, seeds, H, W):
    with open(path, "w", encoding="utf-8") as fh:
        for s in seeds:
            fh.write(f"{s}\t{H}\t{W}\n")


def read_manifest(path):
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        seed, h, w = line.split("\t")
        rows.append((int(seed), int(h), int(w)))
    return rows
