"""PSNR and SSIM on images in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b, cap=PSNR_CAP):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=0) if img.ndim == 3 else img


def _filter_valid(x, g):
    # separable correlation over the window positions that fit inside the image
    k = len(g)
    rows = sum(g[i] * x[i:x.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean SSIM over all fully-contained Gaussian windows of the channel-mean images."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < window:
        raise ValueError(f"ssim: image {x.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    n_samples: int
    psnr_cap: float = PSNR_CAP
    params: int | None = None

    HEADER = "n_samples\tssim\tpsnr\tpsnr_cap\tparams"

    def to_tsv(self):
        note = "# LPIPS/FID omitted: they need pretrained networks; see perc_holdout in curves.tsv\n"
        params = "" if self.params is None else str(self.params)
        return (f"{note}{self.HEADER}\n"
                f"{self.n_samples}\t{self.ssim!r}\t{self.psnr!r}\t{self.psnr_cap!r}\t{params}\n")


def batch_metrics(pred, target):
    """Mean SSIM / PSNR over a batch of [N,3,H,W] images."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape[0] < 1:
        raise ValueError("batch_metrics: empty batch")
    s = [ssim(p, t) for p, t in zip(pred, target)]
    q = [psnr(p, t) for p, t in zip(pred, target)]
    return MetricReport(float(np.mean(s)), float(np.mean(q)), len(s))
