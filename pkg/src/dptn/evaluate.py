"""Checkpoint evaluation and image / attention-map dumps."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from dptn import autograd as ag
from dptn.data import generate_sample, make_batch, test_seeds
from dptn.metrics import MetricReport, batch_metrics
from dptn.pnm import write_pgm, write_ppm
from dptn.train import Trainer


def _trainer(model_or_path):
    return model_or_path if isinstance(model_or_path, Trainer) else Trainer.load(model_or_path)


def _batch(tr, seeds):
    H, W = tr.cfg.hw
    return make_batch([generate_sample(s, H, W) for s in seeds], dtype=tr.dtype)


def evaluate(checkpoint, seeds=None, batch_size=16):
    """SSIM / PSNR of generated targets against ground truth over the given test seeds."""
    tr = _trainer(checkpoint)
    seeds = list(test_seeds(16) if seeds is None else seeds)
    if not seeds:
        raise ValueError("evaluate: empty seed list")
    ssim_sum = psnr_sum = 0.0
    for i in range(0, len(seeds), batch_size):
        b = _batch(tr, seeds[i:i + batch_size])
        with ag.no_grad():
            pred, _ = tr.model.generate(b.s2t, b.x_s, tr.cfg.ablation)
        m = batch_metrics(pred.data, b.x_t)
        ssim_sum += m.ssim * m.n_samples
        psnr_sum += m.psnr * m.n_samples
    n = len(seeds)
    return MetricReport(ssim_sum / n, psnr_sum / n, n, params=tr.model.num_parameters())


def _to_image(a):
    return np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)


def default_query(h4, w4):
    return h4 // 2, w4 // 2


def attention_images(weights, h4, w4, query):
    """Cross-attention maps for one sample: {(block, head): uint8 [h4, w4]}.

    ``weights`` is the per-block list of [h, Lq, Lk] arrays. The row for the
    query position is reshaped to the feature grid and scaled so its largest
    weight maps to 255.
    """
    y, x = query
    if not (0 <= y < h4 and 0 <= x < w4):
        raise ValueError(f"query {query} outside the {h4}x{w4} feature grid")
    q = y * w4 + x
    out = {}
    for i, w in enumerate(weights):
        for j in range(w.shape[0]):
            row = w[j, q].reshape(h4, w4)
            peak = row.max()
            scaled = row / peak if peak > 0 else row
            out[(i, j)] = np.rint(scaled * 255.0).astype(np.uint8)
    return out


def dump_attention(tr, seeds, out_dir, query=None):
    """Write ``ttb{i}_head{j}_q{y}_{x}.pgm`` per sample; returns the written paths."""
    tr = _trainer(tr)
    if not tr.cfg.use_ptm:
        raise ValueError("attention maps need a model trained with the pose transformer")
    out_dir = Path(out_dir)
    H, W = tr.cfg.hw
    h4, w4 = H // 4, W // 4
    query = default_query(h4, w4) if query is None else tuple(query)
    b = _batch(tr, seeds)
    with ag.no_grad():
        _, attention = tr.model.generate(b.s2t, b.x_s, tr.cfg.ablation)
    written = []
    for n, seed in enumerate(seeds):
        d = out_dir / f"sample_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        maps = attention_images([w[n] for w in attention], h4, w4, query)
        for (i, j), img in maps.items():
            path = d / f"ttb{i}_head{j}_q{query[0]}_{query[1]}.pgm"
            write_pgm(path, img / 255.0)
            written.append(path)
    return written


def dump_images(tr, seeds, out_dir, query=None):
    """Per sample: x_s, x_t, reconstructed x_s and generated x_t as PPM, plus attention PGMs."""
    tr = _trainer(tr)
    out_dir = Path(out_dir)
    b = _batch(tr, seeds)
    # the decoder exists in every variant, so the reconstruction is always viewable
    view = dataclasses.replace(tr.cfg.ablation, use_dtl=True)
    with ag.no_grad():
        out = tr.model.dual_forward(b.s2t, b.s2s, b.x_s, view)
    written = []
    for n, seed in enumerate(seeds):
        d = out_dir / f"sample_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        for name, img in (("x_s", b.x_s[n]), ("x_t", b.x_t[n]),
                          ("x_s_rec", out.x_s_rec.data[n]), ("x_t_gen", out.x_t_gen.data[n])):
            write_ppm(d / f"{name}.ppm", _to_image(img))
            written.append(d / f"{name}.ppm")
    if tr.cfg.use_ptm:
        written += dump_attention(tr, seeds, out_dir, query)
    return written
