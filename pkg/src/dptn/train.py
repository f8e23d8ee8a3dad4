"""Joint dual-task training, ablation runs and the self-reconstruction probe."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dptn import autograd as ag
from dptn import checkpoint
from dptn.backbone import ABLATION_VARIANTS, DPTN, AblationConfig, ModelConfig
from dptn.data import generate_sample, make_batch, test_seeds, train_seeds
from dptn.losses import (
    FeatureStub,
    LossReport,
    LossWeights,
    discriminator_loss,
    feature_losses,
    generator_adv_loss,
    l1_loss,
    perceptual_loss,
    total_loss,
)
from dptn.metrics import batch_metrics

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "loss", "loss_ss", "loss_st", "loss_d", "psnr_holdout", "perc_holdout")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg, step, last_checkpoint=None):
        super().__init__(f"{msg} (step {step}; last good checkpoint: {last_checkpoint or 'none'})")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    eval_every: int = 20
    holdout: int = 16
    # data / model
    res: str = "32x32"
    width: int = 16
    disc_width: int = 16
    n_res: int = 3
    ptm_blocks: int = 2
    heads: int = 2
    dtype: str = "float32"
    stub_seed: int = 7
    # ablation switches
    use_dtl: bool = True
    use_ptm: bool = True
    use_cabs: bool = True
    use_en_s: bool = True
    # loss weights
    lambda_l1: float = 2.5
    lambda_perc: float = 0.25
    lambda_style: float = 250.0
    lambda_adv: float = 2.0
    adv_mode: str = "nonsaturating"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.adv_mode not in ("nonsaturating", "saturating"):
            raise ConfigError(f"adv_mode must be nonsaturating or saturating, got {self.adv_mode!r}")
        h, w = self.hw
        if h % 4 or w % 4 or h < 16 or w < 16:
            raise ConfigError(f"res {self.res}: need H, W >= 16 and divisible by 4")

    @property
    def hw(self):
        try:
            h, w = self.res.lower().split("x")
            return int(h), int(w)
        except ValueError:
            raise ConfigError(f"res must look like HxW, got {self.res!r}") from None

    @property
    def ablation(self):
        return AblationConfig(self.use_dtl, self.use_ptm, self.use_cabs, self.use_en_s)

    @property
    def weights(self):
        return LossWeights(self.lambda_l1, self.lambda_perc, self.lambda_style, self.lambda_adv)

    def model_config(self):
        return ModelConfig(width=self.width, n_res=self.n_res, ptm_blocks=self.ptm_blocks,
                           heads=self.heads, disc_width=self.disc_width, dtype=self.dtype)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def with_ablation(self, ab):
        return self.replace(use_dtl=ab.use_dtl, use_ptm=ab.use_ptm, use_cabs=ab.use_cabs, use_en_s=ab.use_en_s)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(name, typ, raw):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def parse_config(text, base=None):
    """``key = value`` lines; ``#`` starts a comment; unknown keys are an error."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, types[key], raw)
    return (base or TrainConfig()).replace(**values)


def load_config(path, base=None):
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping, updating ``data`` in place."""

    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for n, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {n}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self, prefix):
        out = {}
        for n in self.params:
            out[f"{prefix}.m/{n}"] = self.m[n]
            out[f"{prefix}.v/{n}"] = self.v[n]
        return out

    def load_state(self, tensors, prefix, t):
        for n, p in self.params.items():
            self.m[n][...] = tensors[f"{prefix}.m/{n}"]
            self.v[n][...] = tensors[f"{prefix}.v/{n}"]
        self.t = t


def adam_step(params, grads, state, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
    """Functional form on plain arrays: ``state`` holds ``m``, ``v`` (lists) and ``t``."""
    if any(not np.all(np.isfinite(g)) for g in grads):
        raise FloatingPointError("non-finite gradient; step aborted")
    if not state:
        state.update(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], t=0)
    state["t"] += 1
    t = state["t"]
    out = []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        out.append(p - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps))
    return out


@dataclass
class CurveRecord:
    step: int
    loss: float
    loss_ss: float
    loss_st: float
    loss_d: float
    psnr_holdout: float
    perc_holdout: float

    def to_row(self):
        return "\t".join(str(self.step) if c == "step" else repr(float(getattr(self, c))) for c in CURVE_COLUMNS)


def emit_curves(records, path):
    lines = ["\t".join(CURVE_COLUMNS)] + [r.to_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curves(path):
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    header = rows[0].split("\t")
    return [dict(zip(header, (float(x) for x in r.split("\t")))) for r in rows[1:] if r]


@dataclass
class HoldoutEval:
    psnr: float
    ssim: float
    perc: float
    n: int


class Trainer:
    def __init__(self, cfg=TrainConfig()):
        self.cfg = cfg
        self.H, self.W = cfg.hw
        self.dtype = np.dtype(cfg.dtype)
        self.model = DPTN(cfg.model_config(), seed=cfg.seed)
        self.stub = FeatureStub(cfg.stub_seed, dtype=self.dtype)
        self.opt_g = Adam(self.model.generator_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.opt_d = Adam(self.model.discriminator_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.step = 0
        self.records: list[CurveRecord] = []
        self.last_checkpoint = None
        self._holdout = None

    # -- data -----------------------------------------------------------------
    def batch_at(self, step):
        seeds = train_seeds(self.cfg.seed, step, self.cfg.batch_size)
        return make_batch([generate_sample(s, self.H, self.W) for s in seeds], dtype=self.dtype)

    def holdout_batch(self, self_target=False):
        if self._holdout is None:
            self._holdout = [generate_sample(s, self.H, self.W) for s in test_seeds(self.cfg.holdout)]
        return make_batch(self._holdout, dtype=self.dtype, self_target=self_target)

    # -- one optimisation step ------------------------------------------------
    def train_step(self, batch):
        cfg, model, ab = self.cfg, self.model, self.cfg.ablation
        out = model.dual_forward(batch.s2t, batch.s2s, batch.x_s, ab)
        if not np.all(np.isfinite(out.x_t_gen.data)):
            raise NonFiniteLossError("non-finite generator output", self.step, self.last_checkpoint)
        x_t = ag.Tensor(batch.x_t)
        x_s = ag.Tensor(batch.x_s)

        self.opt_d.zero_grad()
        loss_d = discriminator_loss(model.disc, x_t, out.x_t_gen)
        if not math.isfinite(loss_d.item()):
            raise NonFiniteLossError("non-finite discriminator loss", self.step, self.last_checkpoint)
        loss_d.backward()
        self.opt_d.step()

        # D weights are constants for the generator update
        model.disc.set_requires_grad(False)
        try:
            parts = {"t_adv": generator_adv_loss(model.disc, out.x_t_gen, cfg.adv_mode),
                     "t_l1": l1_loss(out.x_t_gen, x_t)}
            parts["t_perc"], parts["t_style"] = feature_losses(out.x_t_gen, x_t, self.stub)
            if ab.use_dtl:
                parts["s_l1"] = l1_loss(out.x_s_rec, x_s)
                parts["s_perc"], parts["s_style"] = feature_losses(out.x_s_rec, x_s, self.stub)
            rep = total_loss(parts, cfg.weights, ab.use_dtl)
            if not math.isfinite(rep.loss):
                raise NonFiniteLossError("non-finite generator loss", self.step, self.last_checkpoint)
            self.opt_g.zero_grad()
            rep.total.backward()
            self.opt_g.step()
        finally:
            model.disc.set_requires_grad(True)
        rep.loss_d = loss_d.item()
        rep.total = None
        self.step += 1
        return rep

    # -- evaluation -------------------------------------------------------------
    def evaluate_holdout(self, self_target=False):
        b = self.holdout_batch(self_target)
        with ag.no_grad():
            pred, _ = self.model.generate(b.s2t, b.x_s, self.cfg.ablation)
            perc = perceptual_loss(pred, ag.Tensor(b.x_t), self.stub).item()
        m = batch_metrics(pred.data, b.x_t)
        return HoldoutEval(m.psnr, m.ssim, perc, m.n_samples)

    # -- loop -------------------------------------------------------------------
    def fit(self, steps=None, out_dir=None):
        steps = self.cfg.steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        loss_log = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.cfg").write_text(self.cfg.dumps(), encoding="utf-8")
            loss_log = open(out / "losses.tsv", "w", encoding="utf-8")
            loss_log.write(LossReport.header() + "\n")
        try:
            for _ in range(steps):
                rep = self.train_step(self.batch_at(self.step))
                if loss_log:
                    loss_log.write(rep.to_row(self.step) + "\n")
                if self.step % self.cfg.eval_every == 0:
                    ev = self.evaluate_holdout()
                    self.records.append(CurveRecord(self.step, rep.loss, rep.loss_ss, rep.loss_st,
                                                    rep.loss_d, ev.psnr, ev.perc))
                    log.info("step %d  L=%.4f  L_D=%.4f  psnr=%.3f  perc=%.4f",
                             self.step, rep.loss, rep.loss_d, ev.psnr, ev.perc)
                    if out is not None:
                        self.save(out / "last_good.ckpt")
                        self.last_checkpoint = str(out / "last_good.ckpt")
        finally:
            if loss_log:
                loss_log.close()
        if out is not None:
            self.save(out / "model.ckpt")
            emit_curves(self.records, out / "curves.tsv")
        return self.records

    # -- persistence --------------------------------------------------------------
    def save(self, path):
        tensors = dict(self.model.state_dict())
        tensors.update(self.opt_g.state("opt_g"))
        tensors.update(self.opt_d.state("opt_d"))
        header = {"config": self.cfg.to_dict(), "seed": self.cfg.seed, "step": self.step,
                  "opt_g_t": self.opt_g.t, "opt_d_t": self.opt_d.t}
        checkpoint.save(path, tensors, header)

    @classmethod
    def load(cls, path):
        header, tensors = checkpoint.load(path)
        tr = cls(TrainConfig(**header["config"]))
        tr.model.load_state_dict({n: tensors[n] for n, _ in tr.model.named_parameters()})
        tr.opt_g.load_state(tensors, "opt_g", header["opt_g_t"])
        tr.opt_d.load_state(tensors, "opt_d", header["opt_d_t"])
        tr.step = header["step"]
        return tr


def train(cfg, out_dir=None, steps=None):
    tr = Trainer(cfg)
    tr.fit(steps, out_dir)
    return tr


# -- experiments -------------------------------------------------------------------

@dataclass
class VariantResult:
    variant: str
    seed: int
    psnr: float
    ssim: float
    perc: float
    params: int

    HEADER = "variant\tseed\tpsnr\tssim\tperc\tparams"

    def to_row(self):
        return f"{self.variant}\t{self.seed}\t{self.psnr!r}\t{self.ssim!r}\t{self.perc!r}\t{self.params}"


@dataclass
class ExperimentTable:
    rows: list = field(default_factory=list)

    def by(self, variant):
        return [r for r in self.rows if r.variant == variant]

    def summary(self):
        out = {}
        for r in self.rows:
            out.setdefault(r.variant, []).append(r)
        return {v: (float(np.mean([r.psnr for r in rs])), float(np.mean([r.ssim for r in rs])),
                    float(np.mean([r.perc for r in rs]))) for v, rs in out.items()}

    def to_tsv(self):
        lines = [VariantResult.HEADER] + [r.to_row() for r in self.rows]
        lines.append("# mean over seeds")
        lines.append("variant\tpsnr\tssim\tperc")
        for v, (p, s, c) in self.summary().items():
            lines.append(f"{v}\t{p!r}\t{s!r}\t{c!r}")
        return "\n".join(lines) + "\n"

    def wins(self, a, b, metric="psnr"):
        """Seeds on which variant ``a`` scores >= variant ``b`` (and the seed count)."""
        ra = {r.seed: getattr(r, metric) for r in self.by(a)}
        rb = {r.seed: getattr(r, metric) for r in self.by(b)}
        seeds = sorted(set(ra) & set(rb))
        return sum(ra[s] >= rb[s] for s in seeds), len(seeds)

    def strict_wins(self, a, b, metric="psnr"):
        ra = {r.seed: getattr(r, metric) for r in self.by(a)}
        rb = {r.seed: getattr(r, metric) for r in self.by(b)}
        seeds = sorted(set(ra) & set(rb))
        return sum(ra[s] > rb[s] for s in seeds), len(seeds)


def run_ablation_suite(base_cfg, seeds=(1, 2, 3), variants=ABLATION_VARIANTS, steps=None):
    """Train every variant on the same data seeds; report held-out source-to-target metrics."""
    table = ExperimentTable()
    for seed in seeds:
        for name in variants:
            cfg = base_cfg.with_ablation(AblationConfig.variant(name)).replace(seed=seed)
            tr = train(cfg, steps=steps)
            ev = tr.evaluate_holdout()
            table.rows.append(VariantResult(name, seed, ev.psnr, ev.ssim, ev.perc, tr.model.num_parameters()))
            log.info("ablation %s seed %d: psnr=%.3f ssim=%.4f", name, seed, ev.psnr, ev.ssim)
    return table


PROBE_VARIANTS = {
    # the basic network only: shared encoder, ResBlocks and decoder
    "source_to_target": AblationConfig(use_dtl=False, use_ptm=False),
    "dual_task": AblationConfig(use_dtl=True, use_ptm=False),
}


def run_dualtask_probe(base_cfg, seeds=(1, 2, 3), steps=None):
    """Train with and without the self-reconstruction task, then test both on
    self-reconstruction (target pose = source pose)."""
    table = ExperimentTable()
    for seed in seeds:
        for name, ab in PROBE_VARIANTS.items():
            tr = train(base_cfg.with_ablation(ab).replace(seed=seed), steps=steps)
            ev = tr.evaluate_holdout(self_target=True)
            table.rows.append(VariantResult(name, seed, ev.psnr, ev.ssim, ev.perc, tr.model.num_parameters()))
            log.info("probe %s seed %d: self-rec psnr=%.3f", name, seed, ev.psnr)
    return table
