"""Command-line entry point: ``dptn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Results go to files
under ``--out``; progress and summaries go to standard error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from dptn import gradsuite
from dptn.backbone import ABLATION_VARIANTS
from dptn.data import KEYPOINT_NAMES, generate_sample, test_seeds, train_seeds, write_manifest
from dptn.evaluate import dump_attention, dump_images, evaluate
from dptn.pnm import write_ppm
from dptn.train import (
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    load_config,
    run_ablation_suite,
    run_dualtask_probe,
)

log = logging.getLogger("dptn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _res(text):
    parts = text.lower().split("x")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return text.lower()


def _query(text):
    vals = _int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected y,x, got {text!r}")
    return tuple(vals)


def _common(p, out_required=True):
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--res", type=_res, help="image size HxW (overrides the config)")
    p.add_argument("--steps", type=int, help="training steps (overrides the config)")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser():
    parser = _Parser(prog="dptn", description="Dual-task pose transfer on synthetic sprites.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render sample pairs as PPM plus a seed manifest")
    _common(p)
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--split", choices=("train", "test"), default="train")

    p = sub.add_parser("train", help="train one model")
    _common(p)

    p = sub.add_parser("eval", help="SSIM/PSNR of a checkpoint on the test seeds")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-test", type=int, default=16, help="number of test seeds")
    p.add_argument("--dump", type=int, default=0, help="also write images for this many samples")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train all ablation variants per seed")
    _common(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))

    p = sub.add_parser("probe-dualtask", help="self-reconstruction with and without the dual task")
    _common(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--ops", default="all", help="'all' or a comma-separated subset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the table to OUT/gradcheck.tsv")

    p = sub.add_parser("attn-dump", help="cross-attention maps as PGM")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seeds", type=_int_list, help="sample seeds (default: first 4 test seeds)")
    p.add_argument("--query", type=_query, help="query position y,x on the feature grid (default: centre)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "res", "steps") if getattr(args, k, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def cmd_gen_data(args):
    cfg = _config(args)
    H, W = cfg.hw
    seeds = test_seeds(args.n) if args.split == "test" else train_seeds(cfg.seed, 0, args.n)
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(args.out / "manifest.tsv", seeds, H, W)
    for seed in seeds:
        s = generate_sample(seed, H, W)
        d = args.out / f"sample_{seed}"
        d.mkdir(exist_ok=True)
        write_ppm(d / "x_s.ppm", s.x_s)
        write_ppm(d / "x_t.ppm", s.x_t)
        lines = ["pose\tkeypoint\tx\ty\tvisible"]
        for tag, kp in (("source", s.p_s), ("target", s.p_t)):
            for name, (x, y, v) in zip(KEYPOINT_NAMES, kp.points):
                lines.append(f"{tag}\t{name}\t{x!r}\t{y!r}\t{int(v)}")
        (d / "keypoints.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d samples to %s", len(seeds), args.out)


def cmd_train(args):
    cfg = _config(args)
    tr = Trainer(cfg)
    log.info("training %d steps at %s, %d parameters", cfg.steps, cfg.res, tr.model.num_parameters())
    tr.fit(cfg.steps, args.out)
    ev = tr.evaluate_holdout()
    log.info("held-out psnr %.3f ssim %.4f", ev.psnr, ev.ssim)


def cmd_eval(args):
    tr = Trainer.load(args.checkpoint)
    seeds = test_seeds(args.n_test)
    report = evaluate(tr, seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    if args.dump:
        dump_images(tr, seeds[: args.dump], args.out / "images")
    log.info("ssim %.4f psnr %.3f over %d samples (%d parameters)",
             report.ssim, report.psnr, report.n_samples, report.params)


def cmd_ablate(args):
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(ABLATION_VARIANTS)}")
    table = run_ablation_suite(_config(args), seeds=tuple(args.seeds), variants=variants, steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.tsv").write_text(table.to_tsv(), encoding="utf-8")
    for v, (p, s, _) in table.summary().items():
        log.info("%-8s psnr %.3f ssim %.4f", v, p, s)


def cmd_probe(args):
    table = run_dualtask_probe(_config(args), seeds=tuple(args.seeds), steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "probe.tsv").write_text(table.to_tsv(), encoding="utf-8")
    wins, n = table.strict_wins("dual_task", "source_to_target")
    log.info("dual-task better at self-reconstruction on %d of %d seeds", wins, n)


def cmd_gradcheck(args):
    try:
        results = gradsuite.run(args.ops, seed=args.seed)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    table = gradsuite.format_table(results)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.tsv").write_text(table, encoding="utf-8")
    sys.stderr.write(table)
    failed = [r.name for r in results if not r.ok]
    if failed:
        log.error("gradient check failed for %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_attn_dump(args):
    seeds = args.seeds or test_seeds(4)
    paths = dump_attention(args.checkpoint, seeds, args.out, args.query)
    log.info("wrote %d attention maps", len(paths))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "probe-dualtask": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "attn-dump": cmd_attn_dump,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        sys.stderr.write(f"dptn {args.command}: {e}\n")
        return EXIT_USAGE
    except NonFiniteLossError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    log.debug("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
