"""Command-line front end.

Subcommands mirror the library surface: ``gen-data`` and ``gen-masks``
write synthetic inputs, ``train`` produces a checkpoint, ``eval`` scores
it on held-out masks, ``ablate`` runs the controls, ``uncertainty``
writes mask-variation variance maps, and ``gradcheck`` runs the
finite-difference verification of the gradient engine.

Exit codes: 0 success, 2 usage/config/data errors (message on stderr),
1 unexpected internal failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, io
from .maskmodel import NoisePrior, build_mask_sets, realize_mask, synthesize_clean_mask
from .trainer import bilevel_train, load_state, save_state

__all__ = ["main"]


def _read_config(path):
    if path is None:
        return harness.load_config("")
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise io.ConfigError(f"cannot read config {path!r}: {e}") from None
    return harness.load_config(text)


def _add_common(p, need_out=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    if need_out:
        p.add_argument("--out-dir", required=True, help="output directory")


def _apply_seed(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_gen_data(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    scenes = harness.gen_synth_scenes(
        args.count, spec.scene_h, spec.scene_w, cfg.bands, rng
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for i, x in enumerate(scenes):
        io.save_cube(os.path.join(args.out_dir, f"scene_{i:03d}.hsc"), x.values)
    print(f"wrote {len(scenes)} scenes to {args.out_dir}")
    return 0


def _cmd_gen_masks(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    clean = synthesize_clean_mask(
        spec.mask_base_h, spec.mask_base_w, spec.mask_density, rng
    )
    base = realize_mask(clean, NoisePrior(cfg.prior_mu, cfg.prior_sigma), rng)
    train, test = build_mask_sets(
        base, (spec.scene_h, spec.scene_w), spec.k_train, spec.k_test, rng
    )
    os.makedirs(args.out_dir, exist_ok=True)
    for i, m in enumerate(train):
        io.save_mask(os.path.join(args.out_dir, f"train_{i:02d}.msk"), m.values)
    for i, m in enumerate(test):
        io.save_mask(os.path.join(args.out_dir, f"test_{i:02d}.msk"), m.values)
    print(f"wrote {len(train)} train and {len(test)} test masks to {args.out_dir}")
    return 0


def _cmd_train(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    exp = harness.build_experiment(cfg, spec)
    if args.resume:
        state = load_state(args.resume)
        bilevel_train(state, exp.train_scenes, exp.val_scenes, exp.train_masks)
    else:
        state = harness.run_training(exp, mode=args.mode)
    os.makedirs(args.out_dir, exist_ok=True)
    save_state(state, os.path.join(args.out_dir, "checkpoint.ckp"))
    io.write_loss_log_csv(os.path.join(args.out_dir, "loss_log.csv"), state.log)
    with open(os.path.join(args.out_dir, "config.txt"), "w", newline="") as f:
        f.write(harness.run_config_text(cfg, spec))
    last = state.log[-1]["loss"] if state.log else float("nan")
    print(f"trained to epoch {state.epoch} (round {state.round}); last loss {last:.6g}")
    print(f"checkpoint: {os.path.join(args.out_dir, 'checkpoint.ckp')}")
    return 0


def _cmd_eval(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    state = load_state(args.checkpoint)
    exp = harness.build_experiment(cfg, spec)
    report = harness.evaluate(state, exp, spec.kind)
    os.makedirs(args.out_dir, exist_ok=True)
    io.write_metrics_csv(os.path.join(args.out_dir, "metrics.csv"), report.rows)
    harness.write_summary(os.path.join(args.out_dir, "summary.csv"), report)
    agg = report.aggregate()["overall"]
    print(
        f"{len(report.rows)} rows; psnr {agg['psnr_mean']:.3f} dB "
        f"(std {agg['psnr_std']:.3f}), ssim {agg['ssim_mean']:.4f}"
    )
    return 0


def _cmd_ablate(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    results = harness.run_ablation(args.kind, cfg, spec, out_dir=args.out_dir)
    for label, report in results.items():
        agg = report.aggregate()["overall"]
        print(f"{label}: psnr {agg['psnr_mean']:.3f} dB, ssim {agg['ssim_mean']:.4f}")
    return 0


def _cmd_uncertainty(args):
    cfg, spec = _read_config(args.config)
    _apply_seed(cfg, args)
    state = load_state(args.checkpoint)
    exp = harness.build_experiment(cfg, spec)
    maps = harness.uncertainty_maps(state, exp, out_dir=args.out_dir)
    for scene_id, (var, _mean) in enumerate(maps):
        print(f"scene {scene_id}: variance mean {var.mean():.6g}, max {var.max():.6g}")
    return 0


def _cmd_gradcheck(args):
    rows = harness.run_gradient_suite(quick=args.quick)
    bad = 0
    for name, err, tol, ok in rows:
        mark = "ok " if ok else "FAIL"
        print(f"{mark} {name:12s} max rel err {err:.3e} (tol {tol:.0e})")
        bad += 0 if ok else 1
    return 0 if bad == 0 else 2


def _build_parser():
    p = argparse.ArgumentParser(
        prog="casskit",
        description="coded-aperture snapshot spectral imaging toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("gen-data", help="write synthetic scene cubes")
    _add_common(q)
    q.add_argument("--count", type=int, default=8, help="number of scenes")
    q.set_defaults(fn=_cmd_gen_data)

    q = sub.add_parser("gen-masks", help="write fabricated train/test masks")
    _add_common(q)
    q.set_defaults(fn=_cmd_gen_masks)

    q = sub.add_parser("train", help="train and write a checkpoint")
    _add_common(q)
    q.add_argument(
        "--mode",
        default="full",
        choices=("full", "no-gst", "no-bilevel", "fixed-variance"),
        help="training regime",
    )
    q.add_argument("--resume", help="checkpoint to continue from")
    q.set_defaults(fn=_cmd_train)

    q = sub.add_parser("eval", help="score a checkpoint on held-out masks")
    _add_common(q)
    q.add_argument("--checkpoint", required=True)
    q.set_defaults(fn=_cmd_eval)

    q = sub.add_parser("ablate", help="run a control experiment family")
    _add_common(q)
    q.add_argument(
        "--kind",
        required=True,
        choices=("no-gst", "no-bilevel", "fixed-variance", "prior-study"),
    )
    q.set_defaults(fn=_cmd_ablate)

    q = sub.add_parser("uncertainty", help="write mask-variation variance maps")
    _add_common(q)
    q.add_argument("--checkpoint", required=True)
    q.set_defaults(fn=_cmd_uncertainty)

    q = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    q.add_argument("--quick", action="store_true", help="fewer random trials")
    q.set_defaults(fn=_cmd_gradcheck)

    return p


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (io.FormatError, io.ConfigError, ValueError, OSError) as e:
        print(f"casskit: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
