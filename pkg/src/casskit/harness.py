"""End-to-end experiment harness: data synthesis, scenarios, ablations.

A scenario bundles synthetic scene generation, mask fabrication, training
(full method by default), and a trial loop that scores reconstructions on
held-out masks.  Scenario kinds name the train/test mask relationship:

* ``one-to-one``   train on one mask, test on that same mask;
* ``one-to-many``  train on one mask, test on unseen masks;
* ``many-to-many`` train on a mask set, test on unseen masks.

Ablations reuse the same bundle with the training regime swapped out:
``no-gst`` (plain mask-ensemble training), ``no-bilevel`` (joint
single-loop optimization of both networks on the training scenes),
``fixed-variance`` (constant perturbation spread instead of the learned
map), and ``prior-study`` (full method under different fabrication-error
priors).  Reports land as deterministic CSV files, uncertainty maps as
PGM images plus raw cube dumps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from . import io
from .backbone import srn_init
from .gstnet import gst_init
from .maskmodel import (
    MaskSet,
    NoisePrior,
    build_mask_sets,
    realize_mask,
    synthesize_clean_mask,
)
from .metrics import TrialReport, epistemic_map, psnr, ssim
from .ndgrad import Tensor, backward, grad_check, tmean, tsum
from .optics import HsiCube, Mask, encode
from .trainer import (
    TrainConfig,
    baseline_train,
    bilevel_train,
    make_dataset,
    make_state,
    pretrain,
    reconstruct_scene,
    save_state,
    total_loss,
)

__all__ = [
    "ScenarioSpec",
    "Experiment",
    "gen_synth_scenes",
    "build_experiment",
    "run_training",
    "evaluate",
    "run_scenario",
    "run_ablation",
    "uncertainty_maps",
    "load_config",
    "run_config_text",
    "write_summary",
    "run_gradient_suite",
]

_KINDS = ("one-to-one", "one-to-many", "many-to-many")
_ABLATIONS = ("no-gst", "no-bilevel", "fixed-variance", "prior-study")

# fixed role indices for deriving independent generator streams from one seed
_ROLE_SCENES = 1
_ROLE_MASKS = 2
_ROLE_DATA = 3
_ROLE_TRIALS = 4
_ROLE_EVAL_NOISE = 5


def _role_rng(seed, role):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(role)]))


@dataclass
class ScenarioSpec:
    """Experiment geometry: scenes, masks, and the trial protocol."""

    kind: str = "many-to-many"
    scene_h: int = 16
    scene_w: int = 16
    scenes_train: int = 20
    scenes_val: int = 6
    scenes_test: int = 4
    mask_base_h: int = 48
    mask_base_w: int = 48
    mask_density: float = 0.5
    k_train: int = 6
    k_test: int = 4
    trials: int = 16
    eval_noise_std: float = 0.0

    def validate(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; one of {_KINDS}")
        if min(self.scene_h, self.scene_w) < 4:
            raise ValueError("scenes must be at least 4x4")
        if min(self.scenes_train, self.scenes_val) < 1 or self.scenes_test < 1:
            raise ValueError("scene counts must be >= 1")
        if self.mask_base_h < self.scene_h or self.mask_base_w < self.scene_w:
            raise ValueError("mask base must be at least the scene size")
        if not 0.0 <= self.mask_density <= 1.0:
            raise ValueError(f"mask density must be in [0, 1], got {self.mask_density}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.eval_noise_std < 0:
            raise ValueError("eval noise std must be >= 0")
        if self.kind == "one-to-one":
            if self.k_train != 1 or self.k_test != 1:
                raise ValueError("one-to-one requires k_train = k_test = 1")
        elif self.kind == "one-to-many":
            if self.k_train != 1:
                raise ValueError("one-to-many requires k_train = 1")
            if self.k_test < 1:
                raise ValueError("one-to-many requires k_test >= 1")
        else:
            if self.k_train < 1 or self.k_test < 1:
                raise ValueError("many-to-many requires k_train, k_test >= 1")
        return self


def load_config(text):
    """One flat config file -> (TrainConfig, ScenarioSpec).

    Keys are routed to whichever dataclass declares them; anything left
    over raises :class:`casskit.io.ConfigError`.
    """
    items = io.parse_config(text)
    used = set()
    cfg = io.coerce_dataclass(items, TrainConfig, used=used)
    spec = io.coerce_dataclass(items, ScenarioSpec, used=used)
    leftover = sorted(set(items) - used)
    if leftover:
        valid = sorted(
            {f.name for f in fields(TrainConfig)} | {f.name for f in fields(ScenarioSpec)}
        )
        raise io.ConfigError(
            f"unknown config keys: {', '.join(leftover)}; valid keys: {', '.join(valid)}"
        )
    cfg.validate()
    spec.validate()
    return cfg, spec


def gen_synth_scenes(count, h, w, bands, rng):
    """Random scenes: sums of spatial Gaussian blobs with smooth spectra.

    Each blob is a 2-D Gaussian bump times a smooth spectral curve, so
    neighbouring bands stay strongly correlated, as in natural
    hyperspectral data.  Scenes are normalized to peak 1.
    """
    if min(h, w) < 4:
        raise ValueError("scenes must be at least 4x4")
    if bands < 1:
        raise ValueError("bands must be >= 1")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lam = np.arange(bands, dtype=np.float64)
    scenes = []
    for _ in range(count):
        vol = np.zeros((h, w, bands))
        for _b in range(int(rng.integers(3, 7))):
            cy = rng.uniform(0, h - 1)
            cx = rng.uniform(0, w - 1)
            sig = rng.uniform(min(h, w) / 8.0, min(h, w) / 3.0)
            amp = rng.uniform(0.4, 1.0)
            center = rng.uniform(0, bands - 1) if bands > 1 else 0.0
            bsig = rng.uniform(max(bands / 3.0, 0.75), max(bands, 1.5))
            spatial = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig**2))
            spectrum = np.exp(-((lam - center) ** 2) / (2.0 * bsig**2))
            vol += amp * spatial[:, :, None] * spectrum[None, None, :]
        vol /= vol.max()
        scenes.append(HsiCube(vol))
    return scenes


@dataclass
class Experiment:
    """Generated inputs for one scenario run."""

    cfg: TrainConfig
    spec: ScenarioSpec
    train_scenes: list
    val_scenes: list
    test_scenes: list
    train_masks: MaskSet
    test_masks: MaskSet
    datasets: dict


def build_experiment(cfg, spec, prior=None):
    """Generate scenes, fabricate masks, and encode the datasets."""
    cfg.validate()
    spec.validate()
    if prior is None:
        prior = NoisePrior(cfg.prior_mu, cfg.prior_sigma)
    scene_rng = _role_rng(cfg.seed, _ROLE_SCENES)
    n = spec.scenes_train + spec.scenes_val + spec.scenes_test
    scenes = gen_synth_scenes(n, spec.scene_h, spec.scene_w, cfg.bands, scene_rng)
    trn = scenes[: spec.scenes_train]
    val = scenes[spec.scenes_train : spec.scenes_train + spec.scenes_val]
    tst = scenes[spec.scenes_train + spec.scenes_val :]

    mask_rng = _role_rng(cfg.seed, _ROLE_MASKS)
    clean = synthesize_clean_mask(
        spec.mask_base_h, spec.mask_base_w, spec.mask_density, mask_rng
    )
    base = realize_mask(clean, prior, mask_rng)
    if spec.kind == "one-to-one":
        train_masks, _ = build_mask_sets(
            base, (spec.scene_h, spec.scene_w), 1, 0, mask_rng
        )
        test_masks = MaskSet(tuple(train_masks.masks), "test")
    else:
        train_masks, test_masks = build_mask_sets(
            base, (spec.scene_h, spec.scene_w), spec.k_train, spec.k_test, mask_rng
        )

    data_rng = _role_rng(cfg.seed, _ROLE_DATA)
    datasets = {
        "train": make_dataset(trn, train_masks, cfg, data_rng, "train"),
        "val": make_dataset(val, train_masks, cfg, data_rng, "val"),
        "test": make_dataset(tst, train_masks, cfg, data_rng, "test"),
    }
    return Experiment(cfg, spec, trn, val, tst, train_masks, test_masks, datasets)


def run_training(exp, mode="full", fixed_g=0.0, prior=None):
    """Train on an experiment bundle under one regime; returns the state.

    Modes: "full" (pretrain + alternating bilevel), "no-gst", "no-bilevel",
    "fixed-variance" (uses ``fixed_g``), "untrained" (fresh weights only).
    Epoch budgets of the controls match the full method's theta budget.
    """
    cfg = exp.cfg
    theta_epochs = cfg.t_init + cfg.rounds * cfg.t_trn
    if mode == "full":
        state = make_state(cfg, with_gst=True)
        pretrain(state, exp.train_scenes, exp.train_masks)
        bilevel_train(state, exp.train_scenes, exp.val_scenes, exp.train_masks)
        return state
    if mode == "untrained":
        return make_state(cfg, with_gst=True)
    if mode == "no-gst":
        state = make_state(cfg, with_gst=False)
        baseline_train(state, exp.train_scenes, exp.train_masks, theta_epochs)
        return state
    if mode == "fixed-variance":
        state = make_state(cfg, with_gst=False)
        baseline_train(
            state, exp.train_scenes, exp.train_masks, theta_epochs, fixed_g=fixed_g
        )
        return state
    if mode == "no-bilevel":
        return _joint_train(exp)
    raise ValueError(f"unknown training mode {mode!r}")


def _joint_train(exp):
    """Single-loop control: theta and phi step together on the train scenes."""
    cfg = exp.cfg
    state = make_state(cfg, with_gst=True)
    pretrain(state, exp.train_scenes, exp.train_masks)
    epochs = cfg.rounds * (cfg.t_trn + cfg.t_val)
    scenes = list(exp.train_scenes)
    for _ in range(epochs):
        lr_t = cfg.alpha1 * 0.5 ** (state.epoch // cfg.lr_halve_period)
        lr_p = cfg.alpha2 * 0.5 ** (state.epoch // cfg.lr_halve_period)
        tot = 0.0
        ent_tot = 0.0
        nb = 0
        for batch in _joint_batches(scenes, cfg.batch, state.rngs["order"]):
            m = exp.train_masks[int(state.rngs["mask"].integers(len(exp.train_masks)))]
            total, _recon, ent = total_loss(
                state.theta, state.phi, batch, m, cfg, state.rngs["eps"],
                n_total=len(scenes),
            )
            backward(total)
            state.adam_theta.step(lr_t)
            state.adam_phi.step(lr_p)
            state.adam_theta.zero_grad()
            state.adam_phi.zero_grad()
            tot += float(total.data)
            ent_tot += float(ent)
            nb += 1
        state.epoch += 1
        state.log.append(
            {"phase": "joint", "round": -1, "epoch": state.epoch,
             "loss": tot / max(nb, 1), "entropy": ent_tot / max(nb, 1)}
        )
    return state


def _joint_batches(scenes, batch, rng):
    idx = rng.permutation(len(scenes))
    for s in range(0, len(idx), batch):
        yield [scenes[int(i)] for i in idx[s : s + batch]]


def evaluate(state, exp, label):
    """Trial loop: score test scenes on masks drawn from the test set."""
    spec = exp.spec
    cfg = exp.cfg
    trial_rng = _role_rng(cfg.seed, _ROLE_TRIALS)
    noise_rng = _role_rng(cfg.seed, _ROLE_EVAL_NOISE)
    report = TrialReport(label)
    for trial in range(spec.trials):
        m = exp.test_masks[int(trial_rng.integers(len(exp.test_masks)))]
        for scene_id, x in enumerate(exp.test_scenes):
            if spec.eval_noise_std > 0:
                y = encode(x, m, cfg.d, noise_std=spec.eval_noise_std, rng=noise_rng)
            else:
                y = encode(x, m, cfg.d)
            xhat = reconstruct_scene(state.theta, y, m)
            report.add(scene_id, trial, psnr(xhat, x.values), ssim(xhat, x.values))
    return report


def write_summary(path, report):
    agg = report.aggregate()
    with open(path, "w", newline="") as f:
        f.write("scope,psnr_mean,psnr_std,ssim_mean,ssim_std,n\n")
        o = agg["overall"]
        f.write(
            f"overall,{o['psnr_mean']:.9f},{o['psnr_std']:.9f},"
            f"{o['ssim_mean']:.9f},{o['ssim_std']:.9f},{o['n']}\n"
        )
        for scene, s in agg["per_scene"].items():
            f.write(
                f"scene{scene},{s['psnr_mean']:.9f},{s['psnr_std']:.9f},"
                f"{s['ssim_mean']:.9f},{s['ssim_std']:.9f},{s['n']}\n"
            )


def _emit(out_dir, exp, state, report):
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", newline="") as f:
        f.write(run_config_text(exp.cfg, exp.spec))
    for i, m in enumerate(exp.train_masks):
        io.save_mask(os.path.join(out_dir, "masks", f"train_{i:02d}.msk"), m.values)
    for i, m in enumerate(exp.test_masks):
        io.save_mask(os.path.join(out_dir, "masks", f"test_{i:02d}.msk"), m.values)
    save_state(state, os.path.join(out_dir, "checkpoint.ckp"))
    io.write_loss_log_csv(os.path.join(out_dir, "loss_log.csv"), state.log)
    io.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), report.rows)
    write_summary(os.path.join(out_dir, "summary.csv"), report)


def run_config_text(cfg, spec):
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    d.update({f.name: getattr(spec, f.name) for f in fields(spec)})
    return io.format_config(d)


def run_scenario(cfg, spec, out_dir=None, mode="full", state=None, prior=None):
    """Build, train (unless a state is supplied), evaluate, emit, report."""
    exp = build_experiment(cfg, spec, prior=prior)
    if state is None:
        state = run_training(exp, mode=mode, prior=prior)
    report = evaluate(state, exp, f"{spec.kind}/{mode}")
    if out_dir is not None:
        _emit(out_dir, exp, state, report)
    return state, report


def run_ablation(kind, cfg, spec, out_dir=None, g0_values=(0.0, 0.1), priors=None):
    """Run one ablation family; returns {variant label: TrialReport}."""
    if kind not in _ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; one of {_ABLATIONS}")
    results = {}

    def _one(label, mode, fixed_g=0.0, prior=None):
        exp = build_experiment(cfg, spec, prior=prior)
        state = run_training(exp, mode=mode, fixed_g=fixed_g, prior=prior)
        report = evaluate(state, exp, label)
        if out_dir is not None:
            _emit(os.path.join(out_dir, label), exp, state, report)
        results[label] = report

    if kind == "no-gst":
        _one("no-gst", "no-gst")
    elif kind == "no-bilevel":
        _one("no-bilevel", "no-bilevel")
    elif kind == "fixed-variance":
        for g0 in g0_values:
            _one(f"fixed-variance-g{g0:g}", "fixed-variance", fixed_g=g0)
    else:
        if priors is None:
            priors = (
                NoisePrior(0.006, 0.005),
                NoisePrior(0.006, 0.1),
                NoisePrior(0.0, 1.0),
            )
        for p in priors:
            _one(f"prior-mu{p.mu:g}-sigma{p.sigma:g}", "full", prior=p)
    return results


def uncertainty_maps(state, exp, out_dir=None):
    """Mask-variation variance maps for each test scene.

    Reconstructs every test scene under every test mask and reports the
    per-pixel variance across masks.  Writes per-band PGM images, raw cube
    dumps of the variance and mean, and per-band stats when ``out_dir``
    is given.
    """
    theta = state.theta

    def model(y, m):
        return reconstruct_scene(theta, y, m)

    cfg = exp.cfg
    out = []
    for scene_id, x in enumerate(exp.test_scenes):
        var, mean = epistemic_map(model, x, list(exp.test_masks), cfg.d)
        out.append((var, mean))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            io.save_cube(os.path.join(out_dir, f"scene{scene_id}_variance.hsc"), var)
            io.save_cube(os.path.join(out_dir, f"scene{scene_id}_mean.hsc"), mean)
            for band in range(var.shape[2]):
                io.write_pgm(
                    os.path.join(out_dir, f"scene{scene_id}_var_band{band:02d}.pgm"),
                    var[:, :, band],
                )
            with open(
                os.path.join(out_dir, f"scene{scene_id}_stats.csv"), "w", newline=""
            ) as f:
                f.write("band,var_min,var_max,var_mean\n")
                for band in range(var.shape[2]):
                    vb = var[:, :, band]
                    f.write(
                        f"{band},{vb.min():.12g},{vb.max():.12g},{vb.mean():.12g}\n"
                    )
    return out


# -- gradient verification --------------------------------------------------

def run_gradient_suite(quick=False, h=1e-5):
    """Finite-difference checks of every op plus the full training chain.

    Returns (name, worst_rel_err, tolerance, ok) rows.  Inputs are drawn
    away from relu/clamp kinks, where a subgradient and a finite
    difference legitimately disagree.
    """
    from . import ndgrad as nd

    rows = []
    rng = np.random.default_rng(20240817)
    trials = 5 if quick else 20

    def check(name, make, tol):
        worst = 0.0
        for _ in range(trials):
            params, builder = make()
            worst = max(worst, grad_check(builder, params, h=h))
        rows.append((name, worst, tol, worst < tol))

    def away_from(vals, *kinks, margin=1e-3):
        out = vals
        for kk in kinks:
            near = np.abs(out - kk) < margin
            out = np.where(near, kk + margin * np.sign(out - kk + 0.5), out)
        return out

    def rnd(shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    shape = (3, 4)

    def unary(op, data_fn):
        def make():
            a = Tensor(data_fn())
            return [a], lambda ps: tsum(op(ps[0]))

        return make

    check("add", lambda: (
        [Tensor(rnd(shape)), Tensor(rnd(shape))],
        lambda ps: tsum(nd.add(ps[0], ps[1])),
    ), 1e-6)
    check("add-scalar", lambda: (
        [Tensor(rnd(shape)), Tensor(rnd(()))],
        lambda ps: tsum(nd.add(ps[0], ps[1])),
    ), 1e-6)
    check("mul", lambda: (
        [Tensor(rnd(shape)), Tensor(rnd(shape))],
        lambda ps: tsum(nd.mul(ps[0], ps[1])),
    ), 1e-6)
    check("neg", unary(nd.neg, lambda: rnd(shape)), 1e-6)
    check("relu", unary(nd.relu, lambda: away_from(rnd(shape), 0.0)), 1e-6)
    check("sigmoid", unary(nd.sigmoid, lambda: rnd(shape, -4, 4)), 1e-6)
    check("softplus", unary(nd.softplus, lambda: rnd(shape, -4, 4)), 1e-6)
    check("log", unary(nd.log, lambda: rnd(shape, 0.1, 3.0)), 1e-6)
    check("clamp01", unary(
        nd.clamp01, lambda: away_from(rng.uniform(-0.5, 1.5, shape), 0.0, 1.0)
    ), 1e-6)
    check("matmul", lambda: (
        [Tensor(rnd((3, 4))), Tensor(rnd((4, 2)))],
        lambda ps: tsum(nd.matmul(ps[0], ps[1])),
    ), 1e-6)
    check("conv2d", lambda: (
        [Tensor(rnd((2, 5, 5))), Tensor(rnd((3, 2, 3, 3), -0.5, 0.5)),
         Tensor(rnd((3,)))],
        lambda ps: tsum(nd.conv2d(ps[0], ps[1], ps[2])),
    ), 1e-6)
    check("sum", unary(nd.tsum, lambda: rnd(shape)), 1e-6)
    check("mean", unary(nd.tmean, lambda: rnd(shape)), 1e-6)
    check("reshape", lambda: (
        [Tensor(rnd((2, 6)))],
        lambda ps: tsum(nd.mul(nd.reshape(ps[0], (3, 4)), nd.reshape(ps[0], (3, 4)))),
    ), 1e-6)
    check("transpose", lambda: (
        [Tensor(rnd((3, 4)))],
        lambda ps: tsum(nd.matmul(nd.transpose(ps[0]), ps[0])),
    ), 1e-6)
    check("stack", lambda: (
        [Tensor(rnd(shape)), Tensor(rnd(shape))],
        lambda ps: tmean(nd.mul(nd.stack(ps), nd.stack(ps))),
    ), 1e-6)

    rows.append(_end_to_end_check(h))
    return rows


def _end_to_end_check(h=1e-5):
    """FD check of the whole loss chain on a 4x4x2 instance."""
    cfg = TrainConfig(
        bands=2, d=1, backbone_channels=4, backbone_blocks=1,
        gst_channels=4, gst_proj_channels=2, batch=2, beta=1e-3,
    )
    rng = np.random.default_rng(7)
    scenes = gen_synth_scenes(2, 4, 4, 2, rng)
    mask = Mask((rng.random((4, 4)) < 0.5).astype(float) * 0.9 + 0.05)
    theta = srn_init(cfg.bands, cfg.backbone_channels, cfg.backbone_blocks,
                     np.random.default_rng(11))
    phi = gst_init(cfg.gst_channels, cfg.gst_proj_channels, np.random.default_rng(12))
    eps_list = [rng.standard_normal(mask.values.shape) * 0.3 for _ in scenes]
    params = [t for _, t in theta.parameters()] + [t for _, t in phi.parameters()]

    def builder(_ps):
        total, _recon, _ent = total_loss(
            theta, phi, scenes, mask, cfg, eps_list=eps_list
        )
        return total

    worst = grad_check(builder, params, h=h)
    return ("end-to-end", worst, 1e-4, worst < 1e-4)
