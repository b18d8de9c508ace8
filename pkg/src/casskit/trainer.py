"""Training loops for the reconstruction network and the mask-deviation model.

Three regimes share one Monte-Carlo reconstruction loss:

* ``pretrain`` warms up the reconstruction weights theta alone.
* ``bilevel_train`` alternates rounds: a few epochs updating theta on the
  training scenes (deviation map treated as constant), then a few epochs
  updating the deviation network phi on held-out validation scenes using
  the reconstruction loss plus a weighted mask-entropy term.
* ``baseline_train`` is plain mask-ensemble training without phi, with an
  optional constant perturbation spread for controls.

Each loss sample redraws the mask: m' = clamp01(m + g * eps), re-encodes
the scene through m', and reconstructs from the windowed initialization,
so gradients reach phi through both the measurement and the conditioning.

Every random draw comes from a role-named generator stream (data order,
mask choice, eps, measurement noise), so runs are reproducible and a
checkpoint can capture the exact position of every stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import io
from .backbone import SrnParams, reconstruct, srn_init
from .gstnet import GstParams, gst_forward, gst_init
from .maskmodel import entropy_term, sample_perturbed
from .ndgrad import Tensor, add, backward, mul, neg, tmean, tsum
from .optics import (
    HsiCube,
    Mask,
    Measurement,
    cube_to_chw,
    chw_to_cube,
    encode,
    encode_tape,
    init_input,
    init_input_tape,
)

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "Adam",
    "lr_schedule",
    "DataItem",
    "Dataset",
    "make_dataset",
    "recon_loss",
    "total_loss",
    "TrainState",
    "make_state",
    "pretrain",
    "bilevel_train",
    "baseline_train",
    "reconstruct_scene",
    "save_state",
    "load_state",
    "config_text",
]

_RNG_ROLES = ("init_theta", "init_phi", "order", "mask", "eps", "noise")


class TrainingDiverged(RuntimeError):
    """A gradient went NaN; the offending parameter is named in the message."""


@dataclass
class TrainConfig:
    """Everything the training loops read; flat so it maps 1:1 to config files."""

    # data / optics
    bands: int = 4
    d: int = 2
    noise_mode: str = "none"  # none | fixed | uniform
    noise_std: float = 0.0
    noise_max: float = 0.05
    # mask fabrication prior and perturbation draw
    prior_mu: float = 0.006
    prior_sigma: float = 0.005
    eps_mean: float = 0.0
    eps_std: float = 1.0
    # networks
    backbone_channels: int = 16
    backbone_blocks: int = 4
    gst_channels: int = 8
    gst_proj_channels: int = 4
    # optimization
    alpha0: float = 4e-4  # pretrain lr
    alpha1: float = 4e-4  # lower-level (theta) lr
    alpha2: float = 1e-5  # upper-level (phi) lr
    t_init: int = 20
    t_trn: int = 5
    t_val: int = 3
    rounds: int = 20
    batch: int = 4
    beta: float = 1e-3
    lr_halve_period: int = 50
    loss_scale: str = "mean"  # mean | paper (dataset-size / batch prefactor, sum over pixels)
    entropy_flip: bool = False  # subtract the entropy term instead of adding it
    pretrain_perturb: bool = True  # perturb masks during pretraining too
    perturb_encode: bool = True  # re-encode measurements through the perturbed mask
    seed: int = 0

    def validate(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.d < 0:
            raise ValueError(f"dispersion step must be >= 0, got {self.d}")
        if self.noise_mode not in ("none", "fixed", "uniform"):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")
        if self.noise_std < 0 or self.noise_max < 0:
            raise ValueError("noise levels must be >= 0")
        if self.prior_sigma < 0 or self.eps_std < 0:
            raise ValueError("spreads must be >= 0")
        if min(self.backbone_channels, self.gst_channels, self.gst_proj_channels) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.backbone_blocks < 0:
            raise ValueError("backbone_blocks must be >= 0")
        for name in ("alpha0", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if min(self.t_init, self.t_trn, self.t_val, self.rounds) < 0:
            raise ValueError("epoch and round counts must be >= 0")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.lr_halve_period < 1:
            raise ValueError(f"lr_halve_period must be >= 1, got {self.lr_halve_period}")
        if self.loss_scale not in ("mean", "paper"):
            raise ValueError(f"unknown loss_scale {self.loss_scale!r}")
        return self


def config_text(cfg):
    """Render a config as sorted key=value lines (the config-file format)."""
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return io.format_config(d)


def lr_schedule(base, epoch, period=50):
    """Halve the base rate once per ``period`` completed epochs."""
    if period < 1:
        raise ValueError(f"schedule period must be >= 1, got {period}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * 0.5 ** (epoch // period)


class Adam(object):
    """Adam over named parameter tensors; reads grads in place."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.named}
        self.v = {n: np.zeros_like(t.data) for n, t in self.named}

    def zero_grad(self):
        for _, t in self.named:
            t.grad[...] = 0.0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for n, t in self.named:
            g = t.grad
            if np.any(np.isnan(g)):
                raise TrainingDiverged(f"NaN gradient in {n!r} at optimizer step {self.t}")
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class DataItem:
    x: HsiCube
    y: Measurement
    mask_id: int


@dataclass(frozen=True)
class Dataset:
    """Scene/measurement pairs with the id of the mask that encoded each."""

    items: tuple
    split: str

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self):
        return len(self.items)

    def scenes(self):
        return [it.x for it in self.items]

    def validate(self, masks, tol=1e-9):
        """Noiseless datasets must re-encode exactly (to tol) from (x, mask)."""
        for i, it in enumerate(self.items):
            y2 = encode(it.x, masks[it.mask_id], it.y.step)
            err = float(np.max(np.abs(y2.values - it.y.values)))
            if err > tol:
                raise ValueError(
                    f"item {i} of {self.split!r} dataset does not re-encode: "
                    f"max abs error {err:.3g} > {tol:.3g}"
                )
        return self


def make_dataset(scenes, masks, cfg, rng, split):
    """Pair each scene with a mask drawn from ``masks`` and encode it."""
    items = []
    for x in scenes:
        mid = int(rng.integers(len(masks)))
        if cfg.noise_mode == "none":
            y = encode(x, masks[mid], cfg.d)
        elif cfg.noise_mode == "fixed":
            y = encode(x, masks[mid], cfg.d, noise_std=cfg.noise_std, rng=rng)
        else:
            std = rng.uniform(0.0, cfg.noise_max)
            y = encode(x, masks[mid], cfg.d, noise_std=std, rng=rng)
        items.append(DataItem(x, y, mid))
    return Dataset(tuple(items), split)


def _scene_values(x):
    return x.values if isinstance(x, HsiCube) else np.asarray(x, dtype=np.float64)


def _mask_values(m):
    return m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)


def recon_loss(
    theta,
    phi,
    batch,
    mask,
    cfg,
    rng=None,
    *,
    g=None,
    detach_gst=False,
    eps_list=None,
    noise_fields=None,
    n_total=None,
):
    """Monte-Carlo reconstruction loss over one batch and one mask.

    When ``phi`` is given (or ``g`` directly), each sample gets its own
    perturbed mask; otherwise the raw mask is used.  ``detach_gst`` cuts
    the deviation map off the tape so only theta receives gradients, a
    cheap way to freeze phi during lower-level epochs.  ``eps_list`` and
    ``noise_fields`` override the random draws (tests, resumable loops).
    Returns (loss, g); the default scaling is the mean over batch and
    pixels, ``loss_scale="paper"`` uses the dataset-size / batch-size
    prefactor on per-sample sums, with ``n_total`` the dataset size.
    """
    scenes = [_scene_values(x) for x in batch]
    if not scenes:
        raise ValueError("empty batch")
    mv = _mask_values(mask)
    if g is None and phi is not None:
        g = gst_forward(mv, phi)
    if g is not None and detach_gst and isinstance(g, Tensor):
        g = Tensor(g.data)
    terms = []
    for i, xv in enumerate(scenes):
        bands = xv.shape[2]
        if g is not None:
            if eps_list is not None:
                eps = eps_list[i]
            else:
                if rng is None:
                    raise ValueError("perturbed loss needs eps_list or an rng")
                eps = cfg.eps_mean + cfg.eps_std * rng.standard_normal(mv.shape)
            m_t = sample_perturbed(mv, g, eps=eps)
        else:
            m_t = Tensor(mv)
        enc_mask = m_t if (g is not None and cfg.perturb_encode) else Tensor(mv)
        y = encode_tape(xv, enc_mask, cfg.d)
        if noise_fields is not None and noise_fields[i] is not None:
            y = add(y, Tensor(noise_fields[i]))
        x_in = init_input_tape(y, m_t, cfg.d, bands)
        xhat = reconstruct(x_in, theta)
        diff = add(xhat, neg(Tensor(cube_to_chw(xv))))
        sq = mul(diff, diff)
        terms.append(tsum(sq) if cfg.loss_scale == "paper" else tmean(sq))
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    nb = len(scenes)
    if cfg.loss_scale == "paper":
        scale = float(nb if n_total is None else n_total) / nb
    else:
        scale = 1.0 / nb
    return mul(acc, scale), g


def total_loss(theta, phi, batch, mask, cfg, rng=None, *, eps_list=None,
               noise_fields=None, n_total=None):
    """Reconstruction loss plus beta-weighted mask entropy.

    Returns (total, recon, mean_entropy_float).  With beta == 0 the total
    IS the recon loss object, so the two are bit-identical.
    """
    loss, g = recon_loss(
        theta, phi, batch, mask, cfg, rng,
        eps_list=eps_list, noise_fields=noise_fields, n_total=n_total,
    )
    if g is None:
        return loss, loss, None
    ent_value = entropy_term(g.data if isinstance(g, Tensor) else g)
    if cfg.beta == 0.0:
        return loss, loss, ent_value
    ent = entropy_term(g)
    weight = -cfg.beta if cfg.entropy_flip else cfg.beta
    return add(loss, mul(ent, weight)), loss, ent_value


@dataclass
class TrainState:
    """Everything a run needs to continue: params, optimizers, streams, counters."""

    cfg: TrainConfig
    theta: SrnParams
    phi: GstParams | None
    adam_theta: Adam
    adam_phi: Adam | None
    rngs: dict
    epoch: int = 0
    round: int = 0
    log: list = field(default_factory=list)


def make_state(cfg, with_gst=True):
    """Fresh parameters and optimizer/stream state from ``cfg.seed``."""
    cfg.validate()
    kids = np.random.SeedSequence(cfg.seed).spawn(len(_RNG_ROLES))
    rngs = {role: np.random.default_rng(k) for role, k in zip(_RNG_ROLES, kids)}
    theta = srn_init(
        cfg.bands, cfg.backbone_channels, cfg.backbone_blocks, rngs["init_theta"]
    )
    phi = (
        gst_init(cfg.gst_channels, cfg.gst_proj_channels, rngs["init_phi"])
        if with_gst
        else None
    )
    adam_theta = Adam(theta.parameters())
    adam_phi = Adam(phi.parameters()) if phi is not None else None
    return TrainState(cfg, theta, phi, adam_theta, adam_phi, rngs)


def _batches(scenes, batch, rng):
    idx = rng.permutation(len(scenes))
    for s in range(0, len(idx), batch):
        yield [scenes[int(i)] for i in idx[s : s + batch]]


def _draw_noise_fields(cfg, scenes, rng):
    if cfg.noise_mode == "none":
        return None
    fields_ = []
    for xv in scenes:
        h, w, bands = _scene_values(xv).shape
        wy = w + cfg.d * (bands - 1)
        std = cfg.noise_std if cfg.noise_mode == "fixed" else rng.uniform(0.0, cfg.noise_max)
        fields_.append(rng.normal(0.0, std, size=(h, wy)))
    return fields_


def _pick_mask(masks, rng):
    return masks[int(rng.integers(len(masks)))]


def pretrain(state, train_scenes, masks):
    """Warm up theta for ``t_init`` epochs on the training scenes."""
    cfg = state.cfg
    scenes = list(train_scenes)
    for _ in range(cfg.t_init):
        lr = lr_schedule(cfg.alpha0, state.epoch, cfg.lr_halve_period)
        tot = 0.0
        nb = 0
        for batch in _batches(scenes, cfg.batch, state.rngs["order"]):
            m = _pick_mask(masks, state.rngs["mask"])
            phi = state.phi if cfg.pretrain_perturb else None
            noise = _draw_noise_fields(cfg, batch, state.rngs["noise"])
            loss, _ = recon_loss(
                state.theta, phi, batch, m, cfg, state.rngs["eps"],
                detach_gst=True, noise_fields=noise, n_total=len(scenes),
            )
            backward(loss)
            state.adam_theta.step(lr)
            state.adam_theta.zero_grad()
            tot += float(loss.data)
            nb += 1
        state.epoch += 1
        state.log.append(
            {"phase": "pretrain", "round": -1, "epoch": state.epoch,
             "loss": tot / max(nb, 1), "entropy": None}
        )
    return state


def bilevel_train(state, train_scenes, val_scenes, masks):
    """Alternate theta epochs on train scenes with phi epochs on val scenes.

    Runs rounds ``state.round`` .. ``cfg.rounds``; a state loaded from a
    checkpoint picks up exactly where it stopped.  phi is bitwise frozen
    during theta epochs and vice versa.
    """
    cfg = state.cfg
    if state.phi is None:
        raise ValueError("bilevel training needs the deviation network")
    trn = list(train_scenes)
    val = list(val_scenes)
    while state.round < cfg.rounds:
        r = state.round
        for _ in range(cfg.t_trn):
            lr = lr_schedule(cfg.alpha1, state.epoch, cfg.lr_halve_period)
            tot = 0.0
            nb = 0
            for batch in _batches(trn, cfg.batch, state.rngs["order"]):
                m = _pick_mask(masks, state.rngs["mask"])
                noise = _draw_noise_fields(cfg, batch, state.rngs["noise"])
                loss, _ = recon_loss(
                    state.theta, state.phi, batch, m, cfg, state.rngs["eps"],
                    detach_gst=True, noise_fields=noise, n_total=len(trn),
                )
                backward(loss)
                state.adam_theta.step(lr)
                state.adam_theta.zero_grad()
                tot += float(loss.data)
                nb += 1
            state.epoch += 1
            state.log.append(
                {"phase": "train", "round": r, "epoch": state.epoch,
                 "loss": tot / max(nb, 1), "entropy": None}
            )
        for _ in range(cfg.t_val):
            lr = lr_schedule(cfg.alpha2, state.epoch, cfg.lr_halve_period)
            tot = 0.0
            ent_tot = 0.0
            nb = 0
            for batch in _batches(val, cfg.batch, state.rngs["order"]):
                m = _pick_mask(masks, state.rngs["mask"])
                noise = _draw_noise_fields(cfg, batch, state.rngs["noise"])
                total, _recon, ent = total_loss(
                    state.theta, state.phi, batch, m, cfg, state.rngs["eps"],
                    noise_fields=noise, n_total=len(val),
                )
                backward(total)
                state.adam_phi.step(lr)
                state.adam_phi.zero_grad()
                # theta picked up gradients through the shared graph; drop them
                state.adam_theta.zero_grad()
                tot += float(total.data)
                ent_tot += float(ent)
                nb += 1
            state.epoch += 1
            state.log.append(
                {"phase": "val", "round": r, "epoch": state.epoch,
                 "loss": tot / max(nb, 1), "entropy": ent_tot / max(nb, 1)}
            )
        state.round += 1
    return state


def baseline_train(state, train_scenes, masks, epochs, fixed_g=None):
    """Plain mask-ensemble training of theta (no deviation network).

    ``fixed_g`` perturbs masks with a constant per-pixel std instead of a
    learned one; 0 reproduces the unperturbed baseline bit for bit
    because the eps stream is separate from the order/mask streams.
    """
    cfg = state.cfg
    scenes = list(train_scenes)
    for _ in range(epochs):
        lr = lr_schedule(cfg.alpha1, state.epoch, cfg.lr_halve_period)
        tot = 0.0
        nb = 0
        for batch in _batches(scenes, cfg.batch, state.rngs["order"]):
            m = _pick_mask(masks, state.rngs["mask"])
            noise = _draw_noise_fields(cfg, batch, state.rngs["noise"])
            g = None
            if fixed_g is not None:
                g = Tensor(np.broadcast_to(
                    np.asarray(fixed_g, dtype=np.float64), _mask_values(m).shape
                ).copy())
            loss, _ = recon_loss(
                state.theta, None, batch, m, cfg, state.rngs["eps"],
                g=g, noise_fields=noise, n_total=len(scenes),
            )
            backward(loss)
            state.adam_theta.step(lr)
            state.adam_theta.zero_grad()
            tot += float(loss.data)
            nb += 1
        state.epoch += 1
        state.log.append(
            {"phase": "baseline", "round": -1, "epoch": state.epoch,
             "loss": tot / max(nb, 1), "entropy": None}
        )
    return state


def reconstruct_scene(theta, y, m):
    """Measurement + mask -> reconstructed cube (H x W x bands array)."""
    x_in = init_input(y, m)
    xhat = reconstruct(Tensor(cube_to_chw(x_in)), theta)
    return chw_to_cube(xhat.data)


# -- checkpoint plumbing ----------------------------------------------------

def _adam_blobs(prefix, adam, blobs):
    blobs[f"{prefix}/t"] = json.dumps(adam.t)
    for n, _ in adam.named:
        blobs[f"{prefix}/m/{n}"] = adam.m[n]
        blobs[f"{prefix}/v/{n}"] = adam.v[n]


def _adam_restore(prefix, adam, blobs):
    adam.t = int(json.loads(blobs[f"{prefix}/t"]))
    for n, _ in adam.named:
        adam.m[n] = np.array(blobs[f"{prefix}/m/{n}"])
        adam.v[n] = np.array(blobs[f"{prefix}/v/{n}"])


def state_blobs(state):
    """Flatten a TrainState into named arrays/strings for the checkpoint file."""
    blobs = {"meta/config": config_text(state.cfg)}
    blobs["meta/counters"] = json.dumps({"epoch": state.epoch, "round": state.round})
    blobs["meta/log"] = json.dumps(state.log)
    for role, gen in state.rngs.items():
        blobs[f"meta/rng/{role}"] = json.dumps(gen.bit_generator.state)
    for n, t in state.theta.parameters():
        blobs[f"theta/{n}"] = t.data
    _adam_blobs("opt_theta", state.adam_theta, blobs)
    if state.phi is not None:
        for n, t in state.phi.parameters():
            blobs[f"phi/{n}"] = t.data
        _adam_blobs("opt_phi", state.adam_phi, blobs)
    return blobs


def state_from_blobs(blobs):
    """Rebuild a TrainState; inverse of :func:`state_blobs`."""
    cfg_items = io.parse_config(blobs["meta/config"])
    cfg = io.coerce_dataclass(cfg_items, TrainConfig)
    with_gst = any(k.startswith("phi/") for k in blobs)
    state = make_state(cfg, with_gst=with_gst)
    counters = json.loads(blobs["meta/counters"])
    state.epoch = int(counters["epoch"])
    state.round = int(counters["round"])
    state.log = json.loads(blobs["meta/log"])
    for role, gen in state.rngs.items():
        gen.bit_generator.state = json.loads(blobs[f"meta/rng/{role}"])
    for n, t in state.theta.parameters():
        arr = blobs[f"theta/{n}"]
        if arr.shape != t.data.shape:
            raise ValueError(f"checkpoint theta/{n} has shape {arr.shape}, "
                             f"expected {t.data.shape}")
        t.data[...] = arr
    _adam_restore("opt_theta", state.adam_theta, blobs)
    if with_gst:
        for n, t in state.phi.parameters():
            arr = blobs[f"phi/{n}"]
            if arr.shape != t.data.shape:
                raise ValueError(f"checkpoint phi/{n} has shape {arr.shape}, "
                                 f"expected {t.data.shape}")
            t.data[...] = arr
        _adam_restore("opt_phi", state.adam_phi, blobs)
    return state


def save_state(state, path):
    io.save_checkpoint(path, state_blobs(state))


def load_state(path):
    return state_from_blobs(io.load_checkpoint(path))
