"""Losses, optimizer, schedules, the alternating loop, and checkpoints.

Adam is checked against a two-step hand computation; the losses against
scale identities that must hold exactly; the loop against its freezing
and determinism contracts, which are all bitwise.
"""

import dataclasses
import math

import numpy as np
import pytest

from casskit.gstnet import gst_forward
from casskit.maskmodel import entropy_term
from casskit.ndgrad import Tensor, backward
from casskit.optics import Mask
from casskit.trainer import (
    Adam,
    Dataset,
    TrainConfig,
    TrainingDiverged,
    baseline_train,
    bilevel_train,
    config_text,
    load_state,
    lr_schedule,
    make_dataset,
    make_state,
    pretrain,
    recon_loss,
    reconstruct_scene,
    save_state,
    state_blobs,
    state_from_blobs,
    total_loss,
)

RNG = np.random.default_rng(2023)


def tiny_cfg(**kw):
    base = dict(
        bands=2, d=1, backbone_channels=4, backbone_blocks=1,
        gst_channels=4, gst_proj_channels=2, batch=2,
        t_init=1, t_trn=1, t_val=1, rounds=1, seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_problem(cfg, n_scenes=4, n_masks=2, seed=0):
    rng = np.random.default_rng(seed)
    scenes = [rng.random((6, 6, cfg.bands)) for _ in range(n_scenes)]
    masks = [Mask((rng.random((6, 6)) < 0.5).astype(float)) for _ in range(n_masks)]
    return scenes, masks


# -- schedule ---------------------------------------------------------------

def test_lr_schedule_halving_points():
    assert lr_schedule(4e-4, 0) == 4e-4
    assert lr_schedule(4e-4, 49) == 4e-4
    assert lr_schedule(4e-4, 50) == 2e-4
    assert lr_schedule(4e-4, 99) == 2e-4
    assert lr_schedule(4e-4, 149) == 1e-4
    assert lr_schedule(4e-4, 150) == 5e-5
    assert lr_schedule(1.0, 10, period=5) == 0.25


def test_lr_schedule_argument_errors():
    with pytest.raises(ValueError):
        lr_schedule(1.0, -1)
    with pytest.raises(ValueError):
        lr_schedule(1.0, 0, period=0)


def test_default_schedule_constants():
    cfg = TrainConfig()
    assert (cfg.alpha0, cfg.alpha1, cfg.alpha2) == (4e-4, 4e-4, 1e-5)
    assert (cfg.t_init, cfg.t_trn, cfg.t_val) == (20, 5, 3)
    assert cfg.lr_halve_period == 50
    assert cfg.rounds == 20
    assert (cfg.prior_mu, cfg.prior_sigma) == (0.006, 0.005)
    assert cfg.beta == 1e-3


# -- optimizer --------------------------------------------------------------

def adam_reference(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam, one scalar parameter, bias-corrected."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
    return x


def test_adam_matches_reference_two_steps():
    p = Tensor(np.array([1.0]))
    opt = Adam([("p", p)])
    grads = [0.3, -0.7]
    for g in grads:
        p.grad[...] = g
        opt.step(1e-2)
        opt.zero_grad()
    want = adam_reference(1.0, grads, 1e-2)
    assert p.data[0] == pytest.approx(want, abs=1e-15)
    assert opt.t == 2


def test_adam_zero_lr_is_bitwise_noop_on_params():
    p = Tensor(RNG.random(4))
    before = p.data.copy()
    opt = Adam([("p", p)])
    p.grad[...] = 1.0
    opt.step(0.0)
    assert np.array_equal(p.data, before)


def test_adam_nan_gradient_diverges():
    p = Tensor(np.array([1.0]))
    opt = Adam([("p", p)])
    p.grad[...] = np.nan
    with pytest.raises(TrainingDiverged):
        opt.step(1e-3)


# -- losses -----------------------------------------------------------------

def test_recon_loss_zero_for_perfect_model():
    # theta = zeros reconstructs zeros; zero scenes give exactly zero loss
    cfg = tiny_cfg()
    state = make_state(cfg)
    for _, t in state.theta.parameters():
        t.data[...] = 0.0
    scenes = [np.zeros((6, 6, cfg.bands))]
    mask = Mask(np.ones((6, 6)))
    loss, g = recon_loss(state.theta, None, scenes, mask, cfg)
    assert float(loss.data) == 0.0
    assert g is None


def test_recon_loss_batch_duplication_invariance():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    loss1, _ = recon_loss(state.theta, state.phi, scenes[:2], masks[0], cfg,
                          eps_list=eps)
    loss2, _ = recon_loss(state.theta, state.phi, scenes[:2] * 3, masks[0], cfg,
                          eps_list=eps * 3)
    assert float(loss2.data) == pytest.approx(float(loss1.data), rel=1e-12)


def test_recon_loss_scale_flag_relation():
    # per-pixel mean vs dataset-size prefactor on per-sample sums:
    # same-shape samples differ exactly by n_total * pixel count
    cfg_mean = tiny_cfg()
    cfg_paper = tiny_cfg(loss_scale="paper")
    state = make_state(cfg_mean)
    scenes, masks = tiny_problem(cfg_mean)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    lm, _ = recon_loss(state.theta, state.phi, scenes[:2], masks[0], cfg_mean,
                       eps_list=eps)
    lp, _ = recon_loss(state.theta, state.phi, scenes[:2], masks[0], cfg_paper,
                       eps_list=eps, n_total=10)
    pixels = 6 * 6 * cfg_mean.bands
    assert float(lp.data) == pytest.approx(10 * pixels * float(lm.data), rel=1e-12)


def test_recon_loss_detach_keeps_phi_gradient_free():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    loss, _ = recon_loss(state.theta, state.phi, scenes[:2], masks[0], cfg,
                         eps_list=eps, detach_gst=True)
    backward(loss)
    assert all(np.all(t.grad == 0.0) for _, t in state.phi.parameters())
    assert any(np.any(t.grad != 0.0) for _, t in state.theta.parameters())


def test_recon_loss_attached_reaches_phi():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) * 0.5 for _ in range(2)]
    loss, _ = recon_loss(state.theta, state.phi, scenes[:2], masks[0], cfg,
                         eps_list=eps)
    backward(loss)
    assert any(np.any(t.grad != 0.0) for _, t in state.phi.parameters())


def test_recon_loss_needs_eps_or_rng_and_nonempty_batch():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    with pytest.raises(ValueError):
        recon_loss(state.theta, state.phi, scenes[:1], masks[0], cfg)
    with pytest.raises(ValueError):
        recon_loss(state.theta, None, [], masks[0], cfg)


def test_total_loss_beta_zero_is_recon_object():
    cfg = tiny_cfg(beta=0.0)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    total, recon, ent = total_loss(state.theta, state.phi, scenes[:2], masks[0],
                                   cfg, eps_list=eps)
    assert total is recon
    assert ent is not None  # still reported for the log


def test_total_loss_adds_weighted_entropy():
    cfg = tiny_cfg(beta=1e-2)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    total, recon, ent = total_loss(state.theta, state.phi, scenes[:2], masks[0],
                                   cfg, eps_list=eps)
    g = gst_forward(masks[0].values, state.phi)
    assert ent == pytest.approx(entropy_term(g.data), abs=1e-15)
    assert float(total.data) == pytest.approx(
        float(recon.data) + 1e-2 * ent, rel=1e-12
    )
    flip = dataclasses.replace(cfg, entropy_flip=True)
    total_f, recon_f, _ = total_loss(state.theta, state.phi, scenes[:2], masks[0],
                                     flip, eps_list=eps)
    assert float(total_f.data) == pytest.approx(
        float(recon_f.data) - 1e-2 * ent, rel=1e-12
    )


def test_total_loss_without_gst_returns_no_entropy():
    cfg = tiny_cfg()
    state = make_state(cfg, with_gst=False)
    scenes, masks = tiny_problem(cfg)
    total, recon, ent = total_loss(state.theta, None, scenes[:2], masks[0], cfg)
    assert total is recon and ent is None


# -- dataset ----------------------------------------------------------------

def test_make_dataset_reencodes_exactly_when_noiseless():
    cfg = tiny_cfg()
    scenes, masks = tiny_problem(cfg)
    from casskit.maskmodel import MaskSet

    mset = MaskSet(tuple(masks), "train")
    from casskit.optics import HsiCube

    cubes = [HsiCube(s) for s in scenes]
    ds = make_dataset(cubes, mset, cfg, np.random.default_rng(0), "train")
    assert len(ds) == len(scenes)
    ds.validate(mset)  # must not raise


def test_dataset_validate_catches_corruption():
    cfg = tiny_cfg()
    scenes, masks = tiny_problem(cfg)
    from casskit.maskmodel import MaskSet
    from casskit.optics import HsiCube, Measurement

    mset = MaskSet(tuple(masks), "train")
    cubes = [HsiCube(s) for s in scenes]
    ds = make_dataset(cubes, mset, cfg, np.random.default_rng(0), "train")
    bad = ds.items[0]
    tampered = Measurement(bad.y.values + 0.5, bad.y.step, bad.y.width, bad.y.bands)
    ds2 = Dataset((dataclasses.replace(bad, y=tampered),) + ds.items[1:], "train")
    with pytest.raises(ValueError):
        ds2.validate(mset)


def test_make_dataset_noise_modes_differ():
    cfg_f = tiny_cfg(noise_mode="fixed", noise_std=0.05)
    scenes, masks = tiny_problem(cfg_f)
    from casskit.maskmodel import MaskSet
    from casskit.optics import HsiCube

    mset = MaskSet(tuple(masks), "train")
    cubes = [HsiCube(s) for s in scenes]
    noisy = make_dataset(cubes, mset, cfg_f, np.random.default_rng(0), "train")
    clean = make_dataset(cubes, mset, tiny_cfg(), np.random.default_rng(0), "train")
    pairs = [
        (a, b) for a, b in zip(noisy.items, clean.items) if a.mask_id == b.mask_id
    ]
    assert pairs and all(
        not np.array_equal(a.y.values, b.y.values) for a, b in pairs
    )


# -- state, determinism, freezing -------------------------------------------

def test_make_state_deterministic_per_seed():
    a = make_state(tiny_cfg(seed=3))
    b = make_state(tiny_cfg(seed=3))
    c = make_state(tiny_cfg(seed=4))
    for (na, ta), (_, tb) in zip(a.theta.parameters(), b.theta.parameters()):
        assert np.array_equal(ta.data, tb.data), na
    assert any(
        not np.array_equal(ta.data, tc.data)
        for (_, ta), (_, tc) in zip(a.theta.parameters(), c.theta.parameters())
    )
    # theta and phi draw from separate streams: same-seed phi also matches
    for (_, ta), (_, tb) in zip(a.phi.parameters(), b.phi.parameters()):
        assert np.array_equal(ta.data, tb.data)


def test_pretrain_updates_theta_keeps_phi_bitwise():
    cfg = tiny_cfg(t_init=2)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    theta_before = [t.data.copy() for _, t in state.theta.parameters()]
    phi_before = [t.data.copy() for _, t in state.phi.parameters()]
    pretrain(state, scenes, masks)
    assert any(
        not np.array_equal(a, t.data)
        for a, (_, t) in zip(theta_before, state.theta.parameters())
    )
    for a, (_, t) in zip(phi_before, state.phi.parameters()):
        assert np.array_equal(a, t.data)
    assert state.epoch == 2
    assert [row["phase"] for row in state.log] == ["pretrain", "pretrain"]


def test_bilevel_phase_freezing_and_log_shape():
    cfg = tiny_cfg(t_trn=2, t_val=2, rounds=2)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg, n_scenes=4)
    bilevel_train(state, scenes[:2], scenes[2:], masks)
    phases = [row["phase"] for row in state.log]
    assert phases == ["train", "train", "val", "val"] * 2
    rounds = [row["round"] for row in state.log]
    assert rounds == [0, 0, 0, 0, 1, 1, 1, 1]
    assert state.epoch == 8
    assert all(
        row["entropy"] is not None for row in state.log if row["phase"] == "val"
    )
    assert all(row["entropy"] is None for row in state.log if row["phase"] == "train")


def test_alpha2_zero_freezes_phi_exactly():
    cfg = tiny_cfg(alpha2=0.0, rounds=2)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg, n_scenes=4)
    phi_before = [t.data.copy() for _, t in state.phi.parameters()]
    bilevel_train(state, scenes[:2], scenes[2:], masks)
    for a, (_, t) in zip(phi_before, state.phi.parameters()):
        assert np.array_equal(a, t.data)


def test_theta_frozen_during_phi_steps():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    eps = [RNG.standard_normal((6, 6)) for _ in range(2)]
    total, _, _ = total_loss(state.theta, state.phi, scenes[:2], masks[0], cfg,
                             eps_list=eps)
    backward(total)
    theta_before = [t.data.copy() for _, t in state.theta.parameters()]
    state.adam_phi.step(1e-3)
    for a, (_, t) in zip(theta_before, state.theta.parameters()):
        assert np.array_equal(a, t.data)


def test_same_seed_same_trajectory():
    cfg = tiny_cfg(rounds=2)
    scenes, masks = tiny_problem(cfg, n_scenes=4)

    def run():
        state = make_state(cfg)
        pretrain(state, scenes[:2], masks)
        bilevel_train(state, scenes[:2], scenes[2:], masks)
        return state

    a, b = run(), run()
    for (na, ta), (_, tb) in zip(a.theta.parameters(), b.theta.parameters()):
        assert np.array_equal(ta.data, tb.data), na
    for (na, ta), (_, tb) in zip(a.phi.parameters(), b.phi.parameters()):
        assert np.array_equal(ta.data, tb.data), na
    assert a.log == b.log


def test_baseline_fixed_g_zero_matches_plain_bitwise():
    cfg = tiny_cfg()
    scenes, masks = tiny_problem(cfg)

    def run(fixed_g):
        state = make_state(cfg, with_gst=False)
        baseline_train(state, scenes, masks, epochs=2, fixed_g=fixed_g)
        return state

    plain, zeroed = run(None), run(0.0)
    for (n, tp), (_, tz) in zip(plain.theta.parameters(), zeroed.theta.parameters()):
        assert np.array_equal(tp.data, tz.data), n


def test_baseline_fixed_g_positive_differs():
    cfg = tiny_cfg()
    scenes, masks = tiny_problem(cfg)

    def run(fixed_g):
        state = make_state(cfg, with_gst=False)
        baseline_train(state, scenes, masks, epochs=1, fixed_g=fixed_g)
        return state

    plain, jittered = run(None), run(0.2)
    assert any(
        not np.array_equal(tp.data, tj.data)
        for (_, tp), (_, tj) in zip(plain.theta.parameters(), jittered.theta.parameters())
    )


def test_pretrain_loss_decreases_on_easy_problem():
    cfg = tiny_cfg(t_init=12, pretrain_perturb=False, batch=4)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg, n_scenes=4)
    pretrain(state, scenes, masks)
    losses = [row["loss"] for row in state.log]
    assert losses[-1] < losses[0]


def test_bilevel_requires_phi():
    cfg = tiny_cfg()
    state = make_state(cfg, with_gst=False)
    scenes, masks = tiny_problem(cfg)
    with pytest.raises(ValueError):
        bilevel_train(state, scenes[:2], scenes[2:], masks)


def test_reconstruct_scene_shape():
    cfg = tiny_cfg()
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg)
    from casskit.optics import encode

    y = encode(scenes[0], masks[0], cfg.d)
    xhat = reconstruct_scene(state.theta, y, masks[0])
    assert xhat.shape == scenes[0].shape


# -- config file round trip -------------------------------------------------

def test_config_text_roundtrip():
    from casskit import io

    cfg = tiny_cfg(beta=0.25, loss_scale="paper", entropy_flip=True)
    text = config_text(cfg)
    items = io.parse_config(text)
    back = io.coerce_dataclass(items, TrainConfig)
    assert back == cfg


def test_config_validate_errors():
    with pytest.raises(ValueError):
        tiny_cfg(bands=0).validate()
    with pytest.raises(ValueError):
        tiny_cfg(d=-1).validate()
    with pytest.raises(ValueError):
        tiny_cfg(noise_mode="sometimes").validate()
    with pytest.raises(ValueError):
        tiny_cfg(alpha1=-1e-4).validate()
    with pytest.raises(ValueError):
        tiny_cfg(batch=0).validate()
    with pytest.raises(ValueError):
        tiny_cfg(beta=-0.1).validate()
    with pytest.raises(ValueError):
        tiny_cfg(loss_scale="median").validate()
    with pytest.raises(ValueError):
        tiny_cfg(lr_halve_period=0).validate()


# -- checkpointing ----------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = tiny_cfg(rounds=1)
    state = make_state(cfg)
    scenes, masks = tiny_problem(cfg, n_scenes=4)
    pretrain(state, scenes[:2], masks)
    bilevel_train(state, scenes[:2], scenes[2:], masks)
    path = tmp_path / "run.ckp"
    save_state(state, path)
    loaded = load_state(path)

    assert loaded.cfg == state.cfg
    assert loaded.epoch == state.epoch and loaded.round == state.round
    assert loaded.log == state.log
    for (n, ta), (_, tb) in zip(state.theta.parameters(), loaded.theta.parameters()):
        assert np.array_equal(ta.data, tb.data), n
    for (n, ta), (_, tb) in zip(state.phi.parameters(), loaded.phi.parameters()):
        assert np.array_equal(ta.data, tb.data), n
    assert state.adam_theta.t == loaded.adam_theta.t
    for n in state.adam_theta.m:
        assert np.array_equal(state.adam_theta.m[n], loaded.adam_theta.m[n])
        assert np.array_equal(state.adam_theta.v[n], loaded.adam_theta.v[n])
    # rng streams continue identically
    for role in state.rngs:
        a = state.rngs[role].standard_normal(4)
        b = loaded.rngs[role].standard_normal(4)
        assert np.array_equal(a, b), role


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(rounds=2)
    scenes, masks = tiny_problem(cfg, n_scenes=4)

    straight = make_state(cfg)
    pretrain(straight, scenes[:2], masks)
    bilevel_train(straight, scenes[:2], scenes[2:], masks)

    part = make_state(cfg)
    pretrain(part, scenes[:2], masks)
    part.cfg = dataclasses.replace(cfg, rounds=1)
    bilevel_train(part, scenes[:2], scenes[2:], masks)  # stop after round 1
    save_state(part, tmp_path / "mid.ckp")

    resumed = load_state(tmp_path / "mid.ckp")
    resumed.cfg = cfg  # restore the full budget
    bilevel_train(resumed, scenes[:2], scenes[2:], masks)

    assert resumed.epoch == straight.epoch
    for (n, ta), (_, tb) in zip(straight.theta.parameters(),
                                resumed.theta.parameters()):
        assert np.array_equal(ta.data, tb.data), n
    for (n, ta), (_, tb) in zip(straight.phi.parameters(),
                                resumed.phi.parameters()):
        assert np.array_equal(ta.data, tb.data), n
    assert straight.log == resumed.log


def test_state_blobs_structure_and_corruption_detection():
    cfg = tiny_cfg()
    state = make_state(cfg)
    blobs = state_blobs(state)
    assert "meta/config" in blobs and "meta/counters" in blobs
    assert any(k.startswith("theta/") for k in blobs)
    assert any(k.startswith("phi/") for k in blobs)
    assert any(k.startswith("meta/rng/") for k in blobs)
    back = state_from_blobs(blobs)
    assert back.cfg == cfg

    bad = dict(blobs)
    name = next(k for k in bad if k.startswith("theta/"))
    bad[name] = np.zeros((2, 2))  # wrong shape for that parameter
    with pytest.raises(ValueError):
        state_from_blobs(bad)


def test_checkpoint_without_gst(tmp_path):
    cfg = tiny_cfg()
    state = make_state(cfg, with_gst=False)
    save_state(state, tmp_path / "plain.ckp")
    loaded = load_state(tmp_path / "plain.ckp")
    assert loaded.phi is None and loaded.adam_phi is None
