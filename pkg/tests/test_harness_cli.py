"""Scenario harness and command-line flows on micro-sized problems.

Everything here trains for at most a couple of epochs on 6x6 scenes; the
point is wiring (routing, budgets, emitted files, exit codes), not
reconstruction quality.
"""

import numpy as np
import pytest

from casskit.cli import main
from casskit.harness import (
    ScenarioSpec,
    build_experiment,
    evaluate,
    gen_synth_scenes,
    load_config,
    run_ablation,
    run_config_text,
    run_gradient_suite,
    run_scenario,
    run_training,
    uncertainty_maps,
    write_summary,
)
from casskit.io import ConfigError, load_checkpoint, load_cube, load_mask, parse_config
from casskit.trainer import TrainConfig, state_blobs


def tiny_cfg(**kw):
    base = dict(
        bands=2, d=1, backbone_channels=4, backbone_blocks=1,
        gst_channels=4, gst_proj_channels=2, batch=2,
        t_init=1, t_trn=1, t_val=1, rounds=1, seed=11,
    )
    base.update(kw)
    return TrainConfig(**base)


def tiny_spec(**kw):
    # 12x12 is the smallest comfortable size: ssim needs 11x11 windows
    base = dict(
        scene_h=12, scene_w=12, scenes_train=2, scenes_val=1, scenes_test=1,
        mask_base_h=24, mask_base_w=24, k_train=2, k_test=2, trials=2,
    )
    base.update(kw)
    return ScenarioSpec(**base)


# -- scenario spec and config routing ---------------------------------------

def test_spec_kind_validation():
    with pytest.raises(ValueError, match="unknown scenario kind"):
        tiny_spec(kind="sideways").validate()
    with pytest.raises(ValueError, match="one-to-one requires"):
        tiny_spec(kind="one-to-one", k_train=2, k_test=1).validate()
    with pytest.raises(ValueError, match="one-to-many requires k_train = 1"):
        tiny_spec(kind="one-to-many", k_train=3).validate()
    tiny_spec(kind="one-to-one", k_train=1, k_test=1).validate()
    tiny_spec(kind="one-to-many", k_train=1, k_test=4).validate()


def test_spec_geometry_validation():
    with pytest.raises(ValueError, match="mask base"):
        tiny_spec(mask_base_h=4).validate()
    with pytest.raises(ValueError, match="density"):
        tiny_spec(mask_density=1.5).validate()
    with pytest.raises(ValueError, match="trials"):
        tiny_spec(trials=0).validate()
    with pytest.raises(ValueError, match="at least 4x4"):
        tiny_spec(scene_h=3).validate()


def test_load_config_routes_between_dataclasses():
    cfg, spec = load_config("alpha0=0.001\ntrials=3\nbands=5\nscene_h=8\nscene_w=8\n")
    assert cfg.alpha0 == 0.001
    assert cfg.bands == 5
    assert spec.trials == 3
    assert spec.scene_h == 8


def test_load_config_empty_gives_defaults():
    cfg, spec = load_config("")
    assert cfg == TrainConfig()
    assert spec == ScenarioSpec()


def test_load_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys: warp"):
        load_config("warp=1\n")


# -- synthetic scenes -------------------------------------------------------

def test_scenes_shape_range_and_peak():
    rng = np.random.default_rng(7)
    scenes = gen_synth_scenes(3, 8, 10, 4, rng)
    assert len(scenes) == 3
    for x in scenes:
        assert x.values.shape == (8, 10, 4)
        assert x.values.min() >= 0.0
        assert x.values.max() == 1.0


def test_scenes_deterministic_per_seed():
    a = gen_synth_scenes(2, 6, 6, 2, np.random.default_rng(5))
    b = gen_synth_scenes(2, 6, 6, 2, np.random.default_rng(5))
    c = gen_synth_scenes(2, 6, 6, 2, np.random.default_rng(6))
    for xa, xb in zip(a, b):
        np.testing.assert_array_equal(xa.values, xb.values)
    assert not np.array_equal(a[0].values, c[0].values)


def test_scenes_argument_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="4x4"):
        gen_synth_scenes(1, 3, 8, 2, rng)
    with pytest.raises(ValueError, match="bands"):
        gen_synth_scenes(1, 8, 8, 0, rng)


# -- experiment assembly ----------------------------------------------------

def test_build_experiment_counts_and_validity():
    exp = build_experiment(tiny_cfg(), tiny_spec())
    assert len(exp.train_scenes) == 2
    assert len(exp.val_scenes) == 1
    assert len(exp.test_scenes) == 1
    assert len(exp.train_masks) == 2
    assert len(exp.test_masks) == 2
    for split, n in (("train", 2), ("val", 1), ("test", 1)):
        assert len(exp.datasets[split]) == n
        exp.datasets[split].validate(exp.train_masks)


def test_build_experiment_masks_disjoint_many_to_many():
    exp = build_experiment(tiny_cfg(), tiny_spec())
    for tr in exp.train_masks:
        for te in exp.test_masks:
            assert not np.array_equal(tr.values, te.values)


def test_build_experiment_one_to_one_shares_the_mask():
    spec = tiny_spec(kind="one-to-one", k_train=1, k_test=1)
    exp = build_experiment(tiny_cfg(), spec)
    assert len(exp.train_masks) == 1
    assert len(exp.test_masks) == 1
    np.testing.assert_array_equal(
        exp.train_masks[0].values, exp.test_masks[0].values
    )


def test_build_experiment_deterministic():
    a = build_experiment(tiny_cfg(), tiny_spec())
    b = build_experiment(tiny_cfg(), tiny_spec())
    np.testing.assert_array_equal(a.train_scenes[0].values, b.train_scenes[0].values)
    np.testing.assert_array_equal(a.train_masks[0].values, b.train_masks[0].values)
    np.testing.assert_array_equal(
        a.datasets["test"].items[0].y.values, b.datasets["test"].items[0].y.values
    )


# -- training regimes -------------------------------------------------------

def test_run_training_budgets_and_modes():
    cfg = tiny_cfg()
    exp = build_experiment(cfg, tiny_spec())

    untrained = run_training(exp, mode="untrained")
    assert untrained.epoch == 0 and untrained.log == []

    full = run_training(exp, mode="full")
    assert full.round == cfg.rounds
    phases = {row["phase"] for row in full.log}
    assert phases == {"pretrain", "train", "val"}

    ensemble = run_training(exp, mode="no-gst")
    assert ensemble.phi is None
    assert ensemble.epoch == cfg.t_init + cfg.rounds * cfg.t_trn

    joint = run_training(exp, mode="no-bilevel")
    assert joint.epoch == cfg.t_init + cfg.rounds * (cfg.t_trn + cfg.t_val)
    assert {row["phase"] for row in joint.log} == {"pretrain", "joint"}

    with pytest.raises(ValueError, match="unknown training mode"):
        run_training(exp, mode="sideways")


def test_fixed_variance_uses_g0():
    cfg = tiny_cfg()
    exp = build_experiment(cfg, tiny_spec())
    a = state_blobs(run_training(exp, mode="fixed-variance", fixed_g=0.0))
    b = state_blobs(run_training(exp, mode="fixed-variance", fixed_g=0.3))
    same = all(
        np.array_equal(v, b[k])
        for k, v in a.items()
        if isinstance(v, np.ndarray) and k.startswith("theta/")
    )
    assert not same


# -- evaluation and emitted files -------------------------------------------

def test_evaluate_row_count_and_determinism():
    spec = tiny_spec()
    exp = build_experiment(tiny_cfg(), spec)
    state = run_training(exp, mode="untrained")
    r1 = evaluate(state, exp, "a")
    r2 = evaluate(state, exp, "a")
    assert len(r1.rows) == spec.trials * len(exp.test_scenes)
    assert r1.rows == r2.rows


def test_evaluate_noise_changes_scores():
    cfg = tiny_cfg()
    exp_clean = build_experiment(cfg, tiny_spec())
    exp_noisy = build_experiment(cfg, tiny_spec(eval_noise_std=0.05))
    state = run_training(exp_clean, mode="untrained")
    clean = evaluate(state, exp_clean, "a").rows
    noisy = evaluate(state, exp_noisy, "a").rows
    assert clean != noisy


def test_write_summary_layout(tmp_path):
    spec = tiny_spec(scenes_test=2, trials=3)
    exp = build_experiment(tiny_cfg(), spec)
    state = run_training(exp, mode="untrained")
    report = evaluate(state, exp, "a")
    p = tmp_path / "summary.csv"
    write_summary(p, report)
    lines = p.read_text().splitlines()
    assert lines[0] == "scope,psnr_mean,psnr_std,ssim_mean,ssim_std,n"
    assert len(lines) == 1 + 1 + 2
    assert lines[1].startswith("overall,")
    assert lines[2].startswith("scene0,") and lines[3].startswith("scene1,")


def test_run_scenario_emits_complete_tree(tmp_path):
    cfg, spec = tiny_cfg(), tiny_spec()
    out = tmp_path / "run"
    state, report = run_scenario(cfg, spec, out_dir=out, mode="untrained")
    for name in ("config.txt", "checkpoint.ckp", "loss_log.csv", "metrics.csv", "summary.csv"):
        assert (out / name).is_file(), name
    for name in ("train_00.msk", "train_01.msk", "test_00.msk", "test_01.msk"):
        assert (out / "masks" / name).is_file(), name
    # every artifact must parse back with the public readers
    assert load_checkpoint(out / "checkpoint.ckp")
    m = load_mask(out / "masks" / "train_00.msk")
    assert m.shape == (spec.scene_h, spec.scene_w)
    assert parse_config((out / "config.txt").read_text()) == parse_config(
        run_config_text(cfg, spec)
    )
    assert len(report.rows) == spec.trials * spec.scenes_test


def test_run_scenario_accepts_prebuilt_state(tmp_path):
    cfg, spec = tiny_cfg(), tiny_spec()
    exp = build_experiment(cfg, spec)
    state = run_training(exp, mode="untrained")
    state2, report = run_scenario(cfg, spec, mode="untrained", state=state)
    assert state2 is state
    assert len(report.rows) == spec.trials * spec.scenes_test


def test_run_ablation_fixed_variance_labels(tmp_path):
    results = run_ablation(
        "fixed-variance", tiny_cfg(), tiny_spec(),
        out_dir=tmp_path, g0_values=(0.0, 0.1),
    )
    assert set(results) == {"fixed-variance-g0", "fixed-variance-g0.1"}
    for label, report in results.items():
        assert len(report.rows) == 2
        assert (tmp_path / label / "summary.csv").is_file()


def test_run_ablation_rejects_unknown_kind():
    with pytest.raises(ValueError, match="unknown ablation"):
        run_ablation("everything", tiny_cfg(), tiny_spec())


def test_uncertainty_maps_outputs(tmp_path):
    cfg, spec = tiny_cfg(), tiny_spec()
    exp = build_experiment(cfg, spec)
    state = run_training(exp, mode="untrained")
    maps = uncertainty_maps(state, exp, out_dir=tmp_path)
    assert len(maps) == len(exp.test_scenes)
    var, mean = maps[0]
    assert var.shape == (spec.scene_h, spec.scene_w, cfg.bands)
    assert var.min() >= 0.0
    for name in (
        "scene0_variance.hsc", "scene0_mean.hsc",
        "scene0_var_band00.pgm", "scene0_var_band01.pgm", "scene0_stats.csv",
    ):
        assert (tmp_path / name).is_file(), name
    np.testing.assert_array_equal(
        load_cube(tmp_path / "scene0_variance.hsc"),
        var.astype("<f4").astype(np.float64),
    )


def test_gradient_suite_quick_all_green():
    rows = run_gradient_suite(quick=True)
    names = [r[0] for r in rows]
    assert "end-to-end" in names
    for name, worst, tol, ok in rows:
        assert ok, f"{name}: {worst:.3e} >= {tol:.0e}"


# -- command line -----------------------------------------------------------

@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg, spec = tiny_cfg(seed=5), tiny_spec()
    cfg_path = root / "run.cfg"
    cfg_path.write_text(run_config_text(cfg, spec))
    train_dir = root / "train"
    rc = main(["train", "--config", str(cfg_path), "--out-dir", str(train_dir)])
    assert rc == 0
    return {"root": root, "cfg": cfg_path, "train": train_dir, "spec": spec}


def test_cli_gen_data(tmp_path, capsys):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(run_config_text(tiny_cfg(), tiny_spec()))
    out = tmp_path / "scenes"
    rc = main(["gen-data", "--config", str(cfg_path), "--out-dir", str(out), "--count", "2"])
    assert rc == 0
    assert "wrote 2 scenes" in capsys.readouterr().out
    for i in range(2):
        cube = load_cube(out / f"scene_{i:03d}.hsc")
        assert cube.shape == (12, 12, 2)


def test_cli_gen_data_seed_determinism(tmp_path):
    args = lambda d, s: [
        "gen-data", "--out-dir", str(d), "--count", "1", "--seed", s,
    ]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(args(a, "3")) == 0
    assert main(args(b, "3")) == 0
    assert main(args(c, "4")) == 0
    fa = (a / "scene_000.hsc").read_bytes()
    assert fa == (b / "scene_000.hsc").read_bytes()
    assert fa != (c / "scene_000.hsc").read_bytes()


def test_cli_gen_masks(tmp_path, capsys):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(run_config_text(tiny_cfg(), tiny_spec()))
    out = tmp_path / "masks"
    rc = main(["gen-masks", "--config", str(cfg_path), "--out-dir", str(out)])
    assert rc == 0
    assert "2 train and 2 test" in capsys.readouterr().out
    for name in ("train_00.msk", "train_01.msk", "test_00.msk", "test_01.msk"):
        assert load_mask(out / name).shape == (12, 12)


def test_cli_train_outputs(cli_env):
    train = cli_env["train"]
    for name in ("checkpoint.ckp", "loss_log.csv", "config.txt"):
        assert (train / name).is_file(), name
    text = (train / "loss_log.csv").read_text().splitlines()
    assert text[0] == "phase,round,epoch,loss,entropy"
    assert len(text) > 1


def test_cli_eval(cli_env, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main([
        "eval", "--config", str(cli_env["cfg"]),
        "--checkpoint", str(cli_env["train"] / "checkpoint.ckp"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    spec = cli_env["spec"]
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + spec.trials * spec.scenes_test
    assert "psnr" in capsys.readouterr().out


def test_cli_uncertainty(cli_env, tmp_path, capsys):
    out = tmp_path / "unc"
    rc = main([
        "uncertainty", "--config", str(cli_env["cfg"]),
        "--checkpoint", str(cli_env["train"] / "checkpoint.ckp"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    assert (out / "scene0_variance.hsc").is_file()
    assert "variance mean" in capsys.readouterr().out


def test_cli_train_resume_of_finished_run_is_a_noop(cli_env, tmp_path):
    first = load_checkpoint(cli_env["train"] / "checkpoint.ckp")
    out = tmp_path / "more"
    rc = main([
        "train", "--config", str(cli_env["cfg"]),
        "--resume", str(cli_env["train"] / "checkpoint.ckp"),
        "--out-dir", str(out),
    ])
    assert rc == 0
    second = load_checkpoint(out / "checkpoint.ckp")
    assert set(second) == set(first)
    for k, v in first.items():
        if isinstance(v, np.ndarray):
            np.testing.assert_array_equal(second[k], v, err_msg=k)
        else:
            assert second[k] == v, k


def test_cli_ablate(tmp_path, capsys):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text(run_config_text(tiny_cfg(), tiny_spec()))
    out = tmp_path / "abl"
    rc = main([
        "ablate", "--kind", "no-gst", "--config", str(cfg_path),
        "--out-dir", str(out),
    ])
    assert rc == 0
    assert "no-gst" in capsys.readouterr().out
    assert (out / "no-gst" / "summary.csv").is_file()


def test_cli_gradcheck_quick(capsys):
    rc = main(["gradcheck", "--quick"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "end-to-end" in out
    assert "FAIL" not in out


def test_cli_error_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("warp=1\n")
    rc = main(["gen-masks", "--config", str(bad_cfg), "--out-dir", str(tmp_path / "x")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("casskit: error:")

    rc = main(["gen-data", "--config", str(tmp_path / "missing.cfg"),
               "--out-dir", str(tmp_path / "y")])
    assert rc == 2
    assert "cannot read config" in capsys.readouterr().err

    rc = main(["eval", "--checkpoint", str(tmp_path / "missing.ckp"),
               "--out-dir", str(tmp_path / "z")])
    assert rc == 2
    assert capsys.readouterr().err.startswith("casskit: error:")


def test_cli_corrupt_checkpoint(tmp_path, capsys):
    junk = tmp_path / "junk.ckp"
    junk.write_bytes(b"not a checkpoint")
    rc = main(["eval", "--checkpoint", str(junk), "--out-dir", str(tmp_path / "o")])
    assert rc == 2
    assert "bad magic" in capsys.readouterr().err


def test_cli_unknown_subcommand_exits_via_argparse():
    with pytest.raises(SystemExit) as exc:
        main(["transmogrify"])
    assert exc.value.code == 2
