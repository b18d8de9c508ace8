"""Train the full model at miniature scale and watch both levels move.

Lower level: reconstruction weights theta, trained on the train scenes
under mask perturbations.  Upper level: the variance network phi, nudged
on the validation scenes through the reparameterized draws.  A miniature
config keeps this under half a minute; the shape of the run is the same
as at full scale, only shorter.
"""

import numpy as np

from casskit.gstnet import gst_forward
from casskit.harness import ScenarioSpec, build_experiment, run_training
from casskit.optics import Mask

cfg_spec = dict(
    scene_h=12, scene_w=12, scenes_train=4, scenes_val=2, scenes_test=2,
    mask_base_h=24, mask_base_w=24, k_train=3, k_test=2, trials=4,
)

from casskit.trainer import TrainConfig

cfg = TrainConfig(
    bands=3, d=1, backbone_channels=8, backbone_blocks=1,
    gst_channels=8, gst_proj_channels=4, batch=2,
    t_init=10, t_trn=3, t_val=2, rounds=8, seed=1,
)
spec = ScenarioSpec(**cfg_spec)

exp = build_experiment(cfg, spec)
print(f"{len(exp.train_scenes)} train / {len(exp.val_scenes)} val / "
      f"{len(exp.test_scenes)} test scenes, {len(exp.train_masks)} train masks")

state = run_training(exp, mode="full")

by_phase = {}
for row in state.log:
    by_phase.setdefault(row["phase"], []).append(row["loss"])
for phase in ("pretrain", "train", "val"):
    losses = by_phase[phase]
    print(f"{phase:8s}: {len(losses):3d} epochs, loss {losses[0]:.5f} -> {losses[-1]:.5f}")

# what did the variance network learn to output for an actual mask?
m = exp.train_masks[0]
g = gst_forward(Mask(m.values), state.phi).data
print(f"\nlearned deviation map g over mask 0: "
      f"min {g.min():.4f}  mean {g.mean():.4f}  max {g.max():.4f}")
print(f"(softplus(0) = {np.log(2):.4f} is the all-zero-weights output level)")

ent = [row["entropy"] for row in state.log if row["phase"] == "val"]
print(f"entropy term across val epochs: {ent[0]:+.5f} -> {ent[-1]:+.5f}")
