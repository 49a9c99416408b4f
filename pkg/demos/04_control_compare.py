"""
Task control through the learned model
======================================

Basic (fixed targets), Correct (foam PB) and Wrong (desk PB) on foam for the
three task losses.  Every mode sees the same rattle noise, so differences
come from the targets alone.

    python demos/04_control_compare.py [checkpoint] [steps]
"""
import sys

import numpy as np

from wipelab import harness, taskctl, ttnpb

ckpt = sys.argv[1] if len(sys.argv) > 1 else "demo_run/checkpoint.bin"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 150
cfg = harness.load_config()
materials, _ = cfg.materials()
model, pbs, _ = ttnpb.load_checkpoint(ckpt)
foam = materials["foam"]
ss = harness.control_seed(cfg.seed, "foam", 0)

for loss in taskctl.LOSS_KINDS:
    for mode in ("basic", "correct", "wrong:desk"):
        run = harness.run_control(model, pbs, foam, loss, mode, steps, ss, cfg.trajectory)
        e = taskctl.metric_for(loss, run.metrics)
        print(f"{loss:9s} {mode:10s} E_ave {e:9.4f}   mean u {np.round(run.u.mean(axis=0), 1)}")
# biasright should swing tau_roll negative: the right column is at -y
