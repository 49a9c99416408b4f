"""
Pressing and wiping on simulated surfaces
=========================================

A tour of the contact simulator and the inner proportional loop: press the
hand onto each material, then drag it along one stroke and watch how friction
tilts the hand and skews the normal-force pattern.
"""
import numpy as np

from wipelab import ctrl, harness, taskctl
from wipelab.ctrl import ControlInput

cfg = harness.load_config()
materials, meta = cfg.materials()
print("training materials:", meta["training"], " held out:", meta["held_out"])

# the hand starts hovering 5 mm above the surface; offsets are captured there
# and the proportional loop then presses until the mean normal force reaches 200
for name, mat in materials.items():
    rig = harness.WipeRig(mat, harness.control_seed(0, name, 0), start_xy=(0.0, 0.0))
    f_ave = []
    for _ in range(40):
        rig.tick(ControlInput(0.0, 0.0, 200.0), rig.xy)
        f_ave.append(ctrl.mean_normal(rig.frame))
    print(f"{name:15s} k={mat.stiffness:5.0f} mu={mat.friction:.2f}  "
          f"F_ave after 5/10/40 ticks: {f_ave[4]:6.1f} {f_ave[9]:6.1f} {f_ave[-1]:6.1f}  "
          f"x_z_ref {-rig.position()[2]:.2f} mm")

# now wipe: one 120 mm stroke at 30 mm/s, Basic targets {0, 0, 200}
pts = harness.trajectory_points(cfg.trajectory, 60)
for name in ("desk", "foam"):
    rig = harness.WipeRig(materials[name], harness.control_seed(0, name, 1), start_xy=pts[0])
    for _ in range(10):
        rig.tick(harness.BASIC_U, rig.xy)
    e1, pitch, shear = [], [], []
    for p in pts:
        rig.tick(harness.BASIC_U, p)
        e1.append(taskctl.step_metrics(rig.frame)[0])
        pitch.append(rig.cs.theta_pitch_ref)
        shear.append(np.abs(rig.frame[:, 0]).mean())
    # the leading edge digs in; on foam the pitch loop runs into its 5 deg clamp
    print(f"{name:5s} mean |f_x| {np.mean(shear):6.1f}   mean |pitch ref| {np.mean(np.abs(pitch)):.2f} deg"
          f"   E1 {np.mean(e1):6.1f}")

# pressing less cuts the friction-driven tilt, but on this rig the mean
# error it adds outweighs the gain
for f_ref in (160, 180, 200):
    rig = harness.WipeRig(materials["foam"], harness.control_seed(0, "foam", 1), start_xy=pts[0])
    for _ in range(10):
        rig.tick(harness.BASIC_U, rig.xy)
    hist = []
    for p in pts:
        rig.tick(ControlInput(0.0, 0.0, f_ref), p)
        hist.append(rig.frame.copy())
    m = taskctl.eval_metrics(hist)
    print(f"foam, f_z_ref {f_ref}: E1 {m.E1_ave:6.1f}  E3 {m.E3_ave:6.1f}")
