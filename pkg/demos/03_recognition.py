"""
Recognising the surface online
==============================

Start from the PB of the most dissimilar trained material and let the
online update pull it toward the surface actually being wiped.  Uses the
checkpoint written by 02_collect_and_train.py unless another is given:

    python demos/03_recognition.py [checkpoint] [steps]
"""
import sys

import numpy as np

from wipelab import harness, ttnpb

ckpt = sys.argv[1] if len(sys.argv) > 1 else "demo_run/checkpoint.bin"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600
cfg = harness.load_config()
materials, meta = cfg.materials()
model, pbs, _ = ttnpb.load_checkpoint(ckpt)
cents = pbs.by_material()

for name in ("foam", "desk", "thin_cardboard"):
    family = meta["family"].get(name, name)
    if family not in cents:
        continue
    p0 = harness.start_pb(pbs, "farthest", family)
    rec = harness.recognize(model, pbs, materials[name], steps, harness.control_seed(cfg.seed, name, 0),
                            cfg.trajectory, cfg.recognize.sigma, p0, cfg.recognize.lr, cfg.recognize.momentum)
    # distance to the target centroid every 100 updates
    d = np.linalg.norm(rec.trajectory - cents[family], axis=1)
    print(f"{name:15s} start near {pbs.nearest_material(p0):10s} distance to {family}: "
          + " ".join(f"{v:.3f}" for v in d[::100]) + f"  -> nearest {rec.nearest[-1]}")
