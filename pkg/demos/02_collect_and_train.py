"""
Collecting data and training the TTNPB
======================================

Runs a reduced version of the collect -> train pipeline and looks at where
the parametric bias of each trial lands.  Pass an epoch count to train
longer (the full configuration uses 200):

    python demos/02_collect_and_train.py 40
"""
import sys
import time

import numpy as np

from wipelab import harness, ttnpb

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30
out = "demo_run"

# two sigma settings per material, 400 ticks each (the full run uses 1000)
cfg = harness.load_config(seed=0)
cfg.collect.steps = 400
cfg.train.max_epochs = epochs
paths = harness.cmd_collect(cfg, out)
print(f"{len(paths)} episode files in {out}/episodes")

ep = ttnpb.read_episode(paths[0])
print("first episode:", ep.material_id, ep.trial_id, ep.F.shape, "u range",
      np.round(ep.u.min(axis=0), 1), np.round(ep.u.max(axis=0), 1))

t0 = time.perf_counter()
res = harness.cmd_train(cfg, paths, out, progress=lambda e, loss: e % 10 == 0 and print(f"  epoch {e:3d}  mse {loss:.5f}"))
print(f"trained {len(res.curve)} epochs in {time.perf_counter() - t0:.0f} s: mse {res.initial_mse:.4f} -> {res.final_mse:.5f}")

# PB per trial, its material centroid, and the 2-d PCA the paper plots
pca = ttnpb.pb_pca(res.pbs)
for key, lab, q in zip(res.pbs.keys(), res.pbs.labels(), pca.projected):
    print(f"  {key:16s} {lab:10s} PC1 {q[0]:+.3f}  PC2 {q[1]:+.3f}")
print("silhouette by material:", round(ttnpb.silhouette(res.pbs.points(), res.pbs.labels()), 3))
print(f"checkpoint: {out}/checkpoint.bin")
