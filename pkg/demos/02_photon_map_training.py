"""
From photons to a trained photon field
======================================

Traces a multi-phase photon map through the slab volume, inspects the KNN
radiance targets, and trains a small field under the staggered radius
schedule. Takes about a minute on one core.
"""

# %%
# Trace photons for three phase values; each photon remembers which one it used.
import time

import numpy as np

from photonfield.photons import TraceConfig, trace_photons
from photonfield.photon_map import PhotonMap
from photonfield.scenes import slab_scene

scene = slab_scene(dims=32)
t0 = time.perf_counter()
photons = trace_photons(scene.medium, scene.lights, TraceConfig(60_000, seed=1))
pmap = PhotonMap(photons)
print(f"{len(photons)} deposits from {sum(photons.stats['emitted_counts'])} emitted photons "
      f"in {time.perf_counter() - t0:.1f}s")
print("deposits per phase:", np.bincount(photons.g_index, minlength=3))

# %%
# Radiance estimates along the slab normal, looking up toward the lamp, for
# each phase value. Outside the slab there is nothing to scatter.
from photonfield.estimator import estimate_batch

z = np.linspace(0.05, 0.95, 10)
x = np.column_stack([np.full_like(z, 0.5), np.full_like(z, 0.5), z])
up = np.tile([0.0, 0.0, 1.0], (z.size, 1))
for g in pmap.phase_set:
    L = estimate_batch(photons, pmap.query_batch(x, g, 64, 0.1), up, g)[:, 0]
    print(f"g={g:+.2f} ", " ".join(f"{v:7.3f}" for v in L))

# %%
# Larger radii find more neighbours, so more queries hit the K cap.
rng = np.random.default_rng(0)
q = rng.random((4096, 3))
for r in (0.02, 0.05, 0.1):
    t0 = time.perf_counter()
    knn = pmap.query_batch(q, 0.0, 64, r)
    print(f"r={r:.2f}  knn {1000 * (time.perf_counter() - t0):6.1f} ms  saturated {np.mean(knn.counts == 64):.2f}")

# %%
# Train under the staggered schedule and under the final radius only.
from photonfield.neural_field import HashGridConfig, MlpConfig, PhotonField
from photonfield.trainer import KnnSchedule, TrainConfig, evaluation_loss, train

pos = HashGridConfig(levels=8, table_size_log2=14)
dirs = HashGridConfig(levels=6, table_size_log2=12, dimensionality=2)
mlp = MlpConfig(hidden_layers=3, width=32)
for name, sched in (("staggered", KnnSchedule.staggered()), ("single radius", KnnSchedule.single())):
    run_cfg = TrainConfig(total_steps=300, batch_size=1024, K=64, schedule=sched, seed=2)
    field = PhotonField.create(pos, dirs, mlp, seed=2)
    res = train(field, pmap, run_cfg)
    print(f"{name:14s} loss {res.loss_history[0]:.4f} -> {res.loss_history[-20:].mean():.4f}  "
          f"held-out {evaluation_loss(field, pmap, run_cfg):.4f}  knn time {res.timing['knn_time']:.1f}s")
