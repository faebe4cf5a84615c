"""
Four ways to render the same volume
===================================

Renders the slab from below with the neural field, the photon map it was
trained on, a reference path tracer and a simple ray marcher, then compares
the images. Writes PPM files (with float sidecars) to ``demo_out/``.
"""

# %%
import time
from pathlib import Path

import numpy as np

from photonfield.imaging import mse, ssim, write_image
from photonfield.neural_field import HashGridConfig, MlpConfig, PhotonField
from photonfield.photon_map import PhotonMap
from photonfield.photons import TraceConfig, trace_photons
from photonfield.render import render_neural, render_path_traced, render_photon_map, render_ray_march
from photonfield.scenes import below_camera, slab_scene
from photonfield.trainer import TrainConfig, train

out = Path("demo_out")
out.mkdir(exist_ok=True)
scene = slab_scene(dims=32)
pmap = PhotonMap(trace_photons(scene.medium, scene.lights, TraceConfig(60_000, seed=1)))

# %%
# A compact field trained for a few hundred steps is enough to see the idea.
field = PhotonField.create(HashGridConfig(levels=8, table_size_log2=14),
                           HashGridConfig(levels=6, table_size_log2=12, dimensionality=2),
                           MlpConfig(hidden_layers=3, width=32), seed=0)
cfg = TrainConfig(total_steps=400, batch_size=2048, K=64, seed=0)
res = train(field, pmap, cfg)
print(f"trained {cfg.total_steps} steps, last loss {res.loss_history[-1]:.4f}")

# %%
cam = below_camera(48)
images, timings = {}, {}
for name, render in (
    ("neural", lambda: render_neural(scene, field, cfg.encoding, cam, 8, 1)),
    ("photon_map", lambda: render_photon_map(scene, pmap, cam, 8, 64, 0.1, 0.0, 1)),
    ("path", lambda: render_path_traced(scene, cam, 8, rng=1)),
    ("ray_march", lambda: render_ray_march(scene, cam, 0.01)),
):
    t0 = time.perf_counter()
    images[name] = render().image
    timings[name] = time.perf_counter() - t0
    write_image(images[name], out / f"{name}.ppm")

# %%
# The neural image should track the photon-map image it learned from; the
# path tracer is the unbiased reference both approximate.
print(f"{'backend':12s} {'time s':>8s} {'ssim vs pm':>11s} {'mse vs pm':>10s}")
for name, img in images.items():
    print(f"{name:12s} {timings[name]:8.2f} {ssim(img, images['photon_map']):11.3f} "
          f"{mse(img, images['photon_map']):10.2e}")
print("mean luminance:", {k: round(float(np.mean(v)), 4) for k, v in images.items()})
