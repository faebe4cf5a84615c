"""
Phase function and free-flight sampling
=======================================

Two building blocks of every tracer in the package: Henyey-Greenstein
direction sampling and delta tracking through a voxel grid.
Run with ``python demos/01_phase_and_tracking.py``.
"""

# %%
# The HG density integrates to one over the sphere for any g in (-1, 1).
import numpy as np
from scipy import special

from photonfield.phase import hg_eval, hg_sample_cos

nodes, weights = special.roots_legendre(512)
for g in (-0.75, 0.0, 0.75):
    print(f"g={g:+.2f}  integral={2 * np.pi * weights @ hg_eval(g, nodes):.10f}")

# %%
# Sampled cosines follow the density; the mean cosine of HG equals g.
rng = np.random.default_rng(0)
for g in (-0.75, 0.0, 0.35, 0.75):
    c = hg_sample_cos(g, rng.random(200_000))
    print(f"g={g:+.2f}  mean cos={c.mean():+.4f}")

# %%
# Delta tracking in a homogeneous medium: collision distances are exponential
# with rate sigma_t, even though the tracker only knows the majorant.
from photonfield import synth
from photonfield.scenes import occupancy_tf
from photonfield.volume import Medium, delta_track_batch

density_scale = 4.0
medium = Medium(synth.constant((8, 8, 8), 1.0), occupancy_tf(0.8), density_scale)
n = 100_000
origins = np.tile([0.5, 0.5, 0.0], (n, 1))
dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
depth = delta_track_batch(medium, origins, dirs, rng)
inside = depth[np.isfinite(depth)]
print(f"escaped fraction {np.mean(~np.isfinite(depth)):.4f}  (exp(-4) = {np.exp(-density_scale):.4f})")
print(f"mean depth of collisions {inside.mean():.4f}")

# %%
# Heterogeneous media: the same tracker on a turbulence-like field.
from photonfield.scenes import noise_scene

scene = noise_scene(dims=32)
depth = delta_track_batch(scene.medium, origins, dirs, rng)
print(f"noise volume: {np.mean(np.isfinite(depth)):.3f} of rays collide, sigma_max={scene.medium.sigma_max:.2f}")
