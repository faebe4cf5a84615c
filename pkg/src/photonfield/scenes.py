"""Canned synthetic scenes and cameras used by the demos, benchmarks and tests."""

from __future__ import annotations

import math

from . import synth
from .photons import LightSource
from .render import Camera, Scene
from .volume import TransferFunction


def occupancy_tf(albedo=0.9, rgb=None):
    """Scalar 0 is empty, scalar 1 is fully dense with the given albedo colour."""
    r, g, b = (albedo, albedo, albedo) if rgb is None else rgb
    return TransferFunction.from_points([(0.0, (0.0, 0.0, 0.0, 0.0)), (1.0, (r, g, b, 1.0))])


def slab_scene(dims=64, density_scale=10.0, albedo=0.9, intensity=10.0, light=(0.5, 0.5, 1.6), lo=0.3, hi=0.7):
    """Horizontal slab ``lo <= z <= hi`` lit by one point light above it."""
    grid = synth.slab((dims, dims, dims), lo=lo, hi=hi)
    return Scene(grid, occupancy_tf(albedo), (LightSource(light, (intensity,) * 3),), density_scale)


def sphere_scene(dims=64, density_scale=200.0, albedo=0.8, intensity=10.0, radius=0.25):
    grid = synth.sphere((dims, dims, dims), radius=radius)
    return Scene(grid, occupancy_tf(albedo), (LightSource((0.5, -0.6, 1.4), (intensity,) * 3),), density_scale)


def noise_scene(dims=64, seed=0, density_scale=40.0, albedo=0.85, intensity=10.0):
    grid = synth.turbulence((dims, dims, dims), seed=seed)
    return Scene(grid, occupancy_tf(albedo, (albedo, 0.9 * albedo, 0.8 * albedo)),
                 (LightSource((1.4, 0.2, 1.3), (intensity,) * 3),), density_scale)


def side_camera(size=64, fov_deg=40.0):
    """Looks at the box centre from the -y side, slightly above."""
    return Camera((0.5, -1.3, 0.75), (0.5, 0.5, 0.5), (0.0, 0.0, 1.0), math.radians(fov_deg), size, size)


def below_camera(size=64, fov_deg=40.0):
    """Looks up at the slab from below, on the side opposite the light."""
    return Camera((0.5, 0.5, -1.0), (0.5, 0.5, 0.5), (0.0, 1.0, 0.0), math.radians(fov_deg), size, size)
