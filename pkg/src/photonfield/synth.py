"""Deterministic procedural volumes standing in for scanned datasets."""

import numpy as np
from scipy import ndimage

from .volume import UNIT_BOX, VolumeGrid


def _centers(dims):
    nx, ny, nz = dims
    z, y, x = np.meshgrid((np.arange(nz) + 0.5) / nz, (np.arange(ny) + 0.5) / ny,
                          (np.arange(nx) + 0.5) / nx, indexing="ij")
    return x, y, z


def slab(dims=(64, 64, 64), lo=0.3, hi=0.7, axis=2):
    """Value 1 for voxel centres with ``lo <= coord[axis] <= hi``, else 0."""
    c = _centers(dims)[axis]
    return VolumeGrid.from_array(((c >= lo) & (c <= hi)).astype(np.float64), UNIT_BOX)


def sphere(dims=(64, 64, 64), radius=0.25, center=(0.5, 0.5, 0.5)):
    x, y, z = _centers(dims)
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return VolumeGrid.from_array((r2 <= radius * radius).astype(np.float64), UNIT_BOX)


def turbulence(dims=(64, 64, 64), seed=0, smoothness=3.0, octaves=3, threshold=0.45):
    """Band-limited noise with a soft iso-threshold, loosely resembling vortex data."""
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    acc = np.zeros((nz, ny, nx))
    amp = 1.0
    for o in range(octaves):
        n = rng.standard_normal((nz, ny, nx))
        acc += amp * ndimage.gaussian_filter(n, smoothness / (2 ** o), mode="wrap")
        amp *= 0.5
    acc = (acc - acc.min()) / (acc.max() - acc.min())
    # soft window keeps structures away from the faces
    x, y, z = _centers(dims)
    window = np.clip(1.0 - 2.2 * np.maximum.reduce([abs(x - 0.5), abs(y - 0.5), abs(z - 0.5)]) ** 4, 0.0, 1.0)
    vals = np.clip((acc - threshold) / (1.0 - threshold), 0.0, 1.0) * window
    return VolumeGrid.from_array(vals, UNIT_BOX)


def constant(dims=(4, 4, 4), value=1.0):
    return VolumeGrid.from_array(np.full(dims[::-1], float(value)), UNIT_BOX)


GENERATORS = {"slab": slab, "sphere": sphere, "turbulence": turbulence, "constant": constant}


def generate(kind, dims, **params):
    if kind == "vortices":
        kind = "turbulence"
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic volume kind {kind!r}; choose from {sorted(GENERATORS)}") from None
    return gen(tuple(int(d) for d in dims), **params)
