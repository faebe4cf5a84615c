"""Heterogeneous participating medium: scalar grid, transfer function and
free-flight sampling by delta (Woodcock) tracking.

Extinction is ``sigma(x) = density_scale * alpha(tf(sample_scalar(x)))``.
Voxel ``(i, j, k)`` is centred at ``lo + (i + 0.5, j + 0.5, k + 0.5) * size / dims``
and the flat data layout is x-fastest, so ``data.reshape(nz, ny, nx)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numba as nb
import numpy as np

from ._rng import STREAM_MISC, STREAM_NEE, make_state, next_u01, seed_from

DEFAULT_DENSITY_SCALE = 100.0
UNIT_BOX = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


class InvalidInputError(ValueError):
    """Raised for malformed arguments (non-finite rays, bad counts, ...)."""


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    dims: tuple[int, int, int]
    data: np.ndarray
    world_box: tuple[tuple[float, float, float], tuple[float, float, float]] = UNIT_BOX

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidInputError(f"dims must be 3 positive integers, got {self.dims}")
        data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if data.size != dims[0] * dims[1] * dims[2]:
            raise InvalidInputError(f"data length {data.size} != prod(dims) {np.prod(dims)}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise InvalidInputError("grid scalars must be finite and lie in [0, 1]")
        lo, hi = (tuple(float(v) for v in c) for c in self.world_box)
        if any(h <= l for l, h in zip(lo, hi)):
            raise InvalidInputError(f"degenerate world box {self.world_box}")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "world_box", (lo, hi))

    @classmethod
    def from_array(cls, arr, world_box=UNIT_BOX):
        """Build from an array indexed ``[z, y, x]``."""
        arr = np.asarray(arr, dtype=np.float64)
        nz, ny, nx = arr.shape
        return cls((nx, ny, nz), arr.ravel(), world_box)

    @property
    def array(self):
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx)

    @property
    def lo(self):
        return np.array(self.world_box[0])

    @property
    def hi(self):
        return np.array(self.world_box[1])

    def voxel_center(self, i, j, k):
        size = self.hi - self.lo
        return self.lo + (np.array([i, j, k]) + 0.5) * size / np.array(self.dims)


@dataclass(frozen=True, eq=False)
class TransferFunction:
    """Piecewise-linear map from scalar in [0, 1] to RGBA in [0, 1]^4."""

    positions: np.ndarray
    rgba: np.ndarray

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).ravel()
        rgba = np.ascontiguousarray(self.rgba, dtype=np.float64).reshape(-1, 4)
        if pos.size < 2 or rgba.shape[0] != pos.size:
            raise InvalidInputError("transfer function needs >= 2 control points with one rgba each")
        if pos[0] != 0.0 or pos[-1] != 1.0 or np.any(np.diff(pos) <= 0):
            raise InvalidInputError("control positions must increase strictly from 0 to 1")
        if np.any(rgba < 0) or np.any(rgba > 1) or not np.all(np.isfinite(rgba)):
            raise InvalidInputError("rgba channels must lie in [0, 1]")
        pos.setflags(write=False)
        rgba.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rgba", rgba)

    @classmethod
    def from_points(cls, points):
        """``points`` is a sequence of ``(scalar, (r, g, b, a))``."""
        pos = [p for p, _ in points]
        rgba = [list(c) for _, c in points]
        return cls(np.array(pos), np.array(rgba))

    @classmethod
    def constant(cls, rgba):
        return cls(np.array([0.0, 1.0]), np.array([rgba, rgba], dtype=np.float64))

    def __call__(self, s):
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
        out = np.stack([np.interp(s, self.positions, self.rgba[:, c]) for c in range(4)], axis=-1)
        return out

    def max_alpha(self, smin=0.0, smax=1.0):
        """Largest alpha attained for scalars in ``[smin, smax]``."""
        inside = (self.positions > smin) & (self.positions < smax)
        cands = [self(smin)[3], self(smax)[3]]
        cands.extend(self.rgba[inside, 3])
        return float(max(cands))


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,) or not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise InvalidInputError("ray origin/direction must be finite 3-vectors")
        if math.isnan(self.t_min) or math.isnan(self.t_max) or self.t_min < 0 or self.t_min > self.t_max:
            raise InvalidInputError(f"bad ray interval [{self.t_min}, {self.t_max}]")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidInputError("ray direction must be unit length")


@dataclass(frozen=True)
class Interaction:
    position: np.ndarray
    scalar: float
    albedo: np.ndarray  # rgba
    t: float = field(default=0.0)


@dataclass(frozen=True, eq=False)
class Medium:
    """Grid + transfer function + extinction scale, packed for the kernels."""

    grid: VolumeGrid
    tf: TransferFunction
    density_scale: float = DEFAULT_DENSITY_SCALE

    @cached_property
    def sigma_max(self):
        return compute_sigma_max(self.grid, self.tf, self.density_scale)

    @cached_property
    def args(self):
        lo = np.array(self.grid.world_box[0])
        size = np.array(self.grid.world_box[1]) - lo
        return (self.grid.array, lo, size, self.tf.positions, self.tf.rgba, float(self.density_scale))

    def extinction(self, x):
        return self.density_scale * self.tf(sample_scalar(self.grid, x))[..., 3]


def compute_sigma_max(grid, tf, density_scale=DEFAULT_DENSITY_SCALE):
    """Majorant: density_scale times the largest alpha reachable by grid values.

    Trilinear reconstruction never leaves ``[min(data), max(data)]``.
    """
    return float(density_scale) * tf.max_alpha(float(grid.data.min()), float(grid.data.max()))


# numba kernels ----------------------------------------------------------------


@nb.njit(cache=True)
def _sample_nb(vol, lo, size, x, y, z):
    nz, ny, nx = vol.shape
    fx = (x - lo[0]) / size[0] * nx - 0.5
    fy = (y - lo[1]) / size[1] * ny - 0.5
    fz = (z - lo[2]) / size[2] * nz - 0.5
    fx = min(max(fx, 0.0), nx - 1.0)
    fy = min(max(fy, 0.0), ny - 1.0)
    fz = min(max(fz, 0.0), nz - 1.0)
    i0 = min(int(fx), max(nx - 2, 0))
    j0 = min(int(fy), max(ny - 2, 0))
    k0 = min(int(fz), max(nz - 2, 0))
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    k1 = min(k0 + 1, nz - 1)
    tx = fx - i0
    ty = fy - j0
    tz = fz - k0
    c00 = vol[k0, j0, i0] * (1.0 - tx) + vol[k0, j0, i1] * tx
    c10 = vol[k0, j1, i0] * (1.0 - tx) + vol[k0, j1, i1] * tx
    c01 = vol[k1, j0, i0] * (1.0 - tx) + vol[k1, j0, i1] * tx
    c11 = vol[k1, j1, i0] * (1.0 - tx) + vol[k1, j1, i1] * tx
    c0 = c00 * (1.0 - ty) + c10 * ty
    c1 = c01 * (1.0 - ty) + c11 * ty
    return c0 * (1.0 - tz) + c1 * tz


@nb.njit(cache=True)
def _tf_nb(pos, rgba, s):
    if s <= pos[0]:
        k = 0
        t = 0.0
    elif s >= pos[-1]:
        k = pos.size - 2
        t = 1.0
    else:
        k = 0
        while pos[k + 1] < s:
            k += 1
        t = (s - pos[k]) / (pos[k + 1] - pos[k])
    r = rgba[k, 0] + t * (rgba[k + 1, 0] - rgba[k, 0])
    g = rgba[k, 1] + t * (rgba[k + 1, 1] - rgba[k, 1])
    b = rgba[k, 2] + t * (rgba[k + 1, 2] - rgba[k, 2])
    a = rgba[k, 3] + t * (rgba[k + 1, 3] - rgba[k, 3])
    return r, g, b, a


@nb.njit(cache=True)
def classify_nb(M, x, y, z):
    """Scalar and RGBA albedo at a world point."""
    s = _sample_nb(M[0], M[1], M[2], x, y, z)
    r, g, b, a = _tf_nb(M[3], M[4], s)
    return s, r, g, b, a


@nb.njit(cache=True)
def sigma_nb(M, x, y, z):
    s = _sample_nb(M[0], M[1], M[2], x, y, z)
    return M[5] * _tf_nb(M[3], M[4], s)[3]


@nb.njit(cache=True)
def box_clip_nb(lo, size, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Clip ``[tmin, tmax]`` against the world box; empty when t0 > t1."""
    t0 = tmin
    t1 = tmax
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        lo_a = lo[a]
        hi_a = lo[a] + size[a]
        if d[a] == 0.0:
            if o[a] < lo_a or o[a] > hi_a:
                return 1.0, 0.0
            continue
        inv = 1.0 / d[a]
        ta = (lo_a - o[a]) * inv
        tb = (hi_a - o[a]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    return t0, t1


@nb.njit(cache=True)
def delta_track_nb(M, smax, ox, oy, oz, dx, dy, dz, tmin, tmax, st):
    """Distance to the first real collision, or -1.0 when the ray escapes."""
    if smax <= 0.0:
        return -1.0
    t0, t1 = box_clip_nb(M[1], M[2], ox, oy, oz, dx, dy, dz, tmin, tmax)
    if t0 >= t1:
        return -1.0
    t = t0
    while True:
        t -= math.log(1.0 - next_u01(st)) / smax
        if t >= t1:
            return -1.0
        s = sigma_nb(M, ox + t * dx, oy + t * dy, oz + t * dz)
        if next_u01(st) * smax < s:
            return t


@nb.njit(cache=True)
def transmittance_nb(M, smax, ax, ay, az, bx, by, bz, n_trials, st):
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    if length == 0.0:
        return 1.0
    dx /= length
    dy /= length
    dz /= length
    t0, t1 = box_clip_nb(M[1], M[2], ax, ay, az, dx, dy, dz, 0.0, length)
    if t0 >= t1 or smax <= 0.0:
        return 1.0
    passed = 0
    for _ in range(n_trials):
        if delta_track_nb(M, smax, ax, ay, az, dx, dy, dz, t0, t1, st) < 0.0:
            passed += 1
    return passed / n_trials


@nb.njit(parallel=True, cache=True)
def _delta_track_many(M, smax, origins, dirs, tmin, tmax, seed):
    n = origins.shape[0]
    out = np.empty(n)
    for i in nb.prange(n):
        st = make_state(seed, i, STREAM_MISC)
        out[i] = delta_track_nb(M, smax, origins[i, 0], origins[i, 1], origins[i, 2],
                                dirs[i, 0], dirs[i, 1], dirs[i, 2], tmin[i], tmax[i], st)
    return out


@nb.njit(parallel=True, cache=True)
def _transmittance_many(M, smax, a, b, n_trials, seed):
    n = a.shape[0]
    out = np.empty(n)
    for i in nb.prange(n):
        st = make_state(seed, i, STREAM_NEE)
        out[i] = transmittance_nb(M, smax, a[i, 0], a[i, 1], a[i, 2], b[i, 0], b[i, 1], b[i, 2],
                                  n_trials, st)
    return out


@nb.njit(parallel=True, cache=True)
def _sample_many(vol, lo, size, pts):
    out = np.empty(pts.shape[0])
    for i in nb.prange(pts.shape[0]):
        out[i] = _sample_nb(vol, lo, size, pts[i, 0], pts[i, 1], pts[i, 2])
    return out


# public operations ------------------------------------------------------------


def sample_scalar(grid, x):
    """Trilinear reconstruction; queries outside the box clamp to the boundary."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    lo = np.array(grid.world_box[0])
    size = np.array(grid.world_box[1]) - lo
    out = _sample_many(grid.array, lo, size, pts)
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else float(out[0])


def delta_track(grid, tf, ray, sigma_max, rng, density_scale=DEFAULT_DENSITY_SCALE):
    """First real interaction along ``ray`` or ``None`` if it leaves the medium.

    ``sigma_max`` must bound the extinction everywhere; ``0`` means vacuum.
    """
    if not isinstance(ray, Ray):
        raise InvalidInputError("delta_track expects a Ray")
    if not math.isfinite(sigma_max) or sigma_max < 0:
        raise InvalidInputError(f"invalid majorant {sigma_max}")
    med = Medium(grid, tf, density_scale)
    st = make_state(seed_from(rng), 0, STREAM_MISC)
    o, d = ray.origin, ray.direction
    t = delta_track_nb(med.args, float(sigma_max), float(o[0]), float(o[1]), float(o[2]),
                       float(d[0]), float(d[1]), float(d[2]), float(ray.t_min), float(ray.t_max), st)
    if t < 0:
        return None
    x = np.asarray(o) + t * np.asarray(d)
    s = sample_scalar(grid, x)
    return Interaction(position=x, scalar=s, albedo=tf(s), t=t)


def delta_track_batch(medium, origins, dirs, rng, t_min=0.0, t_max=np.inf, sigma_max=None):
    """Vectorised delta tracking; returns collision distances with NaN for escapes."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if not (np.all(np.isfinite(origins)) and np.all(np.isfinite(dirs))):
        raise InvalidInputError("non-finite ray parameters")
    n = origins.shape[0]
    tmin = np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)).copy()
    tmax = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)).copy()
    smax = medium.sigma_max if sigma_max is None else float(sigma_max)
    t = _delta_track_many(medium.args, smax, origins, dirs, tmin, tmax, seed_from(rng))
    t[t < 0] = np.nan
    return t


def transmittance(grid, tf, a, b, rng, n_trials, density_scale=DEFAULT_DENSITY_SCALE, sigma_max=None):
    """Fraction of ``n_trials`` delta-tracking flights crossing a->b without collision."""
    if int(n_trials) < 1:
        raise InvalidInputError("n_trials must be >= 1")
    med = Medium(grid, tf, density_scale)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("non-finite segment endpoints")
    smax = med.sigma_max if sigma_max is None else float(sigma_max)
    single = a.ndim == 1
    out = _transmittance_many(med.args, smax, a.reshape(-1, 3), b.reshape(-1, 3), int(n_trials),
                              seed_from(rng))
    return float(out[0]) if single else out


# file formats ----------------------------------------------------------------


def _meta_path(path):
    return Path(path).with_suffix(".meta")


def save_raw(grid, path):
    """Write little-endian float32 scalars plus a ``.meta`` key-value sidecar."""
    path = Path(path)
    path.write_bytes(grid.data.astype("<f4").tobytes())
    nx, ny, nz = grid.dims
    lo, hi = grid.world_box
    lines = [
        f"dims_x = {nx}", f"dims_y = {ny}", f"dims_z = {nz}",
        "value_min = 0.0", "value_max = 1.0",
        "box_min = " + " ".join(repr(v) for v in lo),
        "box_max = " + " ".join(repr(v) for v in hi),
    ]
    _meta_path(path).write_text("\n".join(lines) + "\n")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=") if "=" in line else line.partition(" ")
        meta[key.strip()] = value.strip()
    return meta


def load_raw(path, meta_path=None):
    """Load a raw volume, normalising with ``value_min``/``value_max`` if present."""
    path = Path(path)
    meta = read_meta(meta_path or _meta_path(path))
    try:
        dims = tuple(int(meta[k]) for k in ("dims_x", "dims_y", "dims_z"))
    except KeyError as exc:
        raise InvalidInputError(f"{path}: metadata lacks {exc.args[0]}") from None
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise InvalidInputError(f"{path}: {raw.size} values but dims {dims}")
    vmin = float(meta["value_min"]) if "value_min" in meta else float(raw.min())
    vmax = float(meta["value_max"]) if "value_max" in meta else float(raw.max())
    span = vmax - vmin
    data = np.clip((raw - vmin) / span, 0.0, 1.0) if span > 0 else np.zeros_like(raw)
    box = UNIT_BOX
    if "box_min" in meta and "box_max" in meta:
        box = (tuple(float(v) for v in meta["box_min"].split()), tuple(float(v) for v in meta["box_max"].split()))
    return VolumeGrid(dims, data, box)


def save_transfer_function(tf, path):
    lines = ["# scalar r g b a"]
    lines += [" ".join(repr(float(v)) for v in (p, *c)) for p, c in zip(tf.positions, tf.rgba)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transfer_function(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            vals = [float(v) for v in line.split()]
            if len(vals) != 5:
                raise InvalidInputError(f"{path}: expected 'scalar r g b a', got {line!r}")
            rows.append(vals)
    rows = np.array(rows)
    return TransferFunction(rows[:, 0], rows[:, 1:])
