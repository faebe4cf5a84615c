"""Multi-phase photon tracing through a heterogeneous medium.

Each emitted photon carries one anisotropy tag ``g`` drawn (stratified) from
the phase set.  Photons random-walk by delta tracking and HG scattering; a
record is stored at every interaction except the first, so the map holds
indirect light only.

Stored power is normalised per unit collision density::

    power = I * Omega / n_lg * throughput / (sigma_t(x) * sigma_s(x))

``I * Omega / n_lg`` is the flux of one photon (``Omega`` is the emission
cone, ``n_lg`` the photon count for that light and phase), ``throughput``
already includes the albedo at ``x``, ``sigma_t = density_scale * alpha`` and
``sigma_s = alpha * mean(rgb)``.  With this weighting the density estimate
times ``sigma_s`` at a camera collision has the same scale as the direct term.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from ._rng import STREAM_TRACE, make_state, next_u01, seed_from
from .phase import hg_sample_nb
from .volume import InvalidInputError, classify_nb, delta_track_nb

PHOTON_MAGIC = b"PFPM"
PHOTON_VERSION = 1
RECORD_DTYPE = np.dtype([("position", "<f4", (3,)), ("direction", "<f4", (3,)),
                         ("power", "<f4", (3,)), ("g_index", "u1")])
DEFAULT_PHASE_SET = (-0.75, 0.0, 0.75)


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LightSource:
    """Isotropic point light; ``intensity`` is radiant intensity per steradian (rgb)."""

    position: tuple[float, float, float]
    intensity: tuple[float, float, float]

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        i = np.asarray(self.intensity, dtype=np.float64)
        if p.shape != (3,) or i.shape != (3,) or not (np.all(np.isfinite(p)) and np.all(np.isfinite(i))):
            raise InvalidConfigError("light position and intensity must be finite 3-vectors")
        if np.any(i < 0):
            raise InvalidConfigError("light intensity must be non-negative")
        object.__setattr__(self, "position", tuple(float(v) for v in p))
        object.__setattr__(self, "intensity", tuple(float(v) for v in i))


@dataclass(frozen=True)
class TraceConfig:
    n_total: int
    phase_set: tuple[float, ...] = DEFAULT_PHASE_SET
    max_bounces: int = 16
    rr_start_bounce: int = 3
    rr_min: float = 0.05
    rr_max: float = 0.95
    seed: int = 0
    chunk: int = 16384

    def __post_init__(self):
        gs = tuple(float(g) for g in self.phase_set)
        object.__setattr__(self, "phase_set", gs)
        if not gs:
            raise InvalidConfigError("phase set must not be empty")
        if len(set(gs)) != len(gs) or any(abs(g) > 1 for g in gs) or len(gs) > 255:
            raise InvalidConfigError(f"phase set must hold distinct values in [-1, 1]: {gs}")
        if self.n_total < 0 or self.max_bounces < 1:
            raise InvalidConfigError("n_total must be >= 0 and max_bounces >= 1")
        if not 0 < self.rr_min <= self.rr_max <= 1:
            raise InvalidConfigError("need 0 < rr_min <= rr_max <= 1")


@dataclass(frozen=True)
class Photon:
    position: np.ndarray
    direction: np.ndarray
    power: np.ndarray
    g: float


@dataclass(eq=False)
class Photons:
    """Struct-of-arrays photon list; ``g_index`` indexes ``phase_set``."""

    positions: np.ndarray
    directions: np.ndarray
    power: np.ndarray
    g_index: np.ndarray
    phase_set: tuple[float, ...]
    bounce: np.ndarray | None = None
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return self.positions.shape[0]

    def __getitem__(self, i):
        return Photon(self.positions[i], self.directions[i], self.power[i], self.phase_set[self.g_index[i]])

    @property
    def g(self):
        return np.asarray(self.phase_set)[self.g_index]

    @classmethod
    def empty(cls, phase_set=DEFAULT_PHASE_SET):
        z = np.zeros((0, 3))
        return cls(z, z.copy(), z.copy(), np.zeros(0, np.uint8), tuple(phase_set), np.zeros(0, np.uint8))

    @classmethod
    def from_list(cls, photons, phase_set):
        phase_set = tuple(float(g) for g in phase_set)
        if not photons:
            return cls.empty(phase_set)
        idx = {g: k for k, g in enumerate(phase_set)}
        return cls(np.array([p.position for p in photons], dtype=np.float64),
                   np.array([p.direction for p in photons], dtype=np.float64),
                   np.array([p.power for p in photons], dtype=np.float64),
                   np.array([idx[float(p.g)] for p in photons], dtype=np.uint8), phase_set)


def bounding_sphere(world_box):
    lo, hi = np.asarray(world_box[0], float), np.asarray(world_box[1], float)
    return 0.5 * (lo + hi), 0.5 * float(np.linalg.norm(hi - lo))


@nb.njit(cache=True)
def emit_nb(px, py, pz, cx, cy, cz, radius, u1, u2):
    """Direction from a light toward the bounding sphere, plus the cone solid angle."""
    ax, ay, az = cx - px, cy - py, cz - pz
    d = math.sqrt(ax * ax + ay * ay + az * az)
    phi = 2.0 * math.pi * u2
    if d <= radius:
        c = 1.0 - 2.0 * u1
        s = math.sqrt(max(0.0, 1.0 - c * c))
        return s * math.cos(phi), s * math.sin(phi), c, 4.0 * math.pi
    ax /= d
    ay /= d
    az /= d
    sin_max = radius / d
    cos_max = math.sqrt(max(0.0, 1.0 - sin_max * sin_max))
    c = 1.0 - u1 * (1.0 - cos_max)
    s = math.sqrt(max(0.0, 1.0 - c * c))
    sign = math.copysign(1.0, az)
    a = -1.0 / (sign + az)
    b = ax * ay * a
    tx, ty, tz = 1.0 + sign * ax * ax * a, sign * b, -sign * ax
    sx, sy, sz = b, sign + ay * ay * a, -ay
    cp = math.cos(phi) * s
    sp = math.sin(phi) * s
    ox = cp * tx + sp * sx + c * ax
    oy = cp * ty + sp * sy + c * ay
    oz = cp * tz + sp * sz + c * az
    n = math.sqrt(ox * ox + oy * oy + oz * oz)
    return ox / n, oy / n, oz / n, 2.0 * math.pi * (1.0 - cos_max)


def emission_cone(light, world_box):
    """``(axis, half_angle, solid_angle)`` of the cone toward the bounding sphere."""
    c, r = bounding_sphere(world_box)
    v = c - np.asarray(light.position)
    d = float(np.linalg.norm(v))
    if d <= r:
        return None, math.pi, 4.0 * math.pi
    half = math.asin(r / d)
    return v / d, half, 2.0 * math.pi * (1.0 - math.cos(half))


def emit_direction(light, world_box, rng):
    """Uniform direction over the solid angle of the box's bounding sphere.

    Lights inside that sphere emit uniformly over all directions.
    """
    c, r = bounding_sphere(world_box)
    p = light.position
    u1, u2 = rng.random(2)
    x, y, z, _ = emit_nb(p[0], p[1], p[2], c[0], c[1], c[2], r, u1, u2)
    return np.array([x, y, z])


@nb.njit(parallel=True, cache=True)
def _trace_chunk(M, smax, start, count, n_combo, n_phase, light_pos, prefactor, gvals,
                 center, radius, max_bounces, rr_start, rr_min, rr_max, seed,
                 out_pos, out_dir, out_pow, out_g, out_b, n_dep, raw_flux):
    for i in nb.prange(count):
        idx = start + i
        combo = idx % n_combo
        li = combo // n_phase
        gi = combo % n_phase
        g = gvals[gi]
        st = make_state(seed, idx, STREAM_TRACE)
        u1 = next_u01(st)
        u2 = next_u01(st)
        dx, dy, dz, _ = emit_nb(light_pos[li, 0], light_pos[li, 1], light_pos[li, 2],
                                center[0], center[1], center[2], radius, u1, u2)
        ox, oy, oz = light_pos[li, 0], light_pos[li, 1], light_pos[li, 2]
        pr, pg, pb = prefactor[combo, 0], prefactor[combo, 1], prefactor[combo, 2]
        br = 1.0
        bg = 1.0
        bb = 1.0
        fr = 0.0
        fg = 0.0
        fb = 0.0
        bounces = 0
        nd = 0
        base = i * max_bounces
        while bounces < max_bounces:
            t = delta_track_nb(M, smax, ox, oy, oz, dx, dy, dz, 0.0, np.inf, st)
            if t < 0.0:
                break  # left the volume
            ox = ox + t * dx
            oy = oy + t * dy
            oz = oz + t * dz
            dx, dy, dz = hg_sample_nb(g, dx, dy, dz, next_u01(st), next_u01(st))
            _, r, gg, b, a = classify_nb(M, ox, oy, oz)
            br *= a * r
            bg *= a * gg
            bb *= a * b
            if bounces >= 1:  # skip first interaction
                den = M[5] * a * a * (r + gg + b) / 3.0
                if den > 0.0:
                    k = base + nd
                    out_pos[k, 0] = ox
                    out_pos[k, 1] = oy
                    out_pos[k, 2] = oz
                    out_dir[k, 0] = dx
                    out_dir[k, 1] = dy
                    out_dir[k, 2] = dz
                    out_pow[k, 0] = pr * br / den
                    out_pow[k, 1] = pg * bg / den
                    out_pow[k, 2] = pb * bb / den
                    out_g[k] = gi
                    out_b[k] = bounces
                    fr += pr * br
                    fg += pg * bg
                    fb += pb * bb
                    nd += 1
            bounces += 1
            if bounces >= rr_start:
                q = min(max(max(br, max(bg, bb)), rr_min), rr_max)
                if next_u01(st) >= q:
                    break
                br /= q
                bg /= q
                bb /= q
        n_dep[i] = nd
        raw_flux[i, 0] = fr
        raw_flux[i, 1] = fg
        raw_flux[i, 2] = fb


def emission_counts(n_total, n_lights, n_phases):
    """Photons per (light, phase) combination; round-robin so counts differ by <= 1."""
    c = n_lights * n_phases
    counts = np.full(c, n_total // c, dtype=np.int64)
    counts[: n_total % c] += 1
    return counts.reshape(n_lights, n_phases)


def trace_photons(medium, lights, cfg, rng=None):
    """Trace ``cfg.n_total`` photons; returns the deposited (indirect) photons.

    Photon ``i`` is emitted by combination ``i % (|lights| * |G|)`` and uses
    the random stream ``(seed, i)``, so the output is independent of the
    worker count.  ``rng`` overrides ``cfg.seed`` when given.
    """
    lights = list(lights)
    if not lights:
        raise InvalidConfigError("at least one light is required")
    seed = cfg.seed if rng is None else seed_from(rng)
    n_l, n_g = len(lights), len(cfg.phase_set)
    counts = emission_counts(cfg.n_total, n_l, n_g)
    box = medium.grid.world_box
    center, radius = bounding_sphere(box)
    light_pos = np.array([l.position for l in lights], dtype=np.float64)
    omega = np.array([emission_cone(l, box)[2] for l in lights])
    intensity = np.array([l.intensity for l in lights], dtype=np.float64)
    flux = intensity * omega[:, None]  # per light
    with np.errstate(divide="ignore", invalid="ignore"):
        pref = np.where(counts[..., None] > 0, flux[:, None, :] / counts[..., None], 0.0)
    pref = np.ascontiguousarray(pref.reshape(n_l * n_g, 3))
    gvals = np.array(cfg.phase_set, dtype=np.float64)

    chunks = []
    raw = np.zeros((n_g, 3))
    mb = int(cfg.max_bounces)
    for start in range(0, cfg.n_total, cfg.chunk):
        count = min(cfg.chunk, cfg.n_total - start)
        pos = np.empty((count * mb, 3))
        dirs = np.empty((count * mb, 3))
        pw = np.empty((count * mb, 3))
        gi = np.empty(count * mb, np.uint8)
        bo = np.empty(count * mb, np.uint8)
        nd = np.empty(count, np.int64)
        rf = np.empty((count, 3))
        _trace_chunk(medium.args, medium.sigma_max, start, count, n_l * n_g, n_g, light_pos, pref, gvals,
                     center, radius, mb, int(cfg.rr_start_bounce), float(cfg.rr_min), float(cfg.rr_max),
                     seed, pos, dirs, pw, gi, bo, nd, rf)
        keep = (np.arange(mb)[None, :] < nd[:, None]).ravel()
        chunks.append((pos[keep], dirs[keep], pw[keep], gi[keep], bo[keep]))
        combo_g = (start + np.arange(count)) % (n_l * n_g) % n_g
        for k in range(n_g):
            raw[k] += rf[combo_g == k].sum(axis=0)

    if chunks:
        pos, dirs, pw, gi, bo = (np.concatenate(parts) for parts in zip(*chunks))
    else:
        e = Photons.empty(cfg.phase_set)
        pos, dirs, pw, gi, bo = e.positions, e.directions, e.power, e.g_index, e.bounce
    stats = {
        "emitted_counts": counts,
        "emitted_flux_per_phase": np.array([flux[counts[:, k] > 0].sum(axis=0) for k in range(n_g)]),
        "deposited_flux_per_phase": raw,
        "solid_angles": omega,
        "world_box": box,
    }
    return Photons(pos, dirs, pw, gi, tuple(cfg.phase_set), bo, stats)


# persistence -------------------------------------------------------------------


def save_photons(photons, path):
    """Binary photon map: header then packed 37-byte little-endian records.

    Header: magic ``b"PFPM"``, u32 version, u64 count, u32 |G|, |G| x f64 phase values.
    Record: position 3 x f32, direction 3 x f32, power 3 x f32, g-index u8.
    """
    n = len(photons)
    header = PHOTON_MAGIC + struct.pack("<IQI", PHOTON_VERSION, n, len(photons.phase_set))
    header += struct.pack(f"<{len(photons.phase_set)}d", *photons.phase_set)
    rec = np.empty(n, dtype=RECORD_DTYPE)
    rec["position"] = photons.positions
    rec["direction"] = photons.directions
    rec["power"] = photons.power
    rec["g_index"] = photons.g_index
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_photons(path):
    buf = Path(path).read_bytes()
    if buf[:4] != PHOTON_MAGIC:
        raise InvalidInputError(f"{path}: not a photon map file")
    version, n, ng = struct.unpack_from("<IQI", buf, 4)
    if version != PHOTON_VERSION:
        raise InvalidInputError(f"{path}: unsupported photon map version {version}")
    off = 4 + struct.calcsize("<IQI")
    gs = struct.unpack_from(f"<{ng}d", buf, off)
    off += 8 * ng
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=n, offset=off)
    return Photons(rec["position"].astype(np.float64), rec["direction"].astype(np.float64),
                   rec["power"].astype(np.float64), rec["g_index"].copy(), tuple(gs))
