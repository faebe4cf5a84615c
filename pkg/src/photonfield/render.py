"""Wavefront renderers sharing one first-interaction and direct-light stage.

Stages run as batch passes over flat sample buffers:

1. ray generation at pixel centres,
2. ``spp`` delta-tracked first interactions per ray,
3. compaction of the samples that interacted,
4. direct light by next-event estimation toward every point light,
5. the indirect term (field inference, photon density estimate or a full
   random walk), then composition.

Each sample draws from streams keyed by its global index ``pixel * spp + k``,
so images do not depend on tile size or thread count.

Composition is ``L = mean_k(w_d * L_d + w_i * sigma_s * L_i)`` with
``sigma_s = alpha * mean(rgb)``.  The renderers use ``w_d = w_i = 1``: with
point lights phase sampling can never hit the light, so the balance
heuristic gives NEE full weight, and ``L_i`` only holds indirect light.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numba as nb
import numpy as np

from ._rng import STREAM_NEE, STREAM_PATH, STREAM_SAMPLE, make_state, next_u01, seed_from
from .estimator import EncodingConfig, decode_log, estimate_batch
from .neural_field import QueryBatch
from .phase import hg_eval_nb, hg_sample_nb
from .photons import InvalidConfigError, LightSource
from .volume import (DEFAULT_DENSITY_SCALE, InvalidInputError, Medium, TransferFunction, VolumeGrid,
                     box_clip_nb, classify_nb, delta_track_nb, sigma_nb, transmittance_nb)

TILE_PIXELS = 4096


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    fov_y: float = math.radians(40.0)
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0 < self.fov_y < math.pi:
            raise InvalidInputError("fov_y must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image dimensions must be positive")
        f = np.subtract(self.look_at, self.position)
        if np.linalg.norm(f) == 0 or np.linalg.norm(np.cross(f, self.up)) == 0:
            raise InvalidInputError("camera forward must be non-zero and not parallel to up")

    @property
    def n_pixels(self):
        return self.width * self.height

    def generate_rays(self):
        """Origins and unit directions through pixel centres, row-major from the top row."""
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        th = math.tan(0.5 * self.fov_y)
        aspect = self.width / self.height
        j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
        u = ((j + 0.5) / self.width * 2.0 - 1.0) * th * aspect
        v = (1.0 - (i + 0.5) / self.height * 2.0) * th
        d = fwd + u.reshape(-1, 1) * right + v.reshape(-1, 1) * up
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(np.asarray(self.position, dtype=np.float64), d.shape).copy()
        return o, np.ascontiguousarray(d)


@dataclass(eq=False)
class Scene:
    grid: VolumeGrid
    tf: TransferFunction
    lights: tuple[LightSource, ...] = ()
    density_scale: float = DEFAULT_DENSITY_SCALE
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.lights = tuple(self.lights)
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (3,) or not np.all(np.isfinite(bg)) or np.any(bg < 0):
            raise InvalidInputError("background must be a finite non-negative rgb triple")
        self.background = tuple(float(v) for v in bg)

    @cached_property
    def medium(self):
        return Medium(self.grid, self.tf, self.density_scale)

    def light_arrays(self):
        if not self.lights:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (np.array([l.position for l in self.lights], dtype=np.float64),
                np.array([l.intensity for l in self.lights], dtype=np.float64))

    def to_unit(self, x):
        lo, hi = (np.asarray(v, dtype=np.float64) for v in self.grid.world_box)
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class FrameBuffer:
    """Per-pixel rgb sums and sample counts; ``image`` is their ratio."""

    width: int
    height: int
    rgb: np.ndarray
    counts: np.ndarray
    direct: np.ndarray | None = None
    indirect: np.ndarray | None = None
    timings: dict = dc_field(default_factory=dict)

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, np.zeros((height, width, 3)), np.zeros((height, width), np.int64))

    @property
    def image(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts[..., None] > 0, self.rgb / np.maximum(self.counts, 1)[..., None], 0.0)


@dataclass
class ComposeInputs:
    """Per-ray sample buffers of shape (rays, spp[, 3]); ``hit`` marks interacting samples."""

    L_d: np.ndarray
    L_i_pred: np.ndarray
    sigma_s: np.ndarray
    w_d: np.ndarray
    w_i: np.ndarray
    spp: int
    hit: np.ndarray | None = None
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


def compose(inputs: ComposeInputs):
    """Average ``w_d * L_d + w_i * sigma_s * L_i`` over samples; misses give the background."""
    L_d = np.asarray(inputs.L_d, dtype=np.float64)
    if L_d.ndim == 2:
        L_d = L_d[None]
    rays, spp = L_d.shape[:2]
    if spp != inputs.spp or spp < 1:
        raise InvalidInputError(f"buffers hold {spp} samples per ray but spp={inputs.spp}")
    L_i = np.asarray(inputs.L_i_pred, dtype=np.float64).reshape(rays, spp, 3)
    sig = np.broadcast_to(np.asarray(inputs.sigma_s, dtype=np.float64), (rays, spp))
    w_d = np.broadcast_to(np.asarray(inputs.w_d, dtype=np.float64), (rays, spp))
    w_i = np.broadcast_to(np.asarray(inputs.w_i, dtype=np.float64), (rays, spp))
    if np.any(w_d < 0) or np.any(w_i < 0) or np.any(w_d > 1) or np.any(w_i > 1):
        raise InvalidInputError("MIS weights must lie in [0, 1]")
    hit = np.ones((rays, spp), bool) if inputs.hit is None else np.asarray(inputs.hit, bool).reshape(rays, spp)
    per = w_d[..., None] * L_d + w_i[..., None] * sig[..., None] * L_i
    per = np.where(hit[..., None], per, np.asarray(inputs.background, dtype=np.float64))
    return per.sum(axis=1) / spp


# kernels ---------------------------------------------------------------------------


@nb.njit(parallel=True, cache=True)
def _first_hits(M, smax, origins, dirs, pix0, spp, seed, t_out):
    for i in nb.prange(origins.shape[0]):
        for k in range(spp):
            st = make_state(seed, (pix0 + i) * spp + k, STREAM_SAMPLE)
            t_out[i, k] = delta_track_nb(M, smax, origins[i, 0], origins[i, 1], origins[i, 2],
                                         dirs[i, 0], dirs[i, 1], dirs[i, 2], 0.0, np.inf, st)


@nb.njit(cache=True)
def _nee_nb(M, smax, x, y, z, dx, dy, dz, g, lpos, lint, n_trials, st):
    """Unweighted in-scattered direct radiance from all point lights."""
    r = 0.0
    gg = 0.0
    b = 0.0
    for l in range(lpos.shape[0]):
        vx = lpos[l, 0] - x
        vy = lpos[l, 1] - y
        vz = lpos[l, 2] - z
        d2 = vx * vx + vy * vy + vz * vz
        if d2 == 0.0:
            continue
        inv = 1.0 / math.sqrt(d2)
        cos = (dx * vx + dy * vy + dz * vz) * inv
        tr = transmittance_nb(M, smax, x, y, z, lpos[l, 0], lpos[l, 1], lpos[l, 2], n_trials, st)
        f = hg_eval_nb(g, cos) * tr / d2
        r += f * lint[l, 0]
        gg += f * lint[l, 1]
        b += f * lint[l, 2]
    return r, gg, b


@nb.njit(parallel=True, cache=True)
def _shade_first(M, smax, pos, dirs, sid, g, lpos, lint, n_trials, seed, rho, sig_s, L_d):
    for i in nb.prange(pos.shape[0]):
        _, r, gg, b, a = classify_nb(M, pos[i, 0], pos[i, 1], pos[i, 2])
        rho[i, 0] = a * r
        rho[i, 1] = a * gg
        rho[i, 2] = a * b
        sig_s[i] = a * (r + gg + b) / 3.0
        st = make_state(seed, sid[i], STREAM_NEE)
        lr, lg, lb = _nee_nb(M, smax, pos[i, 0], pos[i, 1], pos[i, 2], dirs[i, 0], dirs[i, 1], dirs[i, 2],
                             g, lpos, lint, n_trials, st)
        L_d[i, 0] = rho[i, 0] * lr
        L_d[i, 1] = rho[i, 1] * lg
        L_d[i, 2] = rho[i, 2] * lb


@nb.njit(parallel=True, cache=True)
def _random_walk(M, smax, pos, dirs, rho, sid, g, lpos, lint, n_trials, max_bounces, rr_start, rr_min, rr_max,
                 bg, seed, out):
    for i in nb.prange(pos.shape[0]):
        st = make_state(seed, sid[i], STREAM_PATH)
        x, y, z = pos[i, 0], pos[i, 1], pos[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        br, bg_, bb = rho[i, 0], rho[i, 1], rho[i, 2]
        ar = 0.0
        ag = 0.0
        ab = 0.0
        bounce = 1
        while bounce < max_bounces:
            dx, dy, dz = hg_sample_nb(g, dx, dy, dz, next_u01(st), next_u01(st))
            t = delta_track_nb(M, smax, x, y, z, dx, dy, dz, 0.0, np.inf, st)
            if t < 0.0:
                ar += br * bg[0]
                ag += bg_ * bg[1]
                ab += bb * bg[2]
                break
            x += t * dx
            y += t * dy
            z += t * dz
            _, r, gg, b, a = classify_nb(M, x, y, z)
            lr, lg, lb = _nee_nb(M, smax, x, y, z, dx, dy, dz, g, lpos, lint, n_trials, st)
            br *= a * r
            bg_ *= a * gg
            bb *= a * b
            ar += br * lr
            ag += bg_ * lg
            ab += bb * lb
            bounce += 1
            if bounce >= rr_start:
                q = min(max(max(br, max(bg_, bb)), rr_min), rr_max)
                if next_u01(st) >= q:
                    break
                br /= q
                bg_ /= q
                bb /= q
        out[i, 0] = ar
        out[i, 1] = ag
        out[i, 2] = ab


@nb.njit(parallel=True, cache=True)
def _ray_march(M, origins, dirs, step, offsets, light, bg, out):
    lo = M[1]
    size = M[2]
    ds = M[5]
    for i in nb.prange(origins.shape[0]):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        t0, t1 = box_clip_nb(lo, size, ox, oy, oz, dx, dy, dz, 0.0, np.inf)
        trans = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        if t0 < t1:
            t = t0 + offsets[i] * step
            while t < t1 and trans > 1e-6:
                x = ox + t * dx
                y = oy + t * dy
                z = oz + t * dz
                _, r, gg, b, a = classify_nb(M, x, y, z)
                if a > 0.0:
                    alpha = 1.0 - math.exp(-ds * a * step)
                    # fixed-step shadow ray toward the light
                    lx = light[0] - x
                    ly = light[1] - y
                    lz = light[2] - z
                    ln = math.sqrt(lx * lx + ly * ly + lz * lz)
                    vis = 1.0
                    if ln > 0.0:
                        lx /= ln
                        ly /= ln
                        lz /= ln
                        s0, s1 = box_clip_nb(lo, size, x, y, z, lx, ly, lz, 0.0, ln)
                        tau = 0.0
                        s = max(s0, 0.0) + step
                        while s < s1:
                            tau += sigma_nb(M, x + s * lx, y + s * ly, z + s * lz) * step
                            s += step
                        vis = math.exp(-tau)
                    w = trans * alpha * vis
                    cr += w * r
                    cg += w * gg
                    cb += w * b
                    trans *= 1.0 - alpha
                t += step
        out[i, 0] = cr + trans * bg[0]
        out[i, 1] = cg + trans * bg[1]
        out[i, 2] = cb + trans * bg[2]


# shared stages ------------------------------------------------------------------


@dataclass
class _Samples:
    """Compacted first interactions of one tile."""

    pixel: np.ndarray  # global pixel index
    sid: np.ndarray  # global sample index
    pos: np.ndarray
    dirs: np.ndarray
    rho: np.ndarray
    sigma_s: np.ndarray
    L_d: np.ndarray


def _check_common(scene, camera, spp):
    if int(spp) < 1:
        raise InvalidInputError(f"spp must be >= 1, got {spp}")
    if not isinstance(camera, Camera):
        raise InvalidInputError("camera must be a Camera")


def _tiles(camera, tile_pixels):
    o, d = camera.generate_rays()
    for p0 in range(0, camera.n_pixels, tile_pixels):
        p1 = min(p0 + tile_pixels, camera.n_pixels)
        yield p0, o[p0:p1], d[p0:p1]


def _first_stage(scene, p0, o, d, spp, g, seed, n_trials):
    med = scene.medium
    smax = med.sigma_max
    t = np.empty((o.shape[0], spp))
    _first_hits(med.args, smax, o, d, p0, spp, seed, t)
    hit = t >= 0.0
    ray_i, k = np.nonzero(hit)
    pos = np.ascontiguousarray(o[ray_i] + t[ray_i, k][:, None] * d[ray_i])
    dirs = np.ascontiguousarray(d[ray_i])
    sid = ((p0 + ray_i) * spp + k).astype(np.int64)
    n = pos.shape[0]
    rho = np.empty((n, 3))
    sig = np.empty(n)
    L_d = np.empty((n, 3))
    lpos, lint = scene.light_arrays()
    if n:
        _shade_first(med.args, smax, pos, dirs, sid, float(g), lpos, lint, int(n_trials), seed, rho, sig, L_d)
    return hit, _Samples(p0 + ray_i, sid, pos, dirs, rho, sig, L_d)


def _accumulate(fb, p0, hit, s, sigma_s, L_i, bg, spp):
    """Scatter compacted samples back to (rays, spp) buffers and compose them."""
    n_rays = hit.shape[0]
    ray_i, k = s.pixel - p0, s.sid - s.pixel * spp
    L_d = np.zeros((n_rays, spp, 3))
    Li = np.zeros((n_rays, spp, 3))
    sig = np.zeros((n_rays, spp))
    L_d[ray_i, k] = s.L_d
    Li[ray_i, k] = L_i
    sig[ray_i, k] = sigma_s
    one = np.ones((n_rays, spp))
    zero = np.zeros((n_rays, spp))
    total = compose(ComposeInputs(L_d, Li, sig, one, one, spp, hit, bg))
    direct = compose(ComposeInputs(L_d, Li, sig, one, zero, spp, hit))
    indirect = compose(ComposeInputs(L_d, Li, sig, zero, one, spp, hit))
    rows, cols = np.divmod(np.arange(p0, p0 + n_rays), fb.width)
    fb.rgb[rows, cols] += total * spp
    fb.counts[rows, cols] += spp
    fb.direct[rows, cols] += direct
    fb.indirect[rows, cols] += indirect


def _new_fb(camera):
    fb = FrameBuffer.empty(camera.width, camera.height)
    fb.direct = np.zeros_like(fb.rgb)
    fb.indirect = np.zeros_like(fb.rgb)
    return fb


def _render_lit(scene, camera, spp, g, rng, n_trials, tile_pixels, indirect_fn, stage_name):
    _check_common(scene, camera, spp)
    if not scene.lights:
        raise InvalidConfigError("lit backends need at least one light")
    seed = seed_from(rng)
    fb = _new_fb(camera)
    t_first = t_ind = 0.0
    for p0, o, d in _tiles(camera, tile_pixels):
        t0 = time.perf_counter()
        hit, s = _first_stage(scene, p0, o, d, int(spp), g, seed, n_trials)
        t1 = time.perf_counter()
        if s.pos.shape[0]:
            sigma_s, L_i = indirect_fn(s, seed)
        else:
            sigma_s, L_i = s.sigma_s, np.zeros((0, 3))
        t2 = time.perf_counter()
        _accumulate(fb, p0, hit, s, sigma_s, L_i, scene.background, int(spp))
        t_first += t1 - t0
        t_ind += t2 - t1
    fb.timings = {"first_stage": t_first, stage_name: t_ind}
    return fb


# backends ---------------------------------------------------------------------------


def render_neural(scene, field, cfg, camera, spp, rng, g=0.0, n_trials=1, tile_pixels=TILE_PIXELS):
    """Neural backend: ``L_i`` from one batched field inference per sample."""
    if field.trained_steps < 1:
        raise InvalidConfigError("photon field has not been trained")
    if cfg.psi != field.psi:
        raise InvalidConfigError(f"encoding psi={cfg.psi} does not match the field's psi={field.psi}")

    def infer(s, seed):
        q = QueryBatch.from_world(scene.to_unit(s.pos), -s.dirs, g)
        return s.sigma_s, decode_log(field.forward(q), cfg)

    return _render_lit(scene, camera, spp, g, rng, n_trials, tile_pixels, infer, "inference")


def render_photon_map(scene, pmap, camera, spp, K, r_max, g, rng, n_trials=1, tile_pixels=TILE_PIXELS):
    """Photon-map backend: identical to :func:`render_neural` except ``L_i`` is the KNN estimate."""
    if len(pmap) and pmap.tag_of(g) < 0:
        raise InvalidConfigError(f"g={g} is not in the photon map's phase set {pmap.phase_set}")

    def estimate(s, seed):
        knn = pmap.query_batch(s.pos, g, K, r_max)
        return s.sigma_s, estimate_batch(pmap.photons, knn, -s.dirs, g)

    return _render_lit(scene, camera, spp, g, rng, n_trials, tile_pixels, estimate, "estimate")


def render_path_traced(scene, camera, spp, max_bounces=16, rng=None, g=0.0, n_trials=1, rr_start_bounce=3,
                       rr_min=0.05, rr_max=0.95, tile_pixels=TILE_PIXELS):
    """Reference volumetric path tracer; the ``indirect`` timing covers bounces after the first."""
    if int(max_bounces) < 1:
        raise InvalidInputError("max_bounces must be >= 1")
    med = scene.medium
    lpos, lint = scene.light_arrays()
    bg = np.asarray(scene.background, dtype=np.float64)

    def walk(s, seed):
        out = np.empty((s.pos.shape[0], 3))
        _random_walk(med.args, med.sigma_max, s.pos, s.dirs, s.rho, s.sid, float(g), lpos, lint, int(n_trials),
                     int(max_bounces), int(rr_start_bounce), float(rr_min), float(rr_max), bg, seed, out)
        # the walk already carries the per-channel albedo, so it enters with sigma_s = 1
        return np.ones(out.shape[0]), out

    return _render_lit(scene, camera, spp, g, 0 if rng is None else rng, n_trials, tile_pixels, walk, "indirect")


def render_ray_march(scene, camera, step_size, rng=None, jitter=False):
    """Emission-absorption ray marcher with fixed-step shadows toward the first light."""
    if not step_size > 0:
        raise InvalidInputError("step_size must be > 0")
    o, d = camera.generate_rays()
    n = o.shape[0]
    offsets = np.full(n, 0.5)
    if jitter:
        offsets = np.random.default_rng(seed_from(rng if rng is not None else 0)).random(n)
    light = np.asarray(scene.lights[0].position if scene.lights else (0.0, 0.0, 1e9), dtype=np.float64)
    out = np.empty((n, 3))
    t0 = time.perf_counter()
    _ray_march(scene.medium.args, o, d, float(step_size), offsets, light,
               np.asarray(scene.background, dtype=np.float64), out)
    fb = FrameBuffer.empty(camera.width, camera.height)
    fb.rgb[:] = out.reshape(camera.height, camera.width, 3)
    fb.counts[:] = 1
    fb.timings = {"march": time.perf_counter() - t0}
    return fb
