"""Online training of a photon field from KNN radiance targets.

Each step draws a fresh batch: uniform positions in the volume box, uniform
directions on the sphere and a phase value from the set; targets are the
log-encoded density estimates at the radius the schedule allows for that step.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .estimator import EncodingConfig, encode_log, estimate_batch
from .neural_field import AdamState, QueryBatch, direction_to_sph, g_to_input, train_step
from .photons import DEFAULT_PHASE_SET, InvalidConfigError

SEGMENT_FRACTIONS = (0.36, 0.63, 0.90, 1.0)
DESK_RADII = (0.07, 0.08, 0.09, 0.1)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class KnnSchedule:
    """Ordered ``(end_fraction, radius)`` segments; the last fraction is 1."""

    segments: tuple[tuple[float, float], ...]

    def __post_init__(self):
        segs = tuple((float(f), float(r)) for f, r in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise InvalidConfigError("schedule needs at least one segment")
        fr = [f for f, _ in segs]
        rad = [r for _, r in segs]
        if fr[-1] != 1.0 or any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise InvalidConfigError(f"fractions must increase strictly in (0, 1] and end at 1: {fr}")
        if any(r <= 0 for r in rad) or any(b <= a for a, b in zip(rad, rad[1:])):
            raise InvalidConfigError(f"radii must be positive and strictly increasing: {rad}")

    @classmethod
    def staggered(cls, radii=DESK_RADII, fractions=SEGMENT_FRACTIONS):
        return cls(tuple(zip(fractions, radii)))

    @classmethod
    def single(cls, radius=DESK_RADII[-1]):
        return cls(((1.0, radius),))

    @property
    def final_radius(self):
        return self.segments[-1][1]

    def boundaries(self, total):
        """First step of each segment after the first."""
        starts = []
        for k in range(1, len(self.segments)):
            s = next((i for i in range(total) if schedule_radius(self, i, total) >= self.segments[k][1]), total)
            starts.append(s)
        return starts


def schedule_radius(s, step, total):
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    progress = (step + 1) / total
    for end, radius in s.segments:
        if end >= progress:
            return radius
    return s.segments[-1][1]


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 3000
    batch_size: int = 4096
    phase_set: tuple[float, ...] = DEFAULT_PHASE_SET
    schedule: KnnSchedule = dc_field(default_factory=KnnSchedule.staggered)
    K: int = 256
    psi: int = 5
    seed: int = 0
    lr: float = 9e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    decay: float = 0.92
    decay_start: float = 0.7
    decay_interval: int = 25
    cache_targets: bool = False  # benchmarking only: reuse the step-0 batch

    def __post_init__(self):
        object.__setattr__(self, "phase_set", tuple(float(g) for g in self.phase_set))
        if self.total_steps < 1 or self.batch_size < 1 or self.K < 1:
            raise InvalidConfigError("total_steps, batch_size and K must be >= 1")
        if not self.phase_set:
            raise InvalidConfigError("phase set must not be empty")

    @property
    def encoding(self):
        return EncodingConfig(self.psi)

    def adam(self, field):
        return AdamState.for_field(field, total_steps=self.total_steps, lr=self.lr, beta1=self.beta1,
                                   beta2=self.beta2, eps=self.eps, decay=self.decay, decay_start=self.decay_start,
                                   decay_interval=self.decay_interval)


def sample_directions(rng, n):
    z = 1.0 - 2.0 * rng.random(n)
    phi = 2.0 * np.pi * rng.random(n)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


@dataclass
class BatchInfo:
    knn_time: float
    radius: float
    clamped: int
    saturated: float  # fraction of queries that found exactly K photons


def _make_batch(pmap, cfg, step, rng, radius=None):
    n = cfg.batch_size
    gset = np.asarray(cfg.phase_set)
    missing = [g for g in gset if pmap.tag_of(g) < 0 and len(pmap)]
    if missing:
        raise InvalidConfigError(f"phase values {missing} are not in the photon map's set {pmap.phase_set}")
    if radius is None:
        radius = schedule_radius(cfg.schedule, step, cfg.total_steps)
    u = rng.random((n, 3))
    omega = sample_directions(rng, n)
    g = gset[rng.integers(0, gset.size, n)]
    box = pmap.photons.stats.get("world_box", ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    x = lo + u * (hi - lo)
    t0 = time.perf_counter()
    knn = pmap.query_batch(x, g, cfg.K, radius)
    L = estimate_batch(pmap.photons, knn, omega, g)
    knn_time = time.perf_counter() - t0
    targets, clamped = encode_log(L, cfg.encoding, return_clamped=True)
    batch = QueryBatch(u, np.ascontiguousarray(direction_to_sph(omega)), g_to_input(g))
    sat = float(np.mean(knn.counts == cfg.K)) if n else 0.0
    return batch, targets, BatchInfo(knn_time, radius, clamped, sat)


def make_batch(pmap, cfg, step, rng):
    """``(queries, targets)`` for one step; targets are log-encoded rgb in [0, 1]."""
    batch, targets, _ = _make_batch(pmap, cfg, step, rng)
    return batch, targets


def step_rng(seed, step):
    return np.random.default_rng([int(seed), int(step)])


@dataclass
class TrainResult:
    field: object
    loss_history: np.ndarray
    radius_history: np.ndarray
    timing: dict
    clamp_rate: float
    saturation: np.ndarray
    adam: AdamState


def train(field, pmap, cfg, adam=None, log_path=None, progress=None):
    """Run ``cfg.total_steps`` steps; returns a :class:`TrainResult`.

    ``timing`` holds ``knn_time`` (target generation) and ``step_time``
    (optimiser) as wall-clock sums, plus ``cpu_time`` and ``wall_time`` totals.
    """
    if field.psi != cfg.psi:
        raise InvalidConfigError(f"field psi={field.psi} differs from training psi={cfg.psi}")
    field.phase_set = tuple(cfg.phase_set)
    adam = cfg.adam(field) if adam is None else adam
    losses = np.empty(cfg.total_steps)
    radii = np.empty(cfg.total_steps)
    sat = np.empty(cfg.total_steps)
    knn_time = step_time = 0.0
    clamped = 0
    wall0, cpu0 = time.perf_counter(), time.process_time()
    cached = None
    log = None
    if log_path is not None:
        log = open(Path(log_path), "w", newline="")
        writer = csv.writer(log)
        writer.writerow(["step", "loss", "radius", "lr", "knn_time"])
    try:
        for step in range(cfg.total_steps):
            if cached is not None:
                batch, targets, info = cached
            else:
                batch, targets, info = _make_batch(pmap, cfg, step, step_rng(cfg.seed, step))
                knn_time += info.knn_time
                if cfg.cache_targets:
                    cached = (batch, targets, info)
            clamped += info.clamped
            lr = adam.current_lr()
            t0 = time.perf_counter()
            loss = train_step(field, batch, targets, adam)
            step_time += time.perf_counter() - t0
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at step {step} (radius {info.radius}, lr {lr})")
            losses[step] = loss
            radii[step] = info.radius
            sat[step] = info.saturated
            if log is not None:
                writer.writerow([step, repr(loss), repr(info.radius), repr(lr), repr(knn_time)])
            if progress is not None:
                progress(step, loss)
    finally:
        if log is not None:
            log.close()
    timing = {"knn_time": knn_time, "step_time": step_time, "wall_time": time.perf_counter() - wall0,
              "cpu_time": time.process_time() - cpu0}
    rate = clamped / (3.0 * cfg.batch_size * cfg.total_steps)
    return TrainResult(field, losses, radii, timing, rate, sat, adam)


def evaluation_loss(field, pmap, cfg, radius=None, n=None, seed=12345):
    """rMSE of ``field`` on a fixed batch with targets at ``radius`` (default: final)."""
    from .neural_field import rmse_loss

    radius = cfg.schedule.final_radius if radius is None else radius
    if n is not None:
        cfg = TrainConfig(**{**cfg.__dict__, "batch_size": n})
    batch, targets, _ = _make_batch(pmap, cfg, 0, np.random.default_rng(seed), radius=radius)
    return rmse_loss(field.forward(batch), targets)
