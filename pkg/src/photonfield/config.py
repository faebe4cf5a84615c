"""YAML experiment configuration with full defaults and lossless round-trip."""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .photons import DEFAULT_PHASE_SET, InvalidConfigError, LightSource, TraceConfig


@dataclass
class SyntheticSpec:
    kind: str = "slab"
    dims: tuple[int, int, int] = (64, 64, 64)
    params: dict = field(default_factory=dict)


@dataclass
class LightSpec:
    position: tuple[float, float, float] = (0.5, 0.5, 1.6)
    intensity: tuple[float, float, float] = (10.0, 10.0, 10.0)


@dataclass
class SceneSpec:
    volume: str | None = None  # .raw file with .meta sidecar; overrides ``synthetic``
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    transfer_function: str | None = None  # text file; default is an occupancy ramp
    albedo: float = 0.9
    lights: list[LightSpec] = field(default_factory=lambda: [LightSpec()])
    density_scale: float = 10.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class TraceSpec:
    n_total: int = 200_000
    phase_set: tuple[float, ...] = DEFAULT_PHASE_SET
    max_bounces: int = 16
    rr_start_bounce: int = 3
    rr_min: float = 0.05
    rr_max: float = 0.95


@dataclass
class GridSpec:
    levels: int = 8
    features_per_level: int = 4
    base_resolution: int = 4
    growth_factor: float = 2.0
    table_size_log2: int = 15


@dataclass
class TrainSpec:
    total_steps: int = 3000
    batch_size: int = 4096
    K: int = 256
    psi: int = 5
    fractions: tuple[float, ...] = (0.36, 0.63, 0.90, 1.0)
    radii: tuple[float, ...] = (0.07, 0.08, 0.09, 0.1)
    lr: float = 9e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    decay: float = 0.92
    decay_start: float = 0.7
    decay_interval: int = 25
    pos_grid: GridSpec = field(default_factory=GridSpec)
    dir_grid: GridSpec = field(default_factory=GridSpec)
    hidden_layers: int = 5
    width: int = 64


@dataclass
class CameraSpec:
    position: tuple[float, float, float] = (0.5, 0.5, -1.0)
    look_at: tuple[float, float, float] = (0.5, 0.5, 0.5)
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 40.0
    width: int = 64
    height: int = 64


@dataclass
class RenderSpec:
    camera: CameraSpec = field(default_factory=CameraSpec)
    spp: int = 16
    backends: tuple[str, ...] = ("neural", "photon_map")
    g: float = 0.0
    K: int = 256
    r_max: float = 0.1
    max_bounces: int = 16
    n_trials: int = 1
    step_size: float = 0.005
    gamma: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "out"
    scene: SceneSpec = field(default_factory=SceneSpec)
    trace: TraceSpec = field(default_factory=TraceSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    render: RenderSpec = field(default_factory=RenderSpec)

    # conversion -------------------------------------------------------------------

    def to_dict(self):
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data, base_dir=None):
        cfg = _build(cls, data or {}, "")
        cfg.validate(base_dir)
        return cfg

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except OSError as e:
            raise InvalidConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise InvalidConfigError(f"{path}: malformed YAML: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise InvalidConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data, base_dir=path.parent)

    # validation ---------------------------------------------------------------------

    def resolve(self, p, base_dir=None):
        p = Path(p)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        return p

    def validate(self, base_dir=None):
        s = self.scene
        for name in ("volume", "transfer_function"):
            p = getattr(s, name)
            if p is not None:
                rp = self.resolve(p, base_dir)
                if not rp.exists():
                    raise InvalidConfigError(f"scene.{name}: file not found: {rp}")
                setattr(s, name, str(rp))
        if not s.lights:
            raise InvalidConfigError("scene.lights must list at least one light")
        for l in s.lights:
            LightSource(l.position, l.intensity)
        if not (s.density_scale > 0 and math.isfinite(s.density_scale)):
            raise InvalidConfigError("scene.density_scale must be positive")
        if not 0 <= s.albedo <= 1:
            raise InvalidConfigError("scene.albedo must lie in [0, 1]")
        self.trace_config()
        self.train_config()
        self.grid_configs()
        self.camera()
        r = self.render
        if r.spp < 1 or r.K < 1 or not r.r_max > 0 or r.max_bounces < 1 or not r.step_size > 0 or r.n_trials < 1:
            raise InvalidConfigError("render: spp, K, max_bounces, n_trials >= 1 and r_max, step_size > 0 required")
        unknown = set(r.backends) - {"neural", "photon_map", "path", "ray_march"}
        if unknown:
            raise InvalidConfigError(f"render.backends: unknown backend(s) {sorted(unknown)}")
        if not -1 <= r.g <= 1:
            raise InvalidConfigError("render.g must lie in [-1, 1]")

    # typed views --------------------------------------------------------------------

    def trace_config(self, seed=None):
        t = self.trace
        return TraceConfig(t.n_total, tuple(t.phase_set), t.max_bounces, t.rr_start_bounce, t.rr_min, t.rr_max,
                           self.seed if seed is None else seed)

    def schedule(self):
        from .trainer import KnnSchedule

        t = self.train
        if len(t.fractions) != len(t.radii):
            raise InvalidConfigError("train.fractions and train.radii must have equal length")
        return KnnSchedule(tuple(zip(t.fractions, t.radii)))

    def train_config(self, seed=None):
        from .trainer import TrainConfig

        t = self.train
        return TrainConfig(t.total_steps, t.batch_size, tuple(self.trace.phase_set), self.schedule(), t.K, t.psi,
                           self.seed if seed is None else seed, t.lr, t.beta1, t.beta2, t.eps, t.decay,
                           t.decay_start, t.decay_interval)

    def grid_configs(self):
        from .neural_field import HashGridConfig, MlpConfig

        t = self.train
        return (HashGridConfig(**asdict(t.pos_grid), dimensionality=3),
                HashGridConfig(**asdict(t.dir_grid), dimensionality=2),
                MlpConfig(t.hidden_layers, t.width))

    def camera(self):
        from .render import Camera

        c = self.render.camera
        return Camera(tuple(c.position), tuple(c.look_at), tuple(c.up), math.radians(c.fov_deg), c.width, c.height)

    def build_scene(self):
        from . import synth
        from .render import Scene
        from .scenes import occupancy_tf
        from .volume import load_raw, load_transfer_function

        s = self.scene
        if s.volume is not None:
            grid = load_raw(s.volume)
        else:
            params = dict(s.synthetic.params)
            if s.synthetic.kind in ("turbulence", "vortices"):
                params.setdefault("seed", self.seed)
            grid = synth.generate(s.synthetic.kind, s.synthetic.dims, **params)
        tf = load_transfer_function(s.transfer_function) if s.transfer_function else occupancy_tf(s.albedo)
        lights = tuple(LightSource(tuple(l.position), tuple(l.intensity)) for l in s.lights)
        return Scene(grid, tf, lights, s.density_scale, tuple(s.background))


def sub_seed(seed, name):
    """Independent named sub-stream seed (``trace``, ``train``, ``render``...)."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1, np.uint64)[0] >> 1)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise InvalidConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        path = f"{where}.{name}" if where else name
        sub = _nested_type(cls, f)
        if sub is not None and name != "lights":
            kwargs[name] = _build(sub, value or {}, path)
        elif name == "lights":
            if not isinstance(value, list):
                raise InvalidConfigError(f"{path}: expected a list")
            kwargs[name] = [_build(LightSpec, v, f"{path}[{i}]") for i, v in enumerate(value)]
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidConfigError(f"{where or 'config'}: {e}") from e


_NESTED = {"synthetic": SyntheticSpec, "scene": SceneSpec, "trace": TraceSpec, "train": TrainSpec,
           "render": RenderSpec, "camera": CameraSpec, "pos_grid": GridSpec, "dir_grid": GridSpec}


def _nested_type(cls, f):
    return _NESTED.get(f.name)
