"""Photon field network: two multiresolution hash grids, a raw ``g`` input and an MLP.

Everything is binary64 with hand-written gradients.  Parameters live in one
flat vector ``field.params``; the tables and layer matrices are views into it.

Hash grid levels use resolution ``floor(base * growth**l)``.  A level whose
``(N + 1)**d`` vertices fit in the table is indexed densely, otherwise
vertices are hashed with the usual XOR of coordinate-times-prime products
modulo the table size (primes in :data:`HASH_PRIMES`).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numba as nb
import numpy as np

from .estimator import EncodingConfig, decode_log
from .photons import InvalidConfigError
from .volume import InvalidInputError

HASH_PRIMES = (1, 2654435761, 805459861)
CHECKPOINT_MAGIC = b"PFNF"
CHECKPOINT_VERSION = 1
RMSE_EPS = 0.01


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 4
    base_resolution: int = 4
    growth_factor: float = 2.0
    table_size_log2: int = 15
    dimensionality: int = 3

    def __post_init__(self):
        if min(self.levels, self.features_per_level, self.base_resolution, self.table_size_log2) < 1:
            raise InvalidConfigError("hash grid counts must be positive")
        if not self.growth_factor > 1:
            raise InvalidConfigError("growth_factor must be > 1")
        if self.dimensionality not in (2, 3):
            raise InvalidConfigError("dimensionality must be 2 or 3")

    @property
    def table_size(self):
        return 1 << self.table_size_log2

    def resolutions(self):
        return [int(math.floor(self.base_resolution * self.growth_factor ** l)) for l in range(self.levels)]

    def level_rows(self):
        """Rows (vertices) stored per level: dense grid or the full hash table."""
        return [min(self.table_size, (n + 1) ** self.dimensionality) for n in self.resolutions()]

    @property
    def n_features(self):
        return self.levels * self.features_per_level

    @property
    def n_params(self):
        return sum(self.level_rows()) * self.features_per_level


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int = 5
    width: int = 64
    output_dim: int = 3

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1:
            raise InvalidConfigError("MLP needs at least one hidden layer of positive width")
        if self.output_dim != 3:
            raise InvalidConfigError("output_dim must be 3 (rgb)")

    def layer_shapes(self, n_in):
        dims = [n_in] + [self.width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


def n_params(pos_cfg, dir_cfg, mlp_cfg):
    n_in = pos_cfg.n_features + dir_cfg.n_features + 1
    return pos_cfg.n_params + dir_cfg.n_params + sum(i * o + o for i, o in mlp_cfg.layer_shapes(n_in))


# inputs ------------------------------------------------------------------------


def direction_to_sph(omega):
    """Unit vectors to ``(theta / pi, (phi + pi) / 2pi)`` in [0, 1]^2."""
    omega = np.asarray(omega, dtype=np.float64)
    # atan2 stays accurate near the poles, where arccos loses digits
    theta = np.arctan2(np.hypot(omega[..., 0], omega[..., 1]), omega[..., 2])
    phi = np.arctan2(omega[..., 1], omega[..., 0])
    return np.stack([theta / np.pi, (phi + np.pi) / (2 * np.pi)], axis=-1)


def sph_to_direction(sph):
    sph = np.asarray(sph, dtype=np.float64)
    theta = sph[..., 0] * np.pi
    phi = sph[..., 1] * 2 * np.pi - np.pi
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def g_to_input(g):
    return (np.asarray(g, dtype=np.float64) + 1.0) * 0.5


@dataclass(frozen=True)
class FieldQuery:
    """One network input, every component already mapped to [0, 1]."""

    x: tuple[float, float, float]
    omega_sph: tuple[float, float]
    g: float

    def __post_init__(self):
        vals = np.concatenate([np.ravel(self.x), np.ravel(self.omega_sph), [self.g]]).astype(np.float64)
        if vals.shape != (6,) or not np.all((vals >= 0) & (vals <= 1)):
            raise InvalidInputError("field query components must lie in [0, 1]")

    @classmethod
    def from_world(cls, x, omega, g):
        return cls(tuple(np.asarray(x, float)), tuple(direction_to_sph(omega)), float(g_to_input(g)))


@dataclass(frozen=True)
class QueryBatch:
    """Struct-of-arrays batch of field queries (all in [0, 1])."""

    x: np.ndarray  # (B, 3)
    omega_sph: np.ndarray  # (B, 2)
    g: np.ndarray  # (B,)

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_queries(cls, queries):
        if isinstance(queries, QueryBatch):
            return queries
        queries = list(queries)
        return cls(np.array([q.x for q in queries], dtype=np.float64).reshape(-1, 3),
                   np.array([q.omega_sph for q in queries], dtype=np.float64).reshape(-1, 2),
                   np.array([q.g for q in queries], dtype=np.float64))

    @classmethod
    def from_world(cls, x, omega, g):
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        omega = np.broadcast_to(np.asarray(omega, dtype=np.float64), x.shape)
        g = np.broadcast_to(np.asarray(g, dtype=np.float64), (x.shape[0],))
        return cls(x, np.ascontiguousarray(direction_to_sph(omega)), np.ascontiguousarray(g_to_input(g)))


# hash grid kernels --------------------------------------------------------------


@nb.njit(parallel=True, cache=True)
def _encode_grid(x, table, row_offset, res, dense, n_rows, out, idx, wts):
    B, d = x.shape
    L = res.shape[0]
    F = table.shape[1]
    nc = 1 << d
    mask32 = np.uint64(0xFFFFFFFF)
    for b in nb.prange(B):
        base = np.empty(3, np.int64)
        fr = np.empty(3)
        for l in range(L):
            N = res[l]
            for k in range(d):
                p = x[b, k] * N
                i0 = int(math.floor(p))
                if i0 < 0:
                    i0 = 0
                if i0 > N - 1:
                    i0 = N - 1
                base[k] = i0
                fr[k] = p - i0
            for f in range(F):
                out[b, l * F + f] = 0.0
            for c in range(nc):
                w = 1.0
                h = np.uint64(0)
                lin = 0
                stride = 1
                for k in range(d):
                    bit = (c >> k) & 1
                    ck = base[k] + bit
                    w *= fr[k] if bit else 1.0 - fr[k]
                    lin += ck * stride
                    stride *= N + 1
                    if k == 0:
                        h ^= np.uint64(ck) * np.uint64(1)
                    elif k == 1:
                        h ^= (np.uint64(ck) * np.uint64(2654435761)) & mask32
                    else:
                        h ^= (np.uint64(ck) * np.uint64(805459861)) & mask32
                if dense[l]:
                    row = row_offset[l] + lin
                else:
                    row = row_offset[l] + np.int64((h & mask32) % np.uint64(n_rows[l]))
                idx[b, l, c] = row
                wts[b, l, c] = w
                for f in range(F):
                    out[b, l * F + f] += w * table[row, f]


@nb.njit(cache=True)
def _scatter_grid(idx, wts, dout, grad, touched):
    # sequential over the batch: fixed accumulation order
    B, L, nc = idx.shape
    F = grad.shape[1]
    for b in range(B):
        for l in range(L):
            for c in range(nc):
                row = idx[b, l, c]
                w = wts[b, l, c]
                touched[row] = True
                for f in range(F):
                    grad[row, f] += w * dout[b, l * F + f]


@nb.njit(parallel=True, cache=True)
def _dense(a, W, bias, relu, out):
    # row-independent, fixed-order accumulation: batch result == per-row result
    B, K = a.shape
    J = W.shape[1]
    for i in nb.prange(B):
        for j in range(J):
            out[i, j] = bias[j]
        for k in range(K):
            v = a[i, k]
            for j in range(J):
                out[i, j] += v * W[k, j]
        if relu:
            for j in range(J):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0


class _Grid:
    def __init__(self, cfg, table):
        self.cfg = cfg
        rows = cfg.level_rows()
        res = cfg.resolutions()
        self.table = table
        self.res = np.array(res, np.int64)
        self.n_rows = np.array(rows, np.int64)
        self.row_offset = np.concatenate([[0], np.cumsum(rows)[:-1]]).astype(np.int64)
        self.dense = np.array([(n + 1) ** cfg.dimensionality <= cfg.table_size for n in res], np.bool_)

    def encode(self, x):
        B = x.shape[0]
        nc = 1 << self.cfg.dimensionality
        out = np.empty((B, self.cfg.n_features))
        idx = np.empty((B, self.cfg.levels, nc), np.int64)
        wts = np.empty((B, self.cfg.levels, nc))
        if B:
            _encode_grid(np.ascontiguousarray(x, dtype=np.float64), self.table, self.row_offset, self.res,
                         self.dense, self.n_rows, out, idx, wts)
        return out, idx, wts


# the field ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    total_steps: int = 3000
    lr: float = 9e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    decay: float = 0.92
    decay_start: float = 0.7
    decay_interval: int = 25

    @classmethod
    def for_field(cls, field, total_steps=3000, **hyper):
        return cls(np.zeros_like(field.params), np.zeros_like(field.params), total_steps=total_steps, **hyper)

    def hyper(self):
        return {k: getattr(self, k) for k in ("total_steps", "lr", "beta1", "beta2", "eps", "decay",
                                              "decay_start", "decay_interval")}

    def current_lr(self):
        return learning_rate(self.step, self.total_steps, self.lr, self.decay, self.decay_start, self.decay_interval)


def learning_rate(step, total, base=9e-4, decay=0.92, decay_start=0.7, interval=25):
    return base * decay ** math.floor(max(0.0, step - decay_start * total) / interval)


class PhotonField:
    """Trainable map from (position, view direction, g) to log-encoded rgb."""

    def __init__(self, pos_cfg=HashGridConfig(), dir_cfg=HashGridConfig(dimensionality=2), mlp_cfg=MlpConfig(),
                 params=None, psi=5, phase_set=(), trained_steps=0):
        if pos_cfg.dimensionality != 3 or dir_cfg.dimensionality != 2:
            raise InvalidConfigError("position grid must be 3D and direction grid 2D")
        self.pos_cfg, self.dir_cfg, self.mlp_cfg = pos_cfg, dir_cfg, mlp_cfg
        self.psi = int(psi)
        self.phase_set = tuple(float(g) for g in phase_set)
        self.trained_steps = int(trained_steps)
        n = n_params(pos_cfg, dir_cfg, mlp_cfg)
        if params is None:
            params = np.zeros(n)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise InvalidConfigError(f"expected {n} parameters, got {params.shape}")
        self.params = params
        self._bind()

    def _bind(self):
        p = self.params
        o = 0
        np_pos = self.pos_cfg.n_params
        self.pos_grid = _Grid(self.pos_cfg, p[o:o + np_pos].reshape(-1, self.pos_cfg.features_per_level))
        o += np_pos
        np_dir = self.dir_cfg.n_params
        self.dir_grid = _Grid(self.dir_cfg, p[o:o + np_dir].reshape(-1, self.dir_cfg.features_per_level))
        o += np_dir
        self.mlp_offset = o
        self.layers = []
        for i, j in self.mlp_cfg.layer_shapes(self.n_inputs):
            W = p[o:o + i * j].reshape(i, j)
            o += i * j
            b = p[o:o + j]
            o += j
            self.layers.append((W, b))
        self.table_rows = (self.pos_grid.table.shape[0], self.dir_grid.table.shape[0])

    @property
    def n_inputs(self):
        return self.pos_cfg.n_features + self.dir_cfg.n_features + 1

    @property
    def n_params(self):
        return self.params.size

    @classmethod
    def create(cls, pos_cfg=HashGridConfig(), dir_cfg=HashGridConfig(dimensionality=2), mlp_cfg=MlpConfig(),
               seed=0, psi=5, phase_set=(), zero_output=False):
        """He-uniform MLP weights, zero biases, embeddings uniform in +-1e-4."""
        f = cls(pos_cfg, dir_cfg, mlp_cfg, psi=psi, phase_set=phase_set)
        rng = np.random.default_rng(seed)
        f.pos_grid.table[:] = rng.uniform(-1e-4, 1e-4, f.pos_grid.table.shape)
        f.dir_grid.table[:] = rng.uniform(-1e-4, 1e-4, f.dir_grid.table.shape)
        for k, (W, b) in enumerate(f.layers):
            lim = math.sqrt(6.0 / W.shape[0])
            W[:] = rng.uniform(-lim, lim, W.shape)
            b[:] = 0.0
            if zero_output and k == len(f.layers) - 1:
                W[:] = 0.0
        return f

    def copy(self):
        return PhotonField(self.pos_cfg, self.dir_cfg, self.mlp_cfg, self.params.copy(), self.psi,
                           self.phase_set, self.trained_steps)

    # forward / backward ---------------------------------------------------------

    def encode(self, batch):
        batch = QueryBatch.from_queries(batch)
        fp, ip, wp = self.pos_grid.encode(batch.x)
        fd, id_, wd = self.dir_grid.encode(batch.omega_sph)
        feats = np.concatenate([fp, fd, batch.g[:, None]], axis=1)
        return feats, (ip, wp, id_, wd)

    def _mlp(self, feats):
        acts = [feats]
        a = feats
        for k, (W, b) in enumerate(self.layers):
            out = np.empty((a.shape[0], W.shape[1]))
            _dense(a, W, b, k < len(self.layers) - 1, out)
            acts.append(out)
            a = out
        return acts

    def forward(self, batch):
        feats, _ = self.encode(batch)
        if feats.shape[0] == 0:
            raise InvalidInputError("forward needs a non-empty batch")
        return self._mlp(feats)[-1]

    def activation_pattern(self, batch):
        """Boolean ReLU states of every hidden unit, shape (B, hidden_layers * width)."""
        feats, _ = self.encode(batch)
        acts = self._mlp(feats)[1:-1]
        return np.concatenate([a > 0 for a in acts], axis=1)

    def loss_and_grad(self, batch, targets, denom_pred=None):
        """rMSE loss and its gradient with the denominator detached.

        ``denom_pred`` fixes the predictions used in the denominator; by default
        the current predictions are used.  Returns ``(loss, grad, touched)``
        where ``touched`` flags table rows referenced by the batch.
        """
        batch = QueryBatch.from_queries(batch)
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (len(batch), 3):
            raise InvalidInputError(f"targets shape {targets.shape} does not match batch of {len(batch)}")
        feats, (ip, wp, id_, wd) = self.encode(batch)
        acts = self._mlp(feats)
        pred = acts[-1]
        den = (pred if denom_pred is None else denom_pred) ** 2 + RMSE_EPS
        diff = pred - targets
        loss = float(np.mean(diff * diff / den))
        delta = 2.0 * diff / den / diff.size

        grad = np.zeros_like(self.params)
        gl = self._views(grad)
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            a_in = acts[k]
            gW, gb = gl[k]
            gW[:] = a_in.T @ delta
            gb[:] = delta.sum(axis=0)
            delta = delta @ W.T
            if k > 0:
                delta = delta * (a_in > 0)
        npf = self.pos_cfg.n_features
        ndf = self.dir_cfg.n_features
        touched_pos = np.zeros(self.table_rows[0], np.bool_)
        touched_dir = np.zeros(self.table_rows[1], np.bool_)
        _scatter_grid(ip, wp, np.ascontiguousarray(delta[:, :npf]), self._table_view(grad, 0), touched_pos)
        _scatter_grid(id_, wd, np.ascontiguousarray(delta[:, npf:npf + ndf]), self._table_view(grad, 1), touched_dir)
        return loss, grad, (touched_pos, touched_dir)

    def _table_view(self, vec, which):
        np_pos = self.pos_cfg.n_params
        if which == 0:
            return vec[:np_pos].reshape(-1, self.pos_cfg.features_per_level)
        return vec[np_pos:self.mlp_offset].reshape(-1, self.dir_cfg.features_per_level)

    def _views(self, vec):
        out = []
        o = self.mlp_offset
        for W, b in self.layers:
            i, j = W.shape
            out.append((vec[o:o + i * j].reshape(i, j), vec[o + i * j:o + i * j + j]))
            o += i * j + j
        return out

    def param_groups(self):
        """Index ranges of the flat vector: pos table, dir table, MLP weights, MLP biases."""
        o = self.mlp_offset
        weights, biases = [], []
        for W, b in self.layers:
            weights.append(np.arange(o, o + W.size))
            o += W.size
            biases.append(np.arange(o, o + b.size))
            o += b.size
        np_pos = self.pos_cfg.n_params
        return {"pos_table": np.arange(0, np_pos), "dir_table": np.arange(np_pos, self.mlp_offset),
                "mlp_weights": np.concatenate(weights), "mlp_biases": np.concatenate(biases)}


def rmse_loss(pred, target, denom_pred=None):
    den = (pred if denom_pred is None else denom_pred) ** 2 + RMSE_EPS
    return float(np.mean((pred - target) ** 2 / den))


def forward(field, batch):
    return field.forward(batch)


def encode_input(q, field):
    """Feature vector of a single :class:`FieldQuery`."""
    return field.encode([q])[0][0]


@nb.njit(cache=True)
def _adam_one(p, m, v, g, i, lr, b1, b2, c1, c2, eps):
    m[i] = b1 * m[i] + (1.0 - b1) * g[i]
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
    p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


@nb.njit(cache=True)
def _adam_rows(p, m, v, g, offset, F, touched, lr, b1, b2, c1, c2, eps):
    for r in range(touched.shape[0]):
        if touched[r]:
            for f in range(F):
                _adam_one(p, m, v, g, offset + r * F + f, lr, b1, b2, c1, c2, eps)


@nb.njit(cache=True)
def _adam_range(p, m, v, g, lo, hi, lr, b1, b2, c1, c2, eps):
    for i in range(lo, hi):
        _adam_one(p, m, v, g, i, lr, b1, b2, c1, c2, eps)


def train_step(field, batch, targets, adam):
    """One Adam step on the rMSE loss; returns the loss before the update.

    MLP parameters update densely.  Table rows update only when the batch
    touched them (lazy moments), so unused hash entries keep their values.
    """
    loss, grad, (tp, td) = field.loss_and_grad(batch, targets)
    if not math.isfinite(loss):
        return loss
    lr = adam.current_lr()
    adam.step += 1
    c1 = 1.0 - adam.beta1 ** adam.step
    c2 = 1.0 - adam.beta2 ** adam.step
    hp = (lr, adam.beta1, adam.beta2, c1, c2, adam.eps)
    _adam_rows(field.params, adam.m, adam.v, grad, 0, field.pos_cfg.features_per_level, tp, *hp)
    _adam_rows(field.params, adam.m, adam.v, grad, field.pos_cfg.n_params, field.dir_cfg.features_per_level,
               td, *hp)
    _adam_range(field.params, adam.m, adam.v, grad, field.mlp_offset, field.n_params, *hp)
    field.trained_steps += 1
    return loss


def infer_radiance(field, x, omega, g, cfg=EncodingConfig()):
    """Decoded radiance for world-space inputs; ``omega`` points toward the viewer."""
    if cfg.psi != field.psi:
        raise InvalidConfigError(f"encoding psi={cfg.psi} does not match the field's psi={field.psi}")
    single = np.ndim(x) == 1
    out = decode_log(field.forward(QueryBatch.from_world(x, omega, g)), cfg)
    return out[0] if single else out


# checkpoint ----------------------------------------------------------------------


def save_checkpoint(field, path, adam=None):
    """Binary checkpoint: magic, version, JSON header, then params, m, v (binary64 LE)."""
    header = {
        "pos_grid": asdict(field.pos_cfg), "dir_grid": asdict(field.dir_cfg), "mlp": asdict(field.mlp_cfg),
        "psi": field.psi, "phase_set": list(field.phase_set), "trained_steps": field.trained_steps,
        "n_params": field.n_params, "adam": None if adam is None else {**adam.hyper(), "step": adam.step},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)) + blob)
            fh.write(field.params.astype("<f8").tobytes())
            if adam is not None:
                fh.write(adam.m.astype("<f8").tobytes())
                fh.write(adam.v.astype("<f8").tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    """Returns ``(field, adam_or_None)`` restored bit-exactly."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidInputError(f"{path} is not a photon field checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    o = 4 + 12
    h = json.loads(data[o:o + hlen])
    o += hlen
    n = h["n_params"]
    arrays = np.frombuffer(data, dtype="<f8", offset=o)
    expect = n * (3 if h["adam"] is not None else 1)
    if arrays.size != expect:
        raise InvalidInputError(f"{path}: truncated or oversized payload")
    field = PhotonField(HashGridConfig(**h["pos_grid"]), HashGridConfig(**h["dir_grid"]), MlpConfig(**h["mlp"]),
                        arrays[:n].astype(np.float64), h["psi"], h["phase_set"], h["trained_steps"])
    adam = None
    if h["adam"] is not None:
        hyper = dict(h["adam"])
        step = hyper.pop("step")
        adam = AdamState(arrays[n:2 * n].astype(np.float64), arrays[2 * n:].astype(np.float64), step=step, **hyper)
    return field, adam
