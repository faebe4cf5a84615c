"""KNN adaptive-radius radiance estimate and the logarithmic target codec."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np

from .phase import hg_eval, hg_eval_nb
from .volume import InvalidInputError

R_EPS = 1e-6  # below this farthest-neighbour distance the estimate is zero


@dataclass(frozen=True)
class EncodingConfig:
    psi: int = 5

    def __post_init__(self):
        if int(self.psi) < 1:
            raise InvalidInputError("psi must be a positive integer")
        if not 4 <= self.psi <= 6:
            warnings.warn(f"psi={self.psi} outside the recommended range 4..6", stacklevel=2)


def estimate_radiance(neighbors, x, omega, g):
    """Phase-weighted photon power over the volume of the enclosing sphere.

    ``neighbors`` is a distance-sorted list of ``(photon, distance)``; the
    radius is the distance of the farthest one.  ``omega`` is the direction
    radiance flows in (toward the viewer).
    """
    if not neighbors:
        return np.zeros(3)
    r = float(neighbors[-1][1])
    if r < R_EPS:
        return np.zeros(3)
    omega = np.asarray(omega, dtype=np.float64)
    dirs = np.array([p.direction for p, _ in neighbors], dtype=np.float64)
    power = np.array([p.power for p, _ in neighbors], dtype=np.float64)
    w = hg_eval(g, dirs @ omega)
    return (w[:, None] * power).sum(axis=0) / (4.0 / 3.0 * math.pi * r ** 3)


@nb.njit(parallel=True, cache=True)
def _estimate_batch(ids, dist, counts, dirs, power, omega, g, out):
    for q in nb.prange(ids.shape[0]):
        c = counts[q]
        out[q, 0] = 0.0
        out[q, 1] = 0.0
        out[q, 2] = 0.0
        if c == 0:
            continue
        r = dist[q, c - 1]
        if r < R_EPS:
            continue
        sr = 0.0
        sg = 0.0
        sb = 0.0
        for j in range(c):
            p = ids[q, j]
            cos = dirs[p, 0] * omega[q, 0] + dirs[p, 1] * omega[q, 1] + dirs[p, 2] * omega[q, 2]
            w = hg_eval_nb(g[q], cos)
            sr += w * power[p, 0]
            sg += w * power[p, 1]
            sb += w * power[p, 2]
        vol = 4.0 / 3.0 * math.pi * r * r * r
        out[q, 0] = sr / vol
        out[q, 1] = sg / vol
        out[q, 2] = sb / vol


def estimate_batch(photons, knn, omega, g):
    """Vectorised estimate over a :class:`~photonfield.photon_map.KnnResult`."""
    nq = knn.ids.shape[0]
    omega = np.ascontiguousarray(np.broadcast_to(omega, (nq, 3)), dtype=np.float64)
    garr = np.ascontiguousarray(np.broadcast_to(np.asarray(g, dtype=np.float64), (nq,)))
    out = np.empty((nq, 3))
    if nq:
        _estimate_batch(knn.ids, knn.dist, knn.counts, np.ascontiguousarray(photons.directions),
                        np.ascontiguousarray(photons.power), omega, garr, out)
    return out


def encode_log(L, cfg=EncodingConfig(), return_clamped=False):
    """Map radiance to normalised negative base-10 exponents in [0, 1].

    Values at or below ``10**-psi`` map to 1; values above 1 are clamped to 0.
    """
    L = np.asarray(L, dtype=np.float64)
    if not np.all(np.isfinite(L)) or np.any(L < 0):
        raise InvalidInputError("radiance must be finite and non-negative")
    psi = cfg.psi
    clamped = L > 1.0
    Lc = np.minimum(L, 1.0)
    open_branch = Lc > 10.0 ** (-psi)
    with np.errstate(divide="ignore"):
        out = np.where(open_branch, -np.log10(np.where(open_branch, Lc, 1.0)) / psi, 1.0)
    out = np.clip(out, 0.0, 1.0)
    if return_clamped:
        return out, int(clamped.sum())
    return out


def decode_log(Lp, cfg=EncodingConfig()):
    """Inverse of :func:`encode_log`; inputs are clamped to [0, 1] first."""
    Lp = np.clip(np.asarray(Lp, dtype=np.float64), 0.0, 1.0)
    return 10.0 ** (-Lp * cfg.psi)
