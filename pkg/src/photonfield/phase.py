"""Henyey-Greenstein phase function.

``cos_theta`` is always measured between the incoming *travel* direction and
the outgoing travel direction, so ``g > 0`` favours continuing straight on.
Working values of ``g`` are clamped to ``|g| <= G_CLAMP``; the density
degenerates into a delta at ``|g| = 1``.
"""

import math

import numba as nb
import numpy as np

G_CLAMP = 0.999
INV_4PI = 1.0 / (4.0 * math.pi)
_ISO_EPS = 1e-3


def clamp_g(g):
    return np.clip(g, -G_CLAMP, G_CLAMP)


def hg_eval(g, cos_theta):
    """Phase density per steradian; broadcasts over ``g`` and ``cos_theta``."""
    g = clamp_g(np.asarray(g, dtype=np.float64))
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), -1.0, 1.0)
    denom = 1.0 + g * g - 2.0 * g * c
    return INV_4PI * (1.0 - g * g) / (denom * np.sqrt(denom))


def hg_sample_cos(g, u):
    """Inverse-CDF sample of cos(theta)."""
    g = clamp_g(np.asarray(g, dtype=np.float64))
    u = np.asarray(u, dtype=np.float64)
    g, u = np.broadcast_arrays(g, u)
    iso = np.abs(g) < _ISO_EPS
    gs = np.where(iso, 0.5, g)  # placeholder keeps the division finite
    sq = (1.0 - gs * gs) / (1.0 - gs + 2.0 * gs * u)
    c = (1.0 + gs * gs - sq * sq) / (2.0 * gs)
    c = np.where(iso, 2.0 * u - 1.0, c)
    return np.clip(c, -1.0, 1.0)


def orthonormal_basis(n):
    """Branchless frame around unit vectors ``n`` (shape ``(..., 3)``).

    Duff et al. 2017, "Building an Orthonormal Basis, Revisited".
    """
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.copysign(1.0, z)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    s = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, s


def hg_sample(g, w_in, u1, u2):
    """Sample outgoing unit directions about ``w_in`` with density ``hg_eval``.

    ``u1`` drives the polar angle, ``u2`` the azimuth ``phi = 2*pi*u2``.
    """
    w_in = np.asarray(w_in, dtype=np.float64)
    c = hg_sample_cos(g, u1)[..., None]
    st = np.sqrt(np.maximum(0.0, 1.0 - c * c))
    phi = (2.0 * math.pi * np.asarray(u2, dtype=np.float64))[..., None]
    t, s = orthonormal_basis(w_in)
    w = st * np.cos(phi) * t + st * np.sin(phi) * s + c * w_in
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


# scalar kernels for the tracers ---------------------------------------------


@nb.njit(inline="always", cache=True)
def hg_eval_nb(g, c):
    if g > G_CLAMP:
        g = G_CLAMP
    elif g < -G_CLAMP:
        g = -G_CLAMP
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    d = 1.0 + g * g - 2.0 * g * c
    return INV_4PI * (1.0 - g * g) / (d * math.sqrt(d))


@nb.njit(inline="always", cache=True)
def hg_sample_nb(g, wx, wy, wz, u1, u2):
    if g > G_CLAMP:
        g = G_CLAMP
    elif g < -G_CLAMP:
        g = -G_CLAMP
    if abs(g) < _ISO_EPS:
        c = 2.0 * u1 - 1.0
    else:
        sq = (1.0 - g * g) / (1.0 - g + 2.0 * g * u1)
        c = (1.0 + g * g - sq * sq) / (2.0 * g)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    st = math.sqrt(max(0.0, 1.0 - c * c))
    phi = 2.0 * math.pi * u2
    cp = math.cos(phi) * st
    sp = math.sin(phi) * st
    sign = math.copysign(1.0, wz)
    a = -1.0 / (sign + wz)
    b = wx * wy * a
    tx, ty, tz = 1.0 + sign * wx * wx * a, sign * b, -sign * wx
    sx, sy, sz = b, sign + wy * wy * a, -wy
    ox = cp * tx + sp * sx + c * wx
    oy = cp * ty + sp * sy + c * wy
    oz = cp * tz + sp * sz + c * wz
    n = math.sqrt(ox * ox + oy * oy + oz * oz)
    return ox / n, oy / n, oz / n
