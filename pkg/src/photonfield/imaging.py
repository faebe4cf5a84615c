"""Image export/import and quality metrics.

Images are ``(H, W, 3)`` linear rgb arrays.  Exports write an 8-bit picture
(binary PPM or PNG) plus a lossless little-endian float32 sidecar with the
same stem and suffix ``.f32``; its dimensions come from the picture header.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import InvalidInputError

GAMMA = 2.2
RSE_EPS = 0.01
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.2126, 0.7152, 0.0722])


def as_image(img):
    """Validate and convert to a float32 ``(H, W, 3)`` array."""
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"expected an (H, W, 3) image, got shape {a.shape}")
    a = a.astype(np.float32)
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise InvalidInputError("image values must be finite and non-negative")
    return a


def to_bytes(img, gamma=False):
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if gamma:
        a = a ** (1.0 / GAMMA)
    return np.rint(a * 255.0).astype(np.uint8)


def sidecar_path(path):
    return Path(path).with_suffix(".f32")


def write_image(img, path, fmt=None, gamma=False, sidecar=True):
    """Write a P6 PPM (default) or PNG, plus the float32 sidecar."""
    img = as_image(img)
    path = Path(path)
    fmt = (fmt or ("png" if path.suffix.lower() == ".png" else "ppm")).lower()
    h, w, _ = img.shape
    try:
        if fmt == "ppm":
            path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + to_bytes(img, gamma).tobytes())
        elif fmt == "png":
            from PIL import Image

            Image.fromarray(to_bytes(img, gamma), "RGB").save(path, format="PNG")
        else:
            raise InvalidInputError(f"unknown image format {fmt!r}")
        if sidecar:
            sidecar_path(path).write_bytes(img.astype("<f4").tobytes())
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def _ppm_dims(path):
    data = Path(path).read_bytes()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            i = data.index(b"\n", i) + 1
            continue
        j = i
        while not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if tokens[0] != b"P6":
        raise InvalidInputError(f"{path} is not a binary PPM")
    return int(tokens[1]), int(tokens[2]), int(tokens[3]), data[i + 1:]


def read_ppm(path):
    """8-bit payload of a P6 file as ``(H, W, 3)`` uint8."""
    w, h, maxval, payload = _ppm_dims(path)
    if maxval != 255:
        raise InvalidInputError("only 8-bit PPM files are supported")
    return np.frombuffer(payload[: w * h * 3], np.uint8).reshape(h, w, 3)


def read_image(path):
    """Float image from the sidecar next to ``path`` (dimensions from the picture header)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            w, h = im.size
    else:
        w, h, _, _ = _ppm_dims(path)
    raw = np.fromfile(sidecar_path(path), dtype="<f4")
    if raw.size != w * h * 3:
        raise InvalidInputError(f"sidecar of {path} holds {raw.size} values, expected {w * h * 3}")
    return raw.reshape(h, w, 3).astype(np.float32)


# metrics ------------------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def rse(a, b):
    """Per-pixel relative squared error ``(a - b)^2 / (b^2 + 0.01)``, averaged over channels."""
    a, b = _pair(a, b)
    e = (a - b) ** 2 / (b * b + RSE_EPS)
    return e.mean(axis=-1) if e.ndim == 3 else e


def luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim_map(a, b, data_range=None):
    """Local SSIM of the luminance images (Gaussian window, reflect padding)."""
    a, b = _pair(a, b)
    x, y = luminance(a), luminance(b)
    if data_range is None:
        data_range = max(x.max(), y.max()) - min(x.min(), y.min())
    if not data_range > 0:
        data_range = 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(v):
        return ndimage.gaussian_filter(v, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, data_range=None):
    """Mean single-scale SSIM on luminance.

    ``data_range`` defaults to the joint luminance range of both images, which
    keeps the metric symmetric.
    """
    return float(np.mean(ssim_map(a, b, data_range)))
