"""Grayscale image primitives: PGM I/O, Gaussian smoothing, scale pyramids,
subpixel sampling, and gradients.

Images are plain numpy arrays: 2-D uint8 at file boundaries ("gray image"),
2-D float64 everywhere else ("float image"). Every filtering operation uses
clamp-to-edge borders and double precision so numerical tests are free of
quantization effects.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

# Pyramid levels smaller than this (either dimension) are dropped.
MIN_PYRAMID_DIM = 16


class PgmError(ValueError):
    """Malformed PGM file; the message names the byte offset of the failure."""


def _as_float(img):
    return np.ascontiguousarray(img, dtype=np.float64)


# ---------------------------------------------------------------------------
# PGM I/O (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def load_pgm(path):
    """Read a binary PGM (magic P5, maxval 255) into a (h, w) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()

    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":  # comment runs to end of line
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break

    def token(what):
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if pos == start:
            raise PgmError(f"missing {what} at byte offset {start} in {path}")
        return data[start:pos], start

    magic, off = token("magic number")
    if magic != b"P5":
        if re.fullmatch(rb"P[1-46]", magic):
            raise PgmError(
                f"unsupported PGM variant {magic.decode()} at byte offset {off} in {path}"
            )
        raise PgmError(f"not a PGM file (bad magic at byte offset {off}) in {path}")

    dims = []
    for what in ("width", "height", "maxval"):
        tok, off = token(what)
        try:
            value = int(tok)
        except ValueError:
            raise PgmError(f"invalid {what} at byte offset {off} in {path}") from None
        if value <= 0:
            raise PgmError(f"non-positive {what} at byte offset {off} in {path}")
        dims.append(value)
    width, height, maxval = dims
    if maxval != 255:
        raise PgmError(f"unsupported maxval {maxval} at byte offset {off} in {path}")

    # Exactly one whitespace byte separates the header from the payload.
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PgmError(f"missing header terminator at byte offset {pos} in {path}")
    pos += 1

    n = width * height
    payload = data[pos : pos + n]
    if len(payload) < n:
        raise PgmError(
            f"truncated payload at byte offset {pos + len(payload)} in {path}: "
            f"expected {n} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=n).reshape(height, width).copy()


def save_pgm(img, path):
    """Write a (h, w) uint8 array as binary PGM; round-trips bit-exactly."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + img.tobytes())


def atomic_write_bytes(path, payload):
    """Write bytes via a temp file + rename so readers never see partial files."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    r = math.ceil(3.0 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d(img, kernel, axis):
    # Clamp-to-edge padding; accumulation in fixed tap order keeps the
    # summation bitwise deterministic per output pixel.
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for i, k in enumerate(kernel):
        if axis == 0:
            out += k * padded[i : i + img.shape[0], :]
        else:
            out += k * padded[:, i : i + img.shape[1]]
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with clamp-to-edge borders.

    Accepts uint8 or float input; always returns float64. The normalized
    kernel preserves constant images exactly (up to float rounding).
    """
    img = _as_float(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected non-empty 2-D image, got shape {img.shape}")
    kernel = gaussian_kernel(sigma)
    return _correlate1d(_correlate1d(img, kernel, 0), kernel, 1)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resize_bilinear(img, new_w, new_h):
    """Bilinear resize using the center-aligned mapping
    src = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped to the frame.
    """
    img = _as_float(img)
    h, w = img.shape
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_batch(img, gx, gy)


def bilinear_batch(img, xs, ys):
    """Bilinear sample at arrays of in-bounds coordinates (no validation)."""
    h, w = img.shape
    x0 = np.clip(np.floor(xs), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, h - 2).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    flat = img.ravel()
    base = y0 * w + x0
    i00 = flat.take(base)
    i01 = flat.take(base + 1)
    i10 = flat.take(base + w)
    i11 = flat.take(base + w + 1)
    gx = 1.0 - fx
    top = i00 * gx + i01 * fx
    bot = i10 * gx + i11 * fx
    return top * (1.0 - fy) + bot * fy


def sample_bilinear(img, x, y):
    """Bilinear intensity at a single subpixel coordinate.

    Exact table lookup at integer coordinates. Out-of-bounds coordinates are
    an error; callers clamp first.
    """
    img = _as_float(img)
    h, w = img.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"sample ({x}, {y}) outside image {w}x{h}")
    return float(bilinear_batch(img, np.float64(x), np.float64(y)))


def gradients(img):
    """Spatial gradients (gx, gy): central differences / 2 in the interior,
    one-sided differences at the borders."""
    img = _as_float(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"image {img.shape} too small for gradients (need 3x3)")
    gy, gx = np.gradient(img)
    return gx, gy


# ---------------------------------------------------------------------------
# Pyramids
# ---------------------------------------------------------------------------

@dataclass
class Pyramid:
    """Multi-scale stack of float images; level 0 is the source frame.

    Level i+1 has dimensions floor(dim_i / scale_factor) and is produced by
    blurring level i (sigma = 0.5 * scale_factor) then bilinear resampling.
    Construction truncates once a level would drop below 16x16.
    """

    levels: list
    scale_factor: float
    _gradients: dict = field(default_factory=dict, repr=False)

    @property
    def n_levels(self):
        return len(self.levels)

    def dims(self, level):
        h, w = self.levels[level].shape
        return w, h

    def gradients(self, level):
        """Cached (gx, gy) of a level; safe because levels are never mutated."""
        if level not in self._gradients:
            self._gradients[level] = gradients(self.levels[level])
        return self._gradients[level]

    def to_level(self, xy, level):
        """Map level-0 coordinates to a level's frame (center-aligned)."""
        if level == 0:
            return np.asarray(xy, dtype=np.float64)
        w0, h0 = self.dims(0)
        wl, hl = self.dims(level)
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[..., 0] = (xy[..., 0] + 0.5) * (wl / w0) - 0.5
        out[..., 1] = (xy[..., 1] + 0.5) * (hl / h0) - 0.5
        return out

    def to_base(self, xy, level):
        """Map a level's coordinates back to the level-0 frame."""
        if level == 0:
            return np.asarray(xy, dtype=np.float64)
        w0, h0 = self.dims(0)
        wl, hl = self.dims(level)
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[..., 0] = (xy[..., 0] + 0.5) * (w0 / wl) - 0.5
        out[..., 1] = (xy[..., 1] + 0.5) * (h0 / hl) - 0.5
        return out

    def compatible(self, other):
        return (
            self.scale_factor == other.scale_factor
            and self.n_levels == other.n_levels
            and all(a.shape == b.shape for a, b in zip(self.levels, other.levels))
        )


def build_pyramid(img, n_levels, scale_factor):
    """Build a scale pyramid; truncates instead of erroring once a level
    would shrink below 16x16."""
    if n_levels < 1:
        raise ValueError(f"n_levels must be >= 1, got {n_levels}")
    if scale_factor <= 1.0:
        raise ValueError(f"scale_factor must be > 1, got {scale_factor}")
    base = _as_float(img)
    if base.shape[0] < MIN_PYRAMID_DIM or base.shape[1] < MIN_PYRAMID_DIM:
        raise ValueError(f"image {base.shape} smaller than {MIN_PYRAMID_DIM}x{MIN_PYRAMID_DIM}")

    levels = [base]
    sigma = 0.5 * scale_factor
    for _ in range(1, n_levels):
        prev = levels[-1]
        h, w = prev.shape
        nw = int(w / scale_factor)
        nh = int(h / scale_factor)
        if nw < MIN_PYRAMID_DIM or nh < MIN_PYRAMID_DIM:
            break
        levels.append(resize_bilinear(gaussian_blur(prev, sigma), nw, nh))
    return Pyramid(levels=levels, scale_factor=float(scale_factor))


# ---------------------------------------------------------------------------
# Sequence directories: NNNNNN.pgm + times.txt
# ---------------------------------------------------------------------------

def sequence_frame_name(index):
    return f"{index:06d}.pgm"


def read_times(path):
    times = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                t = float(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: invalid timestamp {line!r}") from None
            if times and t <= times[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps not strictly increasing")
            times.append(t)
    return np.asarray(times, dtype=np.float64)


def list_sequence(directory):
    """Return (image paths, timestamps) for a sequence directory."""
    times_path = os.path.join(directory, "times.txt")
    if not os.path.isfile(times_path):
        raise FileNotFoundError(f"missing times.txt in {directory}")
    times = read_times(times_path)
    paths = [os.path.join(directory, sequence_frame_name(i)) for i in range(len(times))]
    return paths, times
