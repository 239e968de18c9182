"""ORB-style feature extraction: FAST-9/16 corners, quadtree spatial
distribution, intensity-centroid orientation, steered 256-bit binary
descriptors, and Hamming matching with ratio test and cross-check."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import Pyramid

# 16-pixel Bresenham circle of radius 3, starting at (0,-3), clockwise.
FAST_CIRCLE = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)
FAST_ARC = 9           # contiguous circle pixels required for a corner
FAST_MARGIN = 16       # detection border exclusion, in pixels

ORIENTATION_RADIUS = 15

BRIEF_SEED = 0x5EED
BRIEF_PAIRS = 256
BRIEF_PATCH = 31       # pattern sigma = BRIEF_PATCH / 5, coords clamped to +/-15

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def brief_pattern(seed=BRIEF_SEED, n_pairs=BRIEF_PAIRS):
    """Fixed point-pair sampling pattern: seeded isotropic Gaussian, rounded
    to integers and clamped to the +/-15 box. Stable across runs."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, BRIEF_PATCH / 5.0, size=(n_pairs, 4))
    return np.clip(np.rint(pts), -15, 15).astype(np.int32)


_DEFAULT_PATTERN = brief_pattern()

# Margin required so every rotated, rounded pattern sample stays in bounds.
DESCRIPTOR_MARGIN = int(np.ceil(np.hypot(
    _DEFAULT_PATTERN.reshape(-1, 2)[:, 0], _DEFAULT_PATTERN.reshape(-1, 2)[:, 1]
).max() + 0.5)) + 1


@dataclass
class FrameFeatures:
    """Keypoints and descriptors of one frame (structure-of-arrays).

    Coordinates are subpixel positions in the level-0 frame; `level` is the
    pyramid level each point was detected on.
    """

    xy: np.ndarray          # (n, 2) float64
    level: np.ndarray       # (n,) int32
    angle: np.ndarray       # (n,) float64 in [0, 2*pi)
    response: np.ndarray    # (n,) float64
    descriptors: np.ndarray  # (n, 32) uint8
    frame_id: int = -1
    timestamp: float = 0.0

    def __post_init__(self):
        n = len(self.xy)
        if not (len(self.level) == len(self.angle) == len(self.response)
                == len(self.descriptors) == n):
            raise ValueError("FrameFeatures arrays must have equal length")

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls, frame_id=-1, timestamp=0.0):
        return cls(
            xy=np.zeros((0, 2)), level=np.zeros(0, dtype=np.int32),
            angle=np.zeros(0), response=np.zeros(0),
            descriptors=np.zeros((0, 32), dtype=np.uint8),
            frame_id=frame_id, timestamp=timestamp,
        )


@dataclass
class MatchSet:
    """Descriptor correspondences between two frames; injective both ways."""

    idx_a: np.ndarray      # (m,) indices into frame a
    idx_b: np.ndarray      # (m,) indices into frame b
    distance: np.ndarray   # (m,) Hamming distances

    def __len__(self):
        return len(self.idx_a)


# ---------------------------------------------------------------------------
# FAST corner detection
# ---------------------------------------------------------------------------

def detect_fast(img, threshold):
    """FAST-9/16 segment-test corners with 3x3 non-maximum suppression.

    A pixel qualifies when >= 9 contiguous circle pixels are all brighter
    than center + threshold or all darker than center - threshold. The
    response is the sum of |I(c) - I(p)| over the longest qualifying arc.
    Returns (xy, response) with xy int32 (n, 2), row-major ordered; the
    16-pixel border is excluded.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < 32 or w < 32:
        raise ValueError(f"image {w}x{h} too small for FAST (need 32x32)")
    if not (1 <= threshold <= 255):
        raise ValueError(f"threshold must be in [1, 255], got {threshold}")

    m = FAST_MARGIN
    center = img[m : h - m, m : w - m]
    shifted = [img[m + dy : h - m + dy, m + dx : w - m + dx] for dx, dy in FAST_CIRCLE]

    # cheap prefilter: an arc of >= 9 contiguous pixels needs >= 9 total
    bright_cnt = np.zeros(center.shape, dtype=np.uint8)
    dark_cnt = np.zeros(center.shape, dtype=np.uint8)
    hi = center + threshold
    lo = center - threshold
    for s in shifted:
        bright_cnt += s > hi
        dark_cnt += s < lo
    cand = (bright_cnt >= FAST_ARC) | (dark_cnt >= FAST_ARC)
    cys, cxs = np.nonzero(cand)

    rmap = np.zeros((h, w))
    cmap = np.zeros((h, w), dtype=bool)
    if len(cys):
        circ = np.stack([s[cys, cxs] for s in shifted], axis=1)  # (n, 16)
        cvals = center[cys, cxs][:, None]
        dev = np.abs(circ - cvals)
        response = np.zeros(len(cys))
        corner = np.zeros(len(cys), dtype=bool)
        for flags in (circ > cvals + threshold, circ < cvals - threshold):
            # longest circular run and its deviation sum via the doubled
            # scan: endpoints in the second half see full wrap context
            run_len = np.zeros(len(cys))
            run_sum = np.zeros(len(cys))
            best_len = np.zeros(len(cys))
            best_sum = np.zeros(len(cys))
            for k in range(32):
                b = flags[:, k % 16]
                run_len = np.where(b, run_len + 1.0, 0.0)
                run_sum = np.where(b, run_sum + dev[:, k % 16], 0.0)
                if k >= 16:
                    upd = run_len > best_len
                    best_len = np.where(upd, run_len, best_len)
                    best_sum = np.where(upd, run_sum, best_sum)
            total = (dev * flags).sum(axis=1)
            resp_pol = np.where(best_len >= 16.0, total, best_sum)
            is_corner = best_len >= FAST_ARC
            # bright and dark arcs of length >= 9 cannot coexist on 16 pixels
            response = np.where(is_corner & ~corner, resp_pol, response)
            corner |= is_corner
        # 3x3 NMS on response; the row-major-earlier pixel wins ties
        rmap[cys[corner] + m, cxs[corner] + m] = response[corner]
        cmap[cys[corner] + m, cxs[corner] + m] = True
    keep = cmap.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = np.full((h, w), -np.inf)
            ys0, ys1 = max(dy, 0), h + min(dy, 0)
            xs0, xs1 = max(dx, 0), w + min(dx, 0)
            neighbor[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx] = rmap[ys0:ys1, xs0:xs1]
            later = dy > 0 or (dy == 0 and dx > 0)
            ok = rmap > neighbor
            if later:
                ok |= rmap == neighbor
            keep &= ok

    ys, xs = np.nonzero(keep)
    xy = np.stack([xs, ys], axis=1).astype(np.int32)
    return xy, rmap[ys, xs]


# ---------------------------------------------------------------------------
# Quadtree spatial distribution
# ---------------------------------------------------------------------------

def _quadtree_cells(xy, target_n, width, height):
    """Subdivide until the nonempty cell count reaches target_n or every
    cell holds a single keypoint. Near the target, the most crowded cells
    split first, one at a time."""
    idx0 = np.arange(len(xy))
    if len(idx0) == 0:
        return []
    cells = [(0.0, 0.0, float(width), float(height), idx0)]

    def split(cell):
        x0, y0, x1, y1, idx = cell
        mx, my = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        px, py = xy[idx, 0], xy[idx, 1]
        left, top = px < mx, py < my
        quads = [
            (x0, y0, mx, my, idx[left & top]),
            (mx, y0, x1, my, idx[~left & top]),
            (x0, my, mx, y1, idx[left & ~top]),
            (mx, my, x1, y1, idx[~left & ~top]),
        ]
        return [q for q in quads if len(q[4]) > 0]

    def can_split(cell):
        x0, y0, x1, y1, idx = cell
        if len(idx) <= 1 or (x1 - x0 < 1e-6 and y1 - y0 < 1e-6):
            return False
        # co-located points can never be separated; treat as one leaf
        return bool(np.any(xy[idx] != xy[idx[0]]))

    while True:
        splittable = [i for i, c in enumerate(cells) if can_split(c)]
        if not splittable or len(cells) >= target_n:
            break
        if len(cells) + 3 * len(splittable) >= target_n:
            # final stretch: largest population first, stop as soon as done
            order = sorted(splittable, key=lambda i: (-len(cells[i][4]), i))
            done = {}
            for i in order:
                done[i] = split(cells[i])
                if len(cells) + sum(len(v) - 1 for v in done.values()) >= target_n:
                    break
            cells = [c for i, c in enumerate(cells) if i not in done] + [
                q for i in sorted(done) for q in done[i]
            ]
        else:
            new_cells = []
            for i, c in enumerate(cells):
                if i in splittable:
                    new_cells.extend(split(c))
                else:
                    new_cells.append(c)
            cells = new_cells
    return cells


def distribute(xy, response, target_n, width, height):
    """Quadtree thinning: keep the highest-response keypoint per final cell.
    Returns sorted indices into the input arrays."""
    if target_n < 1:
        raise ValueError(f"target_n must be >= 1, got {target_n}")
    cells = _quadtree_cells(np.asarray(xy, dtype=np.float64), target_n, width, height)
    kept = []
    for _, _, _, _, idx in cells:
        best = idx[np.lexsort((idx, -response[idx]))[0]]
        kept.append(best)
    return np.array(sorted(kept), dtype=np.intp)


# ---------------------------------------------------------------------------
# Orientation and description
# ---------------------------------------------------------------------------

def _disc_offsets(radius):
    dy, dx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    mask = dx * dx + dy * dy <= radius * radius
    return dx[mask], dy[mask]


_DISC_DX, _DISC_DY = _disc_offsets(ORIENTATION_RADIUS)


def orientation(img, x, y, radius=ORIENTATION_RADIUS):
    """Intensity-centroid angle of the circular patch at (x, y), in [0, 2pi).

    angle = atan2(m01, m10) with m_pq the patch moments in offsets relative
    to the center; a fully symmetric patch yields 0 by convention.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    xi, yi = int(round(x)), int(round(y))
    if xi - radius < 0 or yi - radius < 0 or xi + radius >= w or yi + radius >= h:
        raise ValueError(f"orientation patch at ({x}, {y}) radius {radius} exits image")
    return float(orientation_batch(img, np.array([[xi, yi]]), radius)[0])


def orientation_batch(img, xy_int, radius=ORIENTATION_RADIUS):
    """Vectorized intensity-centroid angles; callers guarantee the patches fit."""
    if radius == ORIENTATION_RADIUS:
        dx, dy = _DISC_DX, _DISC_DY
    else:
        dx, dy = _disc_offsets(radius)
    xs = xy_int[:, 0:1] + dx[None, :]
    ys = xy_int[:, 1:2] + dy[None, :]
    patch = img[ys, xs]
    m10 = (patch * dx[None, :]).sum(axis=1)
    m01 = (patch * dy[None, :]).sum(axis=1)
    return np.mod(np.arctan2(m01, m10), 2.0 * math.pi)


def describe(img, x, y, angle, pattern=None):
    """256-bit descriptor at one keypoint; bit i = 1 iff I(p_i) < I(q_i)
    with the point pairs steered by `angle`. Returns (32,) uint8."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    xi, yi = int(round(x)), int(round(y))
    m = DESCRIPTOR_MARGIN
    if xi - m < 0 or yi - m < 0 or xi + m >= w or yi + m >= h:
        raise ValueError(f"descriptor patch at ({x}, {y}) exits image (margin {m})")
    return describe_batch(
        img, np.array([[xi, yi]]), np.array([angle], dtype=np.float64), pattern
    )[0]


def describe_batch(img, xy_int, angles, pattern=None):
    """Vectorized steered binary descriptors; samples at rounded rotated
    pattern offsets on the given (already smoothed) image."""
    if pattern is None:
        pattern = _DEFAULT_PATTERN
    n = len(xy_int)
    if n == 0:
        return np.zeros((0, 32), dtype=np.uint8)
    c, s = np.cos(angles), np.sin(angles)

    def sample(px, py):
        rx = np.rint(c[:, None] * px[None, :] - s[:, None] * py[None, :]).astype(np.intp)
        ry = np.rint(s[:, None] * px[None, :] + c[:, None] * py[None, :]).astype(np.intp)
        return img[xy_int[:, 1:2] + ry, xy_int[:, 0:1] + rx]

    ip = sample(pattern[:, 0].astype(np.float64), pattern[:, 1].astype(np.float64))
    iq = sample(pattern[:, 2].astype(np.float64), pattern[:, 3].astype(np.float64))
    return np.packbits(ip < iq, axis=1)


def hamming(a, b):
    """Hamming distance between two packed 256-bit descriptors."""
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


# ---------------------------------------------------------------------------
# Whole-frame extraction
# ---------------------------------------------------------------------------

def _level_budgets(pyr, n_features):
    areas = np.array([lvl.size for lvl in pyr.levels], dtype=np.float64)
    raw = n_features * areas / areas.sum()
    budgets = np.floor(raw).astype(int)
    # hand the rounding remainder to the finest levels first
    for lvl in range(len(budgets)):
        if budgets.sum() >= n_features:
            break
        budgets[lvl] += 1
    return np.maximum(budgets, 1)


def extract(pyr: Pyramid, n_features, threshold, frame_id=-1, timestamp=0.0,
            pattern=None):
    """Detect, distribute, orient, and describe up to n_features keypoints
    across all pyramid levels (per-level budget proportional to level area)."""
    if n_features < 8:
        raise ValueError(f"n_features must be >= 8, got {n_features}")
    budgets = _level_budgets(pyr, n_features)
    margin = max(FAST_MARGIN, DESCRIPTOR_MARGIN)

    parts = []
    for lvl, img in enumerate(pyr.levels):
        h, w = img.shape
        if h < 32 or w < 32:
            continue
        xy, resp = detect_fast(img, threshold)
        ok = (
            (xy[:, 0] >= margin) & (xy[:, 0] < w - margin)
            & (xy[:, 1] >= margin) & (xy[:, 1] < h - margin)
        )
        xy, resp = xy[ok], resp[ok]
        if len(xy) == 0:
            continue
        sel = distribute(xy, resp, int(budgets[lvl]), w, h)
        xy, resp = xy[sel], resp[sel]
        if len(xy) > budgets[lvl]:
            order = np.lexsort((np.arange(len(xy)), -resp))[: budgets[lvl]]
            order = np.sort(order)
            xy, resp = xy[order], resp[order]
        ang = orientation_batch(img, xy)
        desc = describe_batch(img, xy, ang, pattern)
        parts.append((lvl, xy, resp, ang, desc))

    if not parts:
        return FrameFeatures.empty(frame_id, timestamp)

    xy_base, levels, angles, responses, descs = [], [], [], [], []
    for lvl, xy, resp, ang, desc in parts:
        xy_base.append(pyr.to_base(xy.astype(np.float64), lvl))
        levels.append(np.full(len(xy), lvl, dtype=np.int32))
        angles.append(ang)
        responses.append(resp)
        descs.append(desc)
    return FrameFeatures(
        xy=np.concatenate(xy_base),
        level=np.concatenate(levels),
        angle=np.concatenate(angles),
        response=np.concatenate(responses),
        descriptors=np.concatenate(descs),
        frame_id=frame_id,
        timestamp=timestamp,
    )


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def _hamming_matrix(da, db):
    # chunked so the (na, nb, 32) xor buffer stays small
    na = len(da)
    out = np.empty((na, len(db)), dtype=np.uint16)
    step = 256
    for i in range(0, na, step):
        x = np.bitwise_xor(da[i : i + step, None, :], db[None, :, :])
        out[i : i + step] = _POPCOUNT[x].sum(axis=2, dtype=np.uint16)
    return out


def match(a: FrameFeatures, b: FrameFeatures, max_hamming=64, ratio=0.8):
    """Mutual-best descriptor matching with Lowe ratio test.

    A match (i, j) is kept iff j is i's best neighbor with distance
    <= max_hamming, the best distance beats ratio * second-best, and i is
    also j's best neighbor. Empty input frames yield an empty MatchSet.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    if len(a) == 0 or len(b) == 0:
        e = np.zeros(0, dtype=np.intp)
        return MatchSet(e, e.copy(), np.zeros(0, dtype=np.float64))

    dist = _hamming_matrix(a.descriptors, b.descriptors)
    best_j = np.argmin(dist, axis=1)
    d1 = dist[np.arange(len(a)), best_j].astype(np.float64)
    if dist.shape[1] >= 2:
        part = np.partition(dist, 1, axis=1)
        d2 = part[:, 1].astype(np.float64)
        # when the minimum is duplicated, second-best equals best
    else:
        d2 = np.full(len(a), np.inf)
    accept = (d1 <= max_hamming) & (d1 < ratio * d2)

    best_i = np.argmin(dist, axis=0)
    mutual = best_i[best_j] == np.arange(len(a))

    keep = np.flatnonzero(accept & mutual)
    return MatchSet(idx_a=keep, idx_b=best_j[keep], distance=d1[keep])
