"""Pyramidal Lucas-Kanade sparse optical flow with forward-backward
validation.

Coarse-to-fine Gauss-Newton on the brightness-constancy linearization; the
structure tensor is built from the previous frame's gradients once per point
per level, and an update is only accepted when it does not increase the
photometric residual."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .image import Pyramid

MIN_EIGENVALUE = 1e-4


class Status(IntEnum):
    OK = 0
    DIVERGED = 1
    OUT_OF_BOUNDS = 2
    FB_FAILED = 3


@dataclass
class FlowParams:
    window: int = 21       # odd, >= 5
    max_iters: int = 30
    eps: float = 0.01      # update-norm convergence threshold, pixels
    max_level: int = 3
    max_residual: float = 12.0  # final photometric RMS gate, intensity units

    def validate(self, n_levels):
        if self.window < 5 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 5, got {self.window}")
        if self.max_level >= n_levels:
            raise ValueError(
                f"max_level {self.max_level} needs {self.max_level + 1} pyramid levels, "
                f"have {n_levels}"
            )


@dataclass
class FlowResult:
    tracked: np.ndarray    # (n, 2) positions in the current frame (level 0)
    status: np.ndarray     # (n,) Status values, uint8
    residual: np.ndarray   # (n,) final photometric RMS; inf when not OK

    def ok(self):
        return self.status == Status.OK


def _window_offsets(window):
    r = window // 2
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return dx.ravel().astype(np.intp), dy.ravel().astype(np.intp)


def _sample_windows(flat, w, grid, qx, qy):
    """Bilinear-sample one full window per point.

    The window offsets are integers, so every pixel of a point's window
    shares the point's fractional part: four integer-shifted gathers blended
    with per-point scalar weights. `grid` is offy * w + offx.
    """
    x0 = np.floor(qx)
    y0 = np.floor(qy)
    fx = (qx - x0)[:, None]
    fy = (qy - y0)[:, None]
    base = (y0.astype(np.intp) * w + x0.astype(np.intp))[:, None] + grid[None, :]
    # out-of-row reads only occur where the matching weight is exactly zero
    i00 = flat.take(base, mode="clip")
    i01 = flat.take(base + 1, mode="clip")
    i10 = flat.take(base + w, mode="clip")
    i11 = flat.take(base + w + 1, mode="clip")
    gxw = 1.0 - fx
    top = i00 * gxw + i01 * fx
    bot = i10 * gxw + i11 * fx
    return top * (1.0 - fy) + bot * fy


def track(prev: Pyramid, cur: Pyramid, points, params: FlowParams = None,
          iteration_log=None) -> FlowResult:
    """Track level-0 `points` (n, 2) from `prev` into `cur`.

    Per level, iterate d <- d + G^-1 b until |delta| < eps or max_iters,
    where G is the window structure tensor of prev gradients and b the
    image-difference projection. Flow propagates by scale_factor between
    levels. Points are flagged Diverged when min eig(G) < 1e-4 or |d|
    exceeds the window size at any level, OutOfBounds when either window
    leaves its image. `iteration_log`, when given, collects
    (level, point_index, residual) for every accepted iterate.
    """
    if params is None:
        params = FlowParams()
    if not prev.compatible(cur):
        raise ValueError("prev/cur pyramids have mismatched dims or scale")
    params.validate(prev.n_levels)

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    status = np.full(n, Status.OK, dtype=np.uint8)
    residual = np.full(n, np.inf)
    d = np.zeros((n, 2))
    if n == 0:
        return FlowResult(points.copy(), status, residual)

    offx, offy = _window_offsets(params.window)
    half = params.window // 2

    for level in range(params.max_level, -1, -1):
        img_p = prev.levels[level]
        img_c = cur.levels[level]
        gx, gy = prev.gradients(level)
        h, w = img_p.shape
        grid = offy * w + offx
        flat_p = img_p.ravel()
        flat_c = img_c.ravel()
        pos = prev.to_level(points, level)

        active = np.flatnonzero(status == Status.OK)
        if len(active) == 0:
            break

        px, py = pos[active, 0], pos[active, 1]
        in_prev = (
            (px - half >= 0) & (px + half <= w - 1)
            & (py - half >= 0) & (py + half <= h - 1)
        )
        if level == 0:
            # level 0 is definitive; coarser levels merely skip points whose
            # window does not fit there yet
            status[active[~in_prev]] = Status.OUT_OF_BOUNDS
        active = active[in_prev]
        if len(active) == 0:
            continue

        px, py = pos[active, 0], pos[active, 1]
        tmpl = _sample_windows(flat_p, w, grid, px, py)
        gxs = _sample_windows(gx.ravel(), w, grid, px, py)
        gys = _sample_windows(gy.ravel(), w, grid, px, py)

        gxx = (gxs * gxs).sum(axis=1)
        gxy = (gxs * gys).sum(axis=1)
        gyy = (gys * gys).sum(axis=1)
        trace = gxx + gyy
        det = gxx * gyy - gxy * gxy
        min_eig = 0.5 * (trace - np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0)))
        bad = min_eig < MIN_EIGENVALUE
        if level == 0:
            # definitive: a gradient-free window cannot be tracked
            status[active[bad]] = Status.DIVERGED
        # coarser levels may be blurred flat; skip them for such points
        keep = ~bad
        active = active[keep]
        if len(active) == 0:
            continue
        tmpl, gxs, gys = tmpl[keep], gxs[keep], gys[keep]
        inv_det = 1.0 / (gxx[keep] * gyy[keep] - gxy[keep] * gxy[keep])
        g11, g12, g22 = gyy[keep] * inv_det, -gxy[keep] * inv_det, gxx[keep] * inv_det

        res_at_d = np.full(len(active), np.inf)
        iterating = np.ones(len(active), dtype=bool)
        last_step = np.zeros((len(active), 2))
        npix = tmpl.shape[1]

        for _ in range(params.max_iters):
            rows = np.flatnonzero(iterating & (status[active] == Status.OK))
            if len(rows) == 0:
                break
            qx = px[rows] + d[active[rows], 0]
            qy = py[rows] + d[active[rows], 1]
            oob = ~(
                (qx - half >= 0) & (qx + half <= w - 1)
                & (qy - half >= 0) & (qy + half <= h - 1)
            )
            if oob.any():
                if level == 0:
                    status[active[rows[oob]]] = Status.OUT_OF_BOUNDS
                else:
                    # undo the step that left the level and stop refining here
                    out_rows = rows[oob]
                    d[active[out_rows]] -= last_step[out_rows]
                    iterating[out_rows] = False
                rows = rows[~oob]
                if len(rows) == 0:
                    break
                qx, qy = qx[~oob], qy[~oob]

            diff = tmpl[rows] - _sample_windows(flat_c, w, grid, qx, qy)
            res = np.sqrt((diff * diff).sum(axis=1) / npix)

            worse = res > res_at_d[rows]
            if worse.any():
                # damped retry: revert the offending step and try half of it
                # next round; only residual-decreasing iterates are accepted
                back = rows[worse]
                d[active[back]] -= last_step[back]
                last_step[back] *= 0.5
                tiny = np.hypot(last_step[back, 0], last_step[back, 1]) < params.eps
                iterating[back[tiny]] = False
                retry = back[~tiny]
                d[active[retry]] += last_step[retry]
                rows = rows[~worse]
                if len(rows) == 0:
                    continue
                diff, res = diff[~worse], res[~worse]
            res_at_d[rows] = res
            if iteration_log is not None:
                for r, rv in zip(rows, res):
                    iteration_log.append((level, int(active[r]), float(rv)))

            bx = (diff * gxs[rows]).sum(axis=1)
            by = (diff * gys[rows]).sum(axis=1)
            sx = g11[rows] * bx + g12[rows] * by
            sy = g12[rows] * bx + g22[rows] * by
            step = np.stack([sx, sy], axis=1)
            last_step[rows] = step
            d[active[rows]] += step

            small = np.hypot(sx, sy) < params.eps
            iterating[rows[small]] = False

            big = np.hypot(
                d[active[rows], 0], d[active[rows], 1]
            ) > params.window
            if big.any():
                status[active[rows[big]]] = Status.DIVERGED

        ok_rows = status[active] == Status.OK
        residual[active[ok_rows]] = res_at_d[ok_rows]
        if level > 0:
            d[active] *= prev.scale_factor

    # photometric acceptance: a window that still mismatches after refinement
    # has locked onto the wrong content (occlusion, appearance change)
    stalled = (status == Status.OK) & ~(residual <= params.max_residual)
    status[stalled] = Status.DIVERGED

    tracked = points + d
    tracked[status != Status.OK] = np.nan
    residual[status != Status.OK] = np.inf
    return FlowResult(tracked=tracked, status=status, residual=residual)


def fb_check(prev: Pyramid, cur: Pyramid, origin, result: FlowResult,
             fb_thresh, params: FlowParams = None) -> FlowResult:
    """Re-track OK points from cur back to prev; flag FB_FAILED where the
    round trip misses the origin by more than fb_thresh pixels.

    An infinite threshold leaves every status unchanged.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(-1, 2)
    status = result.status.copy()
    ok = np.flatnonzero(result.ok())
    if len(ok) == 0:
        return FlowResult(result.tracked.copy(), status, result.residual.copy())

    back = track(cur, prev, result.tracked[ok], params)
    err = np.full(len(ok), np.inf)
    bok = back.ok()
    err[bok] = np.linalg.norm(back.tracked[bok] - origin[ok][bok], axis=1)
    failed = err > fb_thresh  # inf > inf is False: infinite threshold is vacuous
    status[ok[failed]] = Status.FB_FAILED
    return FlowResult(result.tracked.copy(), status, result.residual.copy())
