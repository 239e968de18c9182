"""Trajectory error metrics: Umeyama similarity alignment, absolute
trajectory error (ATE), relative pose error (RPE), and deterministic SVG
trajectory plots."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import PoseSE3, Trajectory, mat_to_quat, quat_to_mat, rotation_angle
from .image import atomic_write_text
from .trajectory import associate


class DegenerateAlignment(ValueError):
    """Point sets do not constrain the alignment (fewer than 3 points or
    collinear)."""


class InsufficientOverlap(RuntimeError):
    """Not enough associated pairs for the requested RPE delta."""


@dataclass
class AlignmentTransform:
    """Similarity mapping src -> dst: p' = scale * R p + t."""

    scale: float
    q: np.ndarray  # unit quaternion (w, x, y, z)
    t: np.ndarray

    def apply(self, pts):
        R = quat_to_mat(self.q)
        return self.scale * (np.asarray(pts, dtype=np.float64) @ R.T) + self.t


@dataclass
class ErrorStats:
    rmse: float
    mean: float
    median: float
    min: float
    max: float
    n: int

    @classmethod
    def from_residuals(cls, r):
        r = np.asarray(r, dtype=np.float64)
        if len(r) == 0:
            raise ValueError("no residuals")
        return cls(
            rmse=float(np.sqrt(np.mean(r * r))),
            mean=float(np.mean(r)),
            median=float(np.median(r)),
            min=float(np.min(r)),
            max=float(np.max(r)),
            n=len(r),
        )

    def as_dict(self, prefix=""):
        return {
            f"{prefix}rmse": self.rmse, f"{prefix}mean": self.mean,
            f"{prefix}median": self.median, f"{prefix}min": self.min,
            f"{prefix}max": self.max, f"{prefix}n": self.n,
        }


def umeyama(src, dst, with_scale=True) -> AlignmentTransform:
    """Closed-form least-squares similarity (or rigid) alignment minimizing
    sum ||dst - (s R src + t)||^2, with reflection correction."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) != len(dst):
        raise ValueError("point sets must have equal length")
    if len(src) < 3:
        raise DegenerateAlignment(f"need >= 3 point pairs, got {len(src)}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateAlignment("point sets are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        S[2, 2] = -1.0
    R = u @ S @ vt
    if with_scale:
        var_s = (xs * xs).sum() / len(src)
        scale = float(np.trace(np.diag(d) @ S) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * (R @ mu_s)
    return AlignmentTransform(scale=scale, q=mat_to_quat(R), t=t)


def ate(est: Trajectory, gt: Trajectory, with_scale=True, max_dt=0.02):
    """Absolute trajectory error: associate, align est onto gt, report
    per-pose position residual statistics. Returns (ErrorStats, transform)."""
    ie, ig = associate(est, gt, max_dt)
    if len(ie) < 3:
        raise DegenerateAlignment(f"need >= 3 associated pairs, got {len(ie)}")
    transform = umeyama(est.positions[ie], gt.positions[ig], with_scale)
    residuals = np.linalg.norm(
        gt.positions[ig] - transform.apply(est.positions[ie]), axis=1
    )
    return ErrorStats.from_residuals(residuals), transform


def rpe(est: Trajectory, gt: Trajectory, delta=1, max_dt=0.02):
    """Relative pose error over a frame interval.

    E_i = (gt_i^-1 gt_{i+delta})^-1 (est_i^-1 est_{i+delta}); returns
    (translational ErrorStats in trajectory units, rotational ErrorStats
    in degrees)."""
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    ie, ig = associate(est, gt, max_dt)
    if len(ie) < delta + 1:
        raise InsufficientOverlap(
            f"{len(ie)} associated pairs cannot support delta={delta}"
        )
    trans_err, rot_err = [], []
    for k in range(len(ie) - delta):
        e0, e1 = est.pose(ie[k]), est.pose(ie[k + delta])
        g0, g1 = gt.pose(ig[k]), gt.pose(ig[k + delta])
        rel_e = e0.inverse().compose(e1)
        rel_g = g0.inverse().compose(g1)
        err = rel_g.inverse().compose(rel_e)
        trans_err.append(np.linalg.norm(err.t))
        rot_err.append(math.degrees(rotation_angle(err.q)))
    return ErrorStats.from_residuals(trans_err), ErrorStats.from_residuals(rot_err)


# ---------------------------------------------------------------------------
# Deterministic SVG plots
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_SVG_W, _SVG_H = 800, 600
_SVG_MARGIN = 60


def _nice_ticks(lo, hi, target=5):
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12 * span:
        ticks.append(0.0 if abs(v) < step * 1e-9 else v)
        v += step
    return ticks


def render_svg(named_trajectories) -> str:
    """Top-down (x, y) polyline plot with metric axis ticks and a legend.

    Pure string construction with fixed number formatting: identical input
    yields byte-identical SVG.
    """
    if not named_trajectories:
        raise ValueError("no trajectories to plot")
    xs = np.concatenate([t.positions[:, 0] for _, t in named_trajectories])
    ys = np.concatenate([t.positions[:, 1] for _, t in named_trajectories])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    pad_x = 0.05 * (x1 - x0) or 1.0
    pad_y = 0.05 * (y1 - y0) or 1.0
    x0, x1 = x0 - pad_x, x1 + pad_x
    y0, y1 = y0 - pad_y, y1 + pad_y

    iw = _SVG_W - 2 * _SVG_MARGIN
    ih = _SVG_H - 2 * _SVG_MARGIN

    def px(x):
        return _SVG_MARGIN + (x - x0) / (x1 - x0) * iw

    def py(y):
        # y grows upward in world coordinates
        return _SVG_H - _SVG_MARGIN - (y - y0) / (y1 - y0) * ih

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<rect x="{_SVG_MARGIN}" y="{_SVG_MARGIN}" width="{iw}" height="{ih}" '
        f'fill="none" stroke="#888888" stroke-width="1"/>',
    ]
    for tx in _nice_ticks(x0, x1):
        x = px(tx)
        out.append(
            f'<line x1="{x:.2f}" y1="{_SVG_H - _SVG_MARGIN}" x2="{x:.2f}" '
            f'y2="{_SVG_H - _SVG_MARGIN + 6}" stroke="#444444" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{_SVG_H - _SVG_MARGIN + 20}" font-size="12" '
            f'text-anchor="middle" fill="#444444">{tx:g} m</text>'
        )
    for ty in _nice_ticks(y0, y1):
        y = py(ty)
        out.append(
            f'<line x1="{_SVG_MARGIN - 6}" y1="{y:.2f}" x2="{_SVG_MARGIN}" '
            f'y2="{y:.2f}" stroke="#444444" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{_SVG_MARGIN - 10}" y="{y + 4:.2f}" font-size="12" '
            f'text-anchor="end" fill="#444444">{ty:g} m</text>'
        )

    for k, (name, traj) in enumerate(named_trajectories):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        pts = " ".join(
            f"{px(x):.3f},{py(y):.3f}"
            for x, y in zip(traj.positions[:, 0], traj.positions[:, 1])
        )
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = _SVG_MARGIN + 18 + 18 * k
        out.append(
            f'<line x1="{_SVG_W - 190}" y1="{ly - 4}" x2="{_SVG_W - 160}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        out.append(
            f'<text x="{_SVG_W - 152}" y="{ly}" font-size="13" fill="#222222">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_svg(named_trajectories, path):
    atomic_write_text(path, render_svg(named_trajectories))
