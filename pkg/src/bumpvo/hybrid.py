"""Adaptive hybrid tracking: fuse descriptor matches with optical-flow
tracks against a keyframe, reject outliers with a rotation-consistency
histogram, and grow or shrink the flow-point budget with match starvation.

The controller starts at half the descriptor budget, doubles whenever the
post-filter match count falls below the floor, and decays geometrically in
calm frames, clamped to [n_flow_min, n_flow_max]."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .features import (
    ORIENTATION_RADIUS,
    FrameFeatures,
    MatchSet,
    extract,
    match,
    orientation_batch,
)
from .flow import FlowParams, fb_check, track
from .image import Pyramid, build_pyramid, gaussian_blur

SOURCE_DESCRIPTOR = "descriptor"
SOURCE_FLOW = "flow"

MODE_HYBRID = "hybrid"
MODE_DESCRIPTOR_ONLY = "descriptor-only"
MODE_FLOW_ONLY = "flow-only"
MODES = (MODE_HYBRID, MODE_DESCRIPTOR_ONLY, MODE_FLOW_ONLY)

# fewer fused matches than this flags the frame as TrackingLost
MIN_TRACKED_MATCHES = 8

STATS_HEADER = "frame,desc_matches,flow_matches,post_filter,flow_budget,lost"


@dataclass(frozen=True)
class Match:
    """One fused keyframe-to-current correspondence.

    cur_idx indexes the current frame's features and is present exactly for
    descriptor-sourced matches; score is a Hamming distance for descriptor
    matches and a photometric RMS residual for flow matches."""

    kf_idx: int
    cur_pos: tuple
    cur_idx: int | None
    source: str
    score: float


@dataclass(frozen=True)
class BudgetController:
    n_features: int
    n_flow: int
    n_flow_min: int
    n_flow_max: int
    match_floor: int
    multiplier: float
    decay: float

    @classmethod
    def create(cls, n_features, match_floor=50, multiplier=2.0, decay=0.9,
               n_flow_min=None, n_flow_max=None):
        if n_flow_min is None:
            n_flow_min = n_features // 8
        if n_flow_max is None:
            n_flow_max = 2 * n_features
        if not (0 <= n_flow_min <= n_flow_max):
            raise ValueError("need 0 <= n_flow_min <= n_flow_max")
        start = min(max(n_features // 2, n_flow_min), n_flow_max)
        return cls(n_features=n_features, n_flow=start, n_flow_min=n_flow_min,
                   n_flow_max=n_flow_max, match_floor=match_floor,
                   multiplier=multiplier, decay=decay)

    def update(self, n_matched) -> "BudgetController":
        return update_budget(self, n_matched)


def update_budget(c: BudgetController, n_matched) -> BudgetController:
    """One controller step: grow by `multiplier` on starvation, otherwise
    shrink by `decay`, always clamped. All other fields unchanged."""
    if n_matched < 0:
        raise ValueError(f"n_matched must be >= 0, got {n_matched}")
    if n_matched < c.match_floor:
        n_flow = min(int(round(c.n_flow * c.multiplier)), c.n_flow_max)
    else:
        n_flow = max(int(round(c.n_flow * c.decay)), c.n_flow_min)
    return replace(c, n_flow=n_flow)


def replay_budget(controller: BudgetController, post_filter_counts):
    """Budget sequence the controller produces for a post-filter count
    series; element i is the budget in effect at step i."""
    budgets = []
    for count in post_filter_counts:
        budgets.append(controller.n_flow)
        controller = controller.update(count)
    return budgets


def select_flow_points(features: FrameFeatures, n_flow):
    """Indices and positions of the n_flow highest-response keypoints,
    ties broken by index order."""
    if n_flow < 0:
        raise ValueError(f"n_flow must be >= 0, got {n_flow}")
    if n_flow == 0 or len(features) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros((0, 2))
    order = np.lexsort((np.arange(len(features)), -features.response))[:n_flow]
    idx = np.sort(order)
    return idx, features.xy[idx]


def fuse(desc: MatchSet, cur_features: FrameFeatures, flow_kf_idx, flow_result,
         disagree_thresh) -> list:
    """Merge descriptor and flow evidence into one Match per keyframe index.

    Agreement within disagree_thresh keeps the descriptor match; positional
    disagreement beyond it drops both sources; a single source passes
    through. Output sorted by kf_idx."""
    desc_by_kf = {}
    for i, j, dist in zip(desc.idx_a, desc.idx_b, desc.distance):
        desc_by_kf[int(i)] = (cur_features.xy[j], int(j), float(dist))

    flow_by_kf = {}
    if flow_result is not None and len(flow_kf_idx):
        ok = flow_result.ok()
        for k, kf_i in enumerate(flow_kf_idx):
            if ok[k]:
                flow_by_kf[int(kf_i)] = (flow_result.tracked[k], float(flow_result.residual[k]))

    out = []
    for kf_i in sorted(set(desc_by_kf) | set(flow_by_kf)):
        d = desc_by_kf.get(kf_i)
        f = flow_by_kf.get(kf_i)
        if d is not None and f is not None:
            if np.linalg.norm(d[0] - f[0]) > disagree_thresh:
                continue  # inconsistent evidence: trust neither
            pos, cur_idx, score, source = d[0], d[1], d[2], SOURCE_DESCRIPTOR
        elif d is not None:
            pos, cur_idx, score, source = d[0], d[1], d[2], SOURCE_DESCRIPTOR
        else:
            pos, cur_idx, score, source = f[0], None, f[1], SOURCE_FLOW
        out.append(Match(kf_idx=kf_i, cur_pos=(float(pos[0]), float(pos[1])),
                         cur_idx=cur_idx, source=source, score=score))
    return out


def rotation_filter(matches, kf: FrameFeatures, cur_img, bins=30, keep_top=3):
    """Keep matches whose keyframe-to-current orientation change falls in the
    dominant histogram bins.

    Up to keep_top nonempty bins are selected by population (ties to the
    lower bin index); a selected bin must also hold at least 10% of the top
    bin's population. Matches whose current-frame orientation patch exits the
    image are dropped silently; returns (kept, n_patch_dropped)."""
    if bins < 3:
        raise ValueError(f"bins must be >= 3, got {bins}")
    if keep_top < 1:
        raise ValueError(f"keep_top must be >= 1, got {keep_top}")
    if not matches:
        return [], 0

    h, w = cur_img.shape
    r = ORIENTATION_RADIUS
    pts = np.array([m.cur_pos for m in matches])
    xi = np.rint(pts).astype(np.intp)
    fits = (
        (xi[:, 0] >= r) & (xi[:, 0] < w - r) & (xi[:, 1] >= r) & (xi[:, 1] < h - r)
    )
    dropped = int((~fits).sum())
    idx = np.flatnonzero(fits)
    if len(idx) == 0:
        return [], dropped

    cur_angles = orientation_batch(np.asarray(cur_img, dtype=np.float64), xi[idx])
    kf_angles = kf.angle[np.array([matches[i].kf_idx for i in idx])]
    delta = np.mod(kf_angles - cur_angles, 2.0 * math.pi)
    bin_width = 2.0 * math.pi / bins
    which = np.minimum((delta / bin_width).astype(np.intp), bins - 1)

    counts = np.bincount(which, minlength=bins)
    nonempty = np.flatnonzero(counts)
    order = nonempty[np.lexsort((nonempty, -counts[nonempty]))][:keep_top]
    top = counts[order[0]]
    selected = {int(b) for b in order if counts[b] >= 0.1 * top}

    kept = [matches[i] for i, b in zip(idx, which) if int(b) in selected]
    return kept, dropped


@dataclass
class StatsRow:
    frame: int
    desc_matches: int
    flow_matches: int
    post_filter: int
    flow_budget: int
    lost: int

    def csv(self):
        return (f"{self.frame},{self.desc_matches},{self.flow_matches},"
                f"{self.post_filter},{self.flow_budget},{self.lost}")


def parse_stats_csv(text):
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != STATS_HEADER:
        raise ValueError("stats CSV missing header")
    rows = []
    for ln in lines[1:]:
        vals = [int(v) for v in ln.split(",")]
        rows.append(StatsRow(*vals))
    return rows


@dataclass
class FrameOutput:
    matches: list
    stats: StatsRow
    lost: bool
    promoted: bool
    features: FrameFeatures
    pyramid: Pyramid
    kf_features_used: FrameFeatures = None  # keyframe the matches refer to
    kf_frame_used: int = -1


class Tracker:
    """Keyframe-based hybrid front-end; owns the keyframe, the budget
    controller, and the append-only stats log."""

    def __init__(self, config: RunConfig, mode=MODE_HYBRID):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        if mode == MODE_DESCRIPTOR_ONLY:
            self.controller = BudgetController.create(
                config.n_features, config.match_floor, config.budget_multiplier,
                config.budget_decay, n_flow_min=0, n_flow_max=0)
        else:
            self.controller = BudgetController.create(
                config.n_features, config.match_floor, config.budget_multiplier,
                config.budget_decay)
        self.kf_features = None
        self.kf_pyramid = None
        self.kf_flow_pyramid = None
        self.kf_frame = -1
        self.frame_count = 0
        self.stats = []
        self._flow_params = FlowParams(
            window=config.lk_window, max_iters=config.lk_max_iters,
            eps=config.lk_eps, max_level=config.lk_max_level,
            max_residual=config.lk_max_residual)

    def preprocess(self, image):
        """Blur once, then build the feature pyramid and the coarser flow
        pyramid from the same smoothed frame."""
        smoothed = gaussian_blur(image, self.config.preprocess_sigma)
        feat_pyr = build_pyramid(smoothed, self.config.n_levels,
                                 self.config.scale_factor)
        flow_pyr = build_pyramid(smoothed, self.config.flow_levels,
                                 self.config.flow_scale)
        return feat_pyr, flow_pyr

    def _extract(self, pyramid, frame_id, timestamp):
        return extract(pyramid, self.config.n_features, self.config.fast_threshold,
                       frame_id=frame_id, timestamp=timestamp)

    def initialize(self, image, timestamp=0.0):
        """Seed the keyframe from the first frame; no stats row is logged."""
        pyramid, flow_pyr = self.preprocess(image)
        features = self._extract(pyramid, 0, timestamp)
        self.kf_features, self.kf_pyramid = features, pyramid
        self.kf_flow_pyramid, self.kf_frame = flow_pyr, 0
        self.frame_count = 1
        return features

    def track_frame(self, image, timestamp=0.0) -> FrameOutput:
        """Match the frame against the keyframe: extract, descriptor-match,
        LK-track the top flow points, validate, fuse, rotation-filter,
        update the budget, and decide keyframe promotion."""
        if self.kf_features is None:
            raise RuntimeError("tracker not initialized with a keyframe")
        cfg = self.config
        frame_id = self.frame_count
        pyramid, flow_pyr = self.preprocess(image)
        features = self._extract(pyramid, frame_id, timestamp)

        if self.mode == MODE_FLOW_ONLY or len(features) == 0 or len(self.kf_features) == 0:
            desc = MatchSet(np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp),
                            np.zeros(0))
        else:
            desc = match(self.kf_features, features,
                         max_hamming=cfg.match_max_hamming, ratio=cfg.match_ratio)

        budget_used = self.controller.n_flow
        flow_idx, flow_pts = select_flow_points(self.kf_features, budget_used)
        if len(flow_idx):
            flow_res = track(self.kf_flow_pyramid, flow_pyr, flow_pts,
                             self._flow_params)
            flow_res = fb_check(self.kf_flow_pyramid, flow_pyr, flow_pts, flow_res,
                                cfg.fb_thresh, self._flow_params)
        else:
            flow_res = None
        n_flow_ok = int(flow_res.ok().sum()) if flow_res is not None else 0

        fused = fuse(desc, features, flow_idx, flow_res, cfg.fuse_disagree_px)
        kept, _ = rotation_filter(fused, self.kf_features, pyramid.levels[0],
                                  bins=cfg.rot_bins, keep_top=cfg.rot_keep_top)
        n_post = len(kept)
        lost = n_post < MIN_TRACKED_MATCHES

        row = StatsRow(frame=frame_id, desc_matches=len(desc),
                       flow_matches=n_flow_ok, post_filter=n_post,
                       flow_budget=budget_used, lost=int(lost))
        self.stats.append(row)
        self.controller = self.controller.update(n_post)

        kf_features_used = self.kf_features
        kf_frame_used = self.kf_frame
        promoted = False
        gap = frame_id - self.kf_frame
        if lost:
            promoted = len(features) >= MIN_TRACKED_MATCHES  # re-seed when possible
        elif (n_post < cfg.promote_ratio * len(self.kf_features)
              or gap >= cfg.max_kf_gap):
            promoted = len(features) >= MIN_TRACKED_MATCHES
        if promoted:
            self.kf_features, self.kf_pyramid = features, pyramid
            self.kf_flow_pyramid, self.kf_frame = flow_pyr, frame_id

        self.frame_count += 1
        return FrameOutput(matches=kept, stats=row, lost=lost, promoted=promoted,
                           features=features, pyramid=pyramid,
                           kf_features_used=kf_features_used,
                           kf_frame_used=kf_frame_used)
