"""Frame-by-frame odometry driver: run the hybrid tracker over a sequence,
estimate keyframe-to-frame relative pose from the fused matches, chain poses
with median-depth scale propagation, and emit the trajectory plus stats.

Monocular scale is unobservable: the first estimated baseline is normalized
to 1 and later pairs are scaled by comparing triangulated depths of shared
tracks in the pair's common frame. Across a keyframe switch the common frame
is the switch frame itself, linked through descriptor match indices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .geometry import (
    AmbiguousPose,
    CameraIntrinsics,
    DegenerateConfiguration,
    PoseEstimationFailed,
    PoseSE3,
    ScaleLost,
    Trajectory,
    decompose_essential,
    normalize_points,
    propagate_scale,
    ransac_essential,
    triangulate,
)
from .hybrid import MIN_TRACKED_MATCHES, STATS_HEADER, Tracker
from .image import load_pgm


@dataclass
class PairDepths:
    """Triangulated depths of one keyframe pair, in trajectory units.

    by_kf: keyed by keyframe feature index (common frame = the keyframe).
    by_cur: keyed by current-frame feature index (descriptor matches only;
    links scale across a keyframe switch)."""

    kf_frame: int
    cur_frame: int
    by_kf: dict
    by_cur: dict


@dataclass
class RunResult:
    trajectory: Trajectory
    stats_rows: list
    n_lost: int
    n_scale_lost: int
    n_pose_failed: int

    def stats_csv(self):
        return STATS_HEADER + "\n" + "\n".join(r.csv() for r in self.stats_rows) + "\n"


class ScaleChain:
    """Holds the previous pair's scaled depths and resolves each new pair's
    translation magnitude."""

    def __init__(self):
        self.prev: PairDepths | None = None
        self.bootstrapped = False
        self.n_scale_lost = 0

    def resolve(self, kf_frame, prev_rel_magnitude, depths_kf_unit):
        """Scale for a new pair given unit-translation triangulated depths
        keyed by keyframe index. Returns (scale, PairDepths in scaled units)."""
        scale = None
        if self.prev is not None:
            if self.prev.kf_frame == kf_frame:
                shared = sorted(set(self.prev.by_kf) & set(depths_kf_unit))
                prev_d = np.array([self.prev.by_kf[i][0] for i in shared])
                cur_d = np.array([depths_kf_unit[i][0] for i in shared])
            elif self.prev.cur_frame == kf_frame:
                # keyframe switch: the common frame is the promoted frame
                shared = sorted(set(self.prev.by_cur) & set(depths_kf_unit))
                prev_d = np.array([self.prev.by_cur[i] for i in shared])
                cur_d = np.array([depths_kf_unit[i][0] for i in shared])
            else:
                shared, prev_d, cur_d = [], np.zeros(0), np.zeros(0)
            try:
                scale = propagate_scale(prev_d, cur_d)
            except ScaleLost:
                self.n_scale_lost += 1
                scale = None
        if scale is None:
            if not self.bootstrapped:
                scale = 1.0  # first baseline defines the trajectory unit
            else:
                # fall back: assume the same per-pair magnitude as last time
                scale = prev_rel_magnitude
        self.bootstrapped = True
        pair = PairDepths(
            kf_frame=kf_frame, cur_frame=-1,
            by_kf={i: (z[0] * scale, z[1] * scale) for i, z in depths_kf_unit.items()},
            by_cur={},
        )
        return scale, pair


def estimate_relative_pose(matches, kf_features, K: CameraIntrinsics, cfg: RunConfig,
                           seed):
    """Relative pose (current-from-keyframe) from fused matches via seeded
    RANSAC + cheirality decomposition. Returns (R, t_unit, inlier matches)."""
    kf_idx = np.array([m.kf_idx for m in matches])
    x_kf = normalize_points(kf_features.xy[kf_idx], K)
    x_cur = normalize_points(np.array([m.cur_pos for m in matches]), K)
    E, mask = ransac_essential(x_kf, x_cur, iters=cfg.ransac_iters,
                               thresh=cfg.ransac_px / K.fx, seed=seed)
    inl = np.flatnonzero(mask)
    R, t = decompose_essential(E, x_kf[mask], x_cur[mask])
    return R, t, [matches[i] for i in inl], x_kf[mask], x_cur[mask]


def run_sequence(image_paths, times, K: CameraIntrinsics, cfg: RunConfig,
                 mode="hybrid", seed=0, images=None) -> RunResult:
    """Run the tracker over a sequence and produce a pose per frame.

    `images` may carry preloaded arrays (for tests); otherwise frames load
    from image_paths. TrackingLost or failed pose estimation falls back to a
    constant-velocity extrapolation; the trajectory always has one pose per
    frame."""
    n = len(times)
    if n < 1:
        raise ValueError("empty sequence")

    tracker = Tracker(cfg, mode)
    chain = ScaleChain()
    poses = [PoseSE3.identity()]
    rel_last = PoseSE3.identity()           # last frame-to-frame motion
    prev_rel_magnitude = 0.0
    n_pose_failed = 0
    kf_poses = {0: PoseSE3.identity()}      # pose of every keyframe seen

    def load(i):
        if images is not None:
            return images[i]
        return load_pgm(image_paths[i])

    tracker.initialize(load(0), times[0])

    for i in range(1, n):
        out = tracker.track_frame(load(i), times[i])
        pose = None
        if not out.lost and len(out.matches) >= MIN_TRACKED_MATCHES:
            try:
                R, t_unit, inliers, x_kf, x_cur = estimate_relative_pose(
                    out.matches, out.kf_features_used, K, cfg, seed=seed + i)
                # triangulate with unit baseline: pose_b is the current
                # camera's pose expressed in the keyframe camera frame
                pose_b = PoseSE3.from_rt(R.T, -R.T @ t_unit)
                _, z_kf, z_cur = triangulate(PoseSE3.identity(), pose_b, x_kf, x_cur)
                depths_unit = {
                    m.kf_idx: (z_kf[k], z_cur[k]) for k, m in enumerate(inliers)
                }
                scale, pair = chain.resolve(out.kf_frame_used, prev_rel_magnitude,
                                            depths_unit)
                pair.cur_frame = i
                pair.by_cur = {
                    m.cur_idx: z_cur[k] * scale
                    for k, m in enumerate(inliers) if m.cur_idx is not None
                }
                chain.prev = pair
                rel_kf_cur = PoseSE3.from_rt(R.T, -R.T @ (t_unit * scale))
                pose = kf_poses[out.kf_frame_used].compose(rel_kf_cur)
                prev_rel_magnitude = scale
            except (PoseEstimationFailed, DegenerateConfiguration, AmbiguousPose):
                n_pose_failed += 1
                pose = None
        if pose is None:
            pose = poses[-1].compose(rel_last)       # constant velocity
        rel_last = poses[-1].inverse().compose(pose)
        poses.append(pose)
        if out.promoted:
            kf_poses[i] = pose

    traj = Trajectory.from_poses(times, poses)
    return RunResult(
        trajectory=traj,
        stats_rows=list(tracker.stats),
        n_lost=sum(r.lost for r in tracker.stats),
        n_scale_lost=chain.n_scale_lost,
        n_pose_failed=n_pose_failed,
    )
