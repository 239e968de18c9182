"""Rigid-body pose algebra and two-view relative pose estimation: normalized
coordinates, eight-point essential matrix, seeded RANSAC with Sampson
scoring, cheirality-based decomposition, DLT triangulation, median-depth
scale propagation, and relative-pose chaining."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FAR_DEPTH = 1e6          # triangulated depths beyond this count as "at infinity"
MIN_SHARED_TRACKS = 5    # shared triangulations needed to propagate scale


class DegenerateConfiguration(ValueError):
    """Input geometry does not constrain the model (rank loss, zero baseline)."""


class PoseEstimationFailed(RuntimeError):
    """RANSAC could not find a model with enough inliers."""


class AmbiguousPose(RuntimeError):
    """No essential-matrix decomposition candidate dominates cheirality."""


class ScaleLost(RuntimeError):
    """Too few shared tracks to propagate monocular scale."""


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z) and SE(3) poses
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    return q / n

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])

def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])

def quat_rotate(q, v):
    w, x, y, z = q
    qv = np.array([x, y, z])
    t = 2.0 * np.cross(qv, v)
    return np.asarray(v, dtype=np.float64) + w * t + np.cross(qv, t)

def quat_to_mat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])

def mat_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method, stable)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)

def rotation_angle(q):
    """Rotation angle of a unit quaternion, radians in [0, pi]."""
    return 2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0]))


@dataclass
class PoseSE3:
    """World-from-camera rigid pose: unit quaternion (w, x, y, z) plus the
    camera center in world coordinates."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        self.q = self.q / n

    @classmethod
    def identity(cls):
        return cls(q=np.array([1.0, 0, 0, 0]), t=np.zeros(3))

    @classmethod
    def from_rt(cls, R, t):
        return cls(q=mat_to_quat(R), t=t)

    def rotation(self):
        return quat_to_mat(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """this o other (apply `other` in this pose's local frame)."""
        q = quat_normalize(quat_mul(self.q, other.q))
        return PoseSE3(q=q, t=self.t + quat_rotate(self.q, other.t))

    def inverse(self) -> "PoseSE3":
        qi = quat_conj(self.q)
        return PoseSE3(q=qi, t=-quat_rotate(qi, self.t))

    def transform(self, pts):
        """Map camera-frame points into the world frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation().T + self.t


@dataclass
class Trajectory:
    """Timestamped pose sequence; timestamps strictly increasing."""

    times: np.ndarray       # (n,)
    positions: np.ndarray   # (n, 3)
    quats: np.ndarray       # (n, 4) unit, (w, x, y, z)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        n = len(self.times)
        if n < 1:
            raise ValueError("trajectory needs at least one entry")
        if len(self.positions) != n or len(self.quats) != n:
            raise ValueError("trajectory arrays must have equal length")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("trajectory quaternions must be unit")
        self.quats = self.quats / norms[:, None]

    def __len__(self):
        return len(self.times)

    def pose(self, i) -> PoseSE3:
        return PoseSE3(q=self.quats[i], t=self.positions[i])

    @classmethod
    def from_poses(cls, times, poses):
        return cls(
            times=np.asarray(times, dtype=np.float64),
            positions=np.stack([p.t for p in poses]),
            quats=np.stack([p.q for p in poses]),
        )

    def path_length(self):
        if len(self) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


def chain(relatives, timestamps) -> Trajectory:
    """Compose relative poses onto an identity start pose.

    relatives[i] is the pose of camera i+1 expressed in camera i's frame;
    len(timestamps) == len(relatives) + 1.
    """
    if len(timestamps) != len(relatives) + 1:
        raise ValueError("need exactly one timestamp per pose (relatives + 1)")
    poses = [PoseSE3.identity()]
    for rel in relatives:
        poses.append(poses[-1].compose(rel))
    return Trajectory.from_poses(timestamps, poses)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


def normalize_points(xy, K: CameraIntrinsics):
    """Pixels to unit-plane coordinates: x' = (x - cx) / fx, y' = (y - cy) / fy."""
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = (xy[..., 0] - K.cx) / K.fx
    out[..., 1] = (xy[..., 1] - K.cy) / K.fy
    return out


def denormalize_points(xy, K: CameraIntrinsics):
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = xy[..., 0] * K.fx + K.cx
    out[..., 1] = xy[..., 1] * K.fy + K.cy
    return out


# ---------------------------------------------------------------------------
# Essential matrix
# ---------------------------------------------------------------------------

def eight_point(x1, x2):
    """Least-squares essential matrix from >= 8 normalized correspondences,
    projected onto the essential manifold and scaled to ||E||_F = sqrt(2).

    Satisfies x2^T E x1 = 0. Raises DegenerateConfiguration when the linear
    system has rank < 8 (e.g. pure rotation or coplanar-with-centers input).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise DegenerateConfiguration(f"need >= 8 correspondences, got {n}")
    a1, b1 = x1[:, 0], x1[:, 1]
    a2, b2 = x2[:, 0], x2[:, 1]
    one = np.ones(n)
    A = np.stack([a2 * a1, a2 * b1, a2, b2 * a1, b2 * b1, b2, a1, b1, one], axis=1)
    _, s, vt = np.linalg.svd(A)
    # with exactly one null direction s has 8 nonzero values; a second
    # vanishing singular value means the constraints do not pin E down
    if s[7] <= 1e-9 * max(s[0], 1e-300):
        raise DegenerateConfiguration("epipolar system is rank-deficient")
    E = vt[-1].reshape(3, 3)
    u, _, vt_e = np.linalg.svd(E)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt_e


def sampson_distance(E, x1, x2):
    """First-order geometric distance to the epipolar constraint, unit plane."""
    x1h = np.column_stack([x1, np.ones(len(x1))])
    x2h = np.column_stack([x2, np.ones(len(x2))])
    Ex1 = x1h @ E.T
    Etx2 = x2h @ E
    num = np.einsum("ij,ij->i", x2h, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def ransac_essential(x1, x2, iters=200, thresh=0.00375, seed=0):
    """Seeded RANSAC eight-point fit; returns (E, inlier mask).

    Pure function of (x1, x2, iters, thresh, seed): sampling, scoring, and
    the lowest-iteration tie-break are all deterministic. The winning
    consensus set is refit and the mask recomputed against the refit model.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise PoseEstimationFailed(f"need >= 8 correspondences, got {n}")

    rng = np.random.default_rng(seed)
    best_count = 0
    best_mask = None
    for _ in range(iters):
        pick = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point(x1[pick], x2[pick])
        except DegenerateConfiguration:
            continue
        mask = sampson_distance(E, x1, x2) < thresh
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None or best_count < 8:
        raise PoseEstimationFailed(
            f"no model with >= 8 inliers in {iters} iterations (best {best_count})"
        )
    E = eight_point(x1[best_mask], x2[best_mask])
    mask = sampson_distance(E, x1, x2) < thresh
    if mask.sum() < 8:
        raise PoseEstimationFailed("consensus refit kept fewer than 8 inliers")
    return E, mask


def _triangulate_projective(P1, P2, x1, x2):
    """Batched linear (DLT) triangulation for projection matrices P (3x4)."""
    n = len(x1)
    A = np.empty((n, 4, 4))
    A[:, 0] = x1[:, 0, None] * P1[2] - P1[0]
    A[:, 1] = x1[:, 1, None] * P1[2] - P1[1]
    A[:, 2] = x2[:, 0, None] * P2[2] - P2[0]
    A[:, 3] = x2[:, 1, None] * P2[2] - P2[1]
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    w = X[:, 3]
    w = np.where(np.abs(w) < 1e-300, 1e-300, w)
    return X[:, :3] / w[:, None]


def decompose_essential(E, x1, x2):
    """Resolve the four-fold (R, t) ambiguity of an essential matrix by
    cheirality: the candidate placing the most points in front of both
    cameras wins and must lead the runner-up by at least 2x.

    Returns (R, t) with unit t, mapping camera-1 points as X2 = R X1 + t.
    """
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1, R2 = u @ W @ vt, u @ W.T @ vt
    t = u[:, 2]

    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    scores, results = [], []
    for R in (R1, R2):
        for tc in (t, -t):
            P2 = np.hstack([R, tc[:, None]])
            X = _triangulate_projective(P1, P2, x1, x2)
            z1 = X[:, 2]
            z2 = (X @ R.T + tc)[:, 2]
            good = (z1 > 0) & (z2 > 0) & (z1 < FAR_DEPTH) & (z2 < FAR_DEPTH)
            scores.append(int(good.sum()))
            results.append((R, tc))

    order = np.argsort(scores)[::-1]
    best, runner = scores[order[0]], scores[order[1]]
    if best < 1 or best < 2 * runner:
        raise AmbiguousPose(
            f"cheirality does not decide: best {best}, runner-up {runner}"
        )
    return results[order[0]]


def triangulate(pose_a: PoseSE3, pose_b: PoseSE3, x1, x2):
    """DLT triangulation of normalized pairs seen from two world poses.

    Returns (points_world (n, 3), depth_a, depth_b); depths are z in each
    camera frame, > FAR_DEPTH effectively meaning "at infinity".
    """
    baseline = np.linalg.norm(pose_a.t - pose_b.t)
    if baseline < 1e-9:
        raise DegenerateConfiguration(f"baseline {baseline} too small")
    Ta = np.linalg.inv(pose_a.matrix())[:3]
    Tb = np.linalg.inv(pose_b.matrix())[:3]
    X = _triangulate_projective(Ta, Tb, np.asarray(x1, float), np.asarray(x2, float))
    Xh = np.column_stack([X, np.ones(len(X))])
    depth_a = Xh @ Ta[2]
    depth_b = Xh @ Tb[2]
    return X, depth_a, depth_b


def propagate_scale(prev_depths, cur_depths):
    """Monocular scale ratio between two consecutive two-view pairs.

    Both arrays hold depths of the same shared tracks measured in the common
    frame. Returns median(prev / cur); multiply the current pair's relative
    translation by it before chaining. Raises ScaleLost with fewer than 5
    usable shared tracks.
    """
    prev_depths = np.asarray(prev_depths, dtype=np.float64)
    cur_depths = np.asarray(cur_depths, dtype=np.float64)
    good = (
        (prev_depths > 0) & (cur_depths > 0)
        & (prev_depths < FAR_DEPTH) & (cur_depths < FAR_DEPTH)
    )
    if good.sum() < MIN_SHARED_TRACKS:
        raise ScaleLost(f"only {int(good.sum())} shared tracks, need {MIN_SHARED_TRACKS}")
    return float(np.median(prev_depths[good] / cur_depths[good]))
