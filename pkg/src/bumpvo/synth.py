"""Deterministic synthetic sequences: a pinhole camera rides a trajectory
over a textured ground plane, with pitch/roll/bounce vibration injectable
inside burst windows. Emits PGM frames, timestamps, ground truth, and a
manifest; byte-identical for identical config and seed."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, Trajectory, mat_to_quat
from .image import atomic_write_text, save_pgm, sequence_frame_name
from .trajectory import write_tum

TEXTURE_PERIOD = 64    # meters; the texture repeats with this period
TEXTURE_BASE_M = 8.0   # wavelength of the coarsest octave, meters
TEXTURE_LACUNARITY = 16  # frequency ratio between octaves

SKY_INTENSITY = 32


# ---------------------------------------------------------------------------
# Value-noise texture
# ---------------------------------------------------------------------------

def _hash01(ix, iy, key):
    """Lattice hash -> [0, 1): splitmix-style avalanche, pure in its inputs."""
    with np.errstate(over="ignore"):
        h = ix * np.uint64(0x9E3779B97F4A7C15)
        h = h ^ (iy * np.uint64(0xC2B2AE3D27D4EB4F))
        h = h ^ np.uint64((key * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
        h = h ^ (h >> np.uint64(30))
        h = h * np.uint64(0xBF58476D1CE4E5B9)
        h = h ^ (h >> np.uint64(27))
        h = h * np.uint64(0x94D049BB133111EB)
        h = h ^ (h >> np.uint64(31))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _octave_modulus(octave):
    # lattice spacing is TEXTURE_BASE_M / LACUNARITY^octave, so the lattice
    # repeats after TEXTURE_PERIOD / spacing cells
    m = TEXTURE_PERIOD * TEXTURE_LACUNARITY**octave / TEXTURE_BASE_M
    return int(round(m))


def lattice_value(ix, iy, seed, octave):
    """Raw lattice intensity in [0, 255] for one octave."""
    m = _octave_modulus(octave)
    ix = np.mod(np.asarray(ix), m).astype(np.uint64)
    iy = np.mod(np.asarray(iy), m).astype(np.uint64)
    return 255.0 * _hash01(ix, iy, seed * 1000003 + octave)


def texture(u, v, seed, octaves):
    """Multi-octave value noise on the plane, intensity in [0, 255].

    Octave o has lattice spacing TEXTURE_BASE_M / TEXTURE_LACUNARITY^o
    meters and amplitude 0.5^o; values are bilinear between seeded lattice
    hashes. Pure function of its arguments and periodic with TEXTURE_PERIOD
    meters. The wide frequency ratio keeps a dominant coarse octave (wide
    matching basins) while the finest octave retains visible contrast.
    """
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    acc = np.zeros_like(u)
    wsum = 0.0
    for o in range(octaves):
        freq = TEXTURE_LACUNARITY**o / TEXTURE_BASE_M
        m = _octave_modulus(o)
        lu = u * freq
        lv = v * freq
        i0 = np.floor(lu)
        j0 = np.floor(lv)
        fu = lu - i0
        fv = lv - j0
        i0m = np.mod(i0, m).astype(np.uint64)
        i1m = np.mod(i0 + 1, m).astype(np.uint64)
        j0m = np.mod(j0, m).astype(np.uint64)
        j1m = np.mod(j0 + 1, m).astype(np.uint64)
        key = seed * 1000003 + o
        v00 = _hash01(i0m, j0m, key)
        v10 = _hash01(i1m, j0m, key)
        v01 = _hash01(i0m, j1m, key)
        v11 = _hash01(i1m, j1m, key)
        val = (v00 * (1 - fu) + v10 * fu) * (1 - fv) + (v01 * (1 - fu) + v11 * fu) * fv
        amp = 0.5**o
        acc += amp * val
        wsum += amp
    return 255.0 * acc / wsum


# ---------------------------------------------------------------------------
# Scene and vibration
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    width: int = 640
    height: int = 480
    K: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(400.0, 400.0, 320.0, 240.0))
    camera_height: float = 1.5
    camera_pitch_deg: float = 30.0   # downward pitch of the optical axis
    plane_height: float = 0.0
    texture_seed: int = 1
    texture_octaves: int = 4
    far_limit: float = 1000.0

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("image dims must be at least 64x64")
        if self.camera_height <= self.plane_height:
            raise ValueError("camera must sit strictly above the plane")


@dataclass
class VibrationProfile:
    """Sinusoidal pitch/roll/height perturbation, active only inside burst
    windows; phases are drawn once from the seed."""

    pitch_amp_deg: float = 0.0
    roll_amp_deg: float = 0.0
    bounce_amp_m: float = 0.0
    freq_hz: float = 8.0
    windows: tuple = ()      # ((start_s, end_s), ...)
    seed: int = 0

    def __post_init__(self):
        if min(self.pitch_amp_deg, self.roll_amp_deg, self.bounce_amp_m) < 0:
            raise ValueError("vibration amplitudes must be >= 0")
        self.phases = np.random.default_rng(self.seed).uniform(0.0, 2.0 * math.pi, 3)

    def active(self, t):
        return any(s <= t <= e for s, e in self.windows)

    def offsets(self, t):
        """(pitch_rad, roll_rad, bounce_m) at time t; zero outside windows."""
        if not self.active(t):
            return 0.0, 0.0, 0.0
        w = 2.0 * math.pi * self.freq_hz
        return (
            math.radians(self.pitch_amp_deg) * math.sin(w * t + self.phases[0]),
            math.radians(self.roll_amp_deg) * math.sin(w * t + self.phases[1]),
            self.bounce_amp_m * math.sin(w * t + self.phases[2]),
        )


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


# Camera axes for zero yaw/pitch/roll: optical axis along world +x,
# camera-right along world -y, camera-down along world -z (z is up).
_R0_CAM = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def camera_pose(position, heading, pitch_down, roll=0.0) -> PoseSE3:
    """World-from-camera pose for a camera at `position` traveling along
    `heading` (radians about +z), pitched down by `pitch_down` radians."""
    R = _rot_z(heading) @ _rot_y(pitch_down) @ _rot_x(roll) @ _R0_CAM
    return PoseSE3(q=mat_to_quat(R), t=np.asarray(position, dtype=np.float64))


def generate_trajectory(duration, fps, speed, path_kind, arc_radius,
                        scene: SceneConfig, vib: VibrationProfile) -> Trajectory:
    """Ground-truth camera trajectory: constant speed along a straight line
    or an arc, pitched down, with vibration offsets inside burst windows."""
    if duration <= 0 or fps <= 0 or speed <= 0:
        raise ValueError("duration, fps, and speed must be positive")
    if path_kind not in ("straight", "arc"):
        raise ValueError(f"unknown path kind {path_kind!r}")
    n = int(round(duration * fps))
    times = np.arange(n) / fps
    pitch0 = math.radians(scene.camera_pitch_deg)

    poses = []
    for t in times:
        pv, rv, bounce = vib.offsets(t)
        z = scene.camera_height + bounce
        if z <= scene.plane_height:
            raise ValueError("bounce drives the camera below the plane")
        if path_kind == "straight":
            pos = (speed * t, 0.0, z)
            heading = 0.0
        else:
            if arc_radius <= 0:
                raise ValueError("arc path needs a positive radius")
            heading = speed * t / arc_radius
            pos = (arc_radius * math.sin(heading),
                   arc_radius * (1.0 - math.cos(heading)), z)
        poses.append(camera_pose(pos, heading, pitch0 + pv, rv))
    return Trajectory.from_poses(times, poses)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render(pose: PoseSE3, scene: SceneConfig):
    """Render the ground plane seen from a pose into a (h, w) uint8 image.

    Rays that miss the plane (at or above the horizon, or beyond the far
    limit) are filled with SKY_INTENSITY plus deterministic per-pixel noise
    of +/-2 so no region is ever featureless.
    """
    C = pose.t
    if C[2] <= scene.plane_height:
        raise ValueError("camera is not above the ground plane")
    R = pose.rotation()
    axis_z = R[:, 2]
    if axis_z[2] >= 0 or (scene.plane_height - C[2]) / axis_z[2] > scene.far_limit:
        raise ValueError("optical axis does not hit the plane within the far limit")

    K = scene.K
    h, w = scene.height, scene.width
    xs = (np.arange(w) - K.cx) / K.fx
    ys = (np.arange(h) - K.cy) / K.fy
    gx, gy = np.meshgrid(xs, ys)
    # world-frame ray directions: R @ (x, y, 1)
    dw_x = R[0, 0] * gx + R[0, 1] * gy + R[0, 2]
    dw_y = R[1, 0] * gx + R[1, 1] * gy + R[1, 2]
    dw_z = R[2, 0] * gx + R[2, 1] * gy + R[2, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = (scene.plane_height - C[2]) / dw_z
    hit = (dw_z < 0) & (t_hit > 0) & (t_hit <= scene.far_limit)

    px, py = np.meshgrid(np.arange(w, dtype=np.uint64), np.arange(h, dtype=np.uint64))
    noise = np.floor(_hash01(px, py, scene.texture_seed * 1000003 + 424243) * 5.0) - 2.0
    img = SKY_INTENSITY + noise

    u = C[0] + t_hit[hit] * dw_x[hit]
    v = C[1] + t_hit[hit] * dw_y[hit]
    img[hit] = np.rint(texture(u, v, scene.texture_seed, scene.texture_octaves))
    return np.clip(img, 0, 255).astype(np.uint8)


def plane_mask(pose: PoseSE3, scene: SceneConfig):
    """Boolean mask of pixels whose rays hit the plane (matches render)."""
    C = pose.t
    R = pose.rotation()
    K = scene.K
    xs = (np.arange(scene.width) - K.cx) / K.fx
    ys = (np.arange(scene.height) - K.cy) / K.fy
    gx, gy = np.meshgrid(xs, ys)
    dw_z = R[2, 0] * gx + R[2, 1] * gy + R[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = (scene.plane_height - C[2]) / dw_z
    return (dw_z < 0) & (t_hit > 0) & (t_hit <= scene.far_limit)


# ---------------------------------------------------------------------------
# Sequence generation
# ---------------------------------------------------------------------------

def generate_sequence(cfg, out_dir):
    """Render a full sequence from a SynthConfig: NNNNNN.pgm frames,
    times.txt, groundtruth.txt (TUM), and manifest.txt echoing the resolved
    config. Returns the ground-truth trajectory."""
    scene = cfg.scene()
    vib = cfg.vibration()
    traj = generate_trajectory(cfg.duration, cfg.fps, cfg.speed, cfg.path,
                               cfg.arc_radius, scene, vib)
    os.makedirs(out_dir, exist_ok=True)
    for i in range(len(traj)):
        save_pgm(render(traj.pose(i), scene), os.path.join(out_dir, sequence_frame_name(i)))
    atomic_write_text(
        os.path.join(out_dir, "times.txt"),
        "".join(f"{t:.9f}\n" for t in traj.times),
    )
    write_tum(traj, os.path.join(out_dir, "groundtruth.txt"))
    atomic_write_text(os.path.join(out_dir, "manifest.txt"), cfg.manifest())
    return traj
