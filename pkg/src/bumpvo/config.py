"""Flat `key = value` config files for sequence generation and odometry runs.

Unknown keys and type errors are reported by key name; the resolved config is
echoed verbatim into run manifests so every run is reproducible from its
output directory alone."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .geometry import CameraIntrinsics


class ConfigError(ValueError):
    """Bad config file: missing key, unknown key, or unparsable value."""


def parse_kv(path):
    """Parse `key = value` lines; `#` starts a comment, blanks ignored."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(raw, key, typ):
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(f"invalid value for key '{key}': {raw!r}") from None


def _build(cls, raw, required=(), path="<config>"):
    spec = {f.name: f.type for f in fields(cls)}
    typed = {"int": int, "float": float, "str": str, "bool": bool,
             int: int, float: float, str: str, bool: bool}
    values = {}
    for key, rawval in raw.items():
        if key not in spec:
            raise ConfigError(f"{path}: unknown config key '{key}'")
        values[key] = _coerce(rawval, key, typed[spec[key]])
    for key in required:
        if key not in values:
            raise ConfigError(f"{path}: missing required key '{key}'")
    return cls(**values)


def _manifest(obj):
    lines = [f"{f.name} = {getattr(obj, f.name)}" for f in fields(obj)]
    return "\n".join(lines) + "\n"


def parse_windows(spec):
    """'0.5:1.5,2.0:2.5' -> ((0.5, 1.5), (2.0, 2.5)); empty string -> ()."""
    spec = spec.strip()
    if not spec:
        return ()
    out = []
    for part in spec.split(","):
        try:
            s, e = part.split(":")
            s, e = float(s), float(e)
        except ValueError:
            raise ConfigError(f"invalid burst window {part!r}") from None
        if e < s:
            raise ConfigError(f"burst window {part!r} ends before it starts")
        out.append((s, e))
    return tuple(out)


@dataclass
class SynthConfig:
    """Sequence-generator settings; `seed`, `duration`, `fps`, `speed`, and
    `path` are required in config files, everything else has defaults."""

    seed: int = 0
    duration: float = 2.0
    fps: float = 10.0
    speed: float = 1.0
    path: str = "straight"          # straight | arc
    arc_radius: float = 20.0
    width: int = 640
    height: int = 480
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    camera_height: float = 1.5
    camera_pitch_deg: float = 30.0
    plane_height: float = 0.0
    texture_octaves: int = 4
    pitch_amp_deg: float = 0.0
    roll_amp_deg: float = 0.0
    bounce_amp_m: float = 0.0
    vib_freq_hz: float = 8.0
    vib_windows: str = ""           # "start:end,start:end" seconds

    REQUIRED = ("seed", "duration", "fps", "speed", "path")

    @classmethod
    def from_file(cls, path):
        return _build(cls, parse_kv(path), required=cls.REQUIRED, path=str(path))

    def scene(self):
        from .synth import SceneConfig
        return SceneConfig(
            width=self.width, height=self.height,
            K=CameraIntrinsics(self.fx, self.fy, self.cx, self.cy),
            camera_height=self.camera_height,
            camera_pitch_deg=self.camera_pitch_deg,
            plane_height=self.plane_height,
            texture_seed=self.seed,
            texture_octaves=self.texture_octaves,
        )

    def vibration(self):
        from .synth import VibrationProfile
        return VibrationProfile(
            pitch_amp_deg=self.pitch_amp_deg,
            roll_amp_deg=self.roll_amp_deg,
            bounce_amp_m=self.bounce_amp_m,
            freq_hz=self.vib_freq_hz,
            windows=parse_windows(self.vib_windows),
            seed=self.seed,
        )

    def manifest(self):
        return _manifest(self)


@dataclass
class RunConfig:
    """Every odometry tunable; mode and seed arrive via CLI flags."""

    # feature extraction
    n_features: int = 1000
    fast_threshold: float = 8.0
    n_levels: int = 8
    scale_factor: float = 1.2
    preprocess_sigma: float = 1.0
    # descriptor matching
    match_max_hamming: int = 64
    match_ratio: float = 0.8
    # optical flow (tracked on its own coarser pyramid for capture range)
    lk_window: int = 21
    lk_max_iters: int = 30
    lk_eps: float = 0.01
    lk_max_level: int = 3
    lk_max_residual: float = 12.0
    flow_levels: int = 4
    flow_scale: float = 2.0
    fb_thresh: float = 1.0
    # fusion and rotation check
    fuse_disagree_px: float = 2.0
    rot_bins: int = 30
    rot_keep_top: int = 3
    # adaptive flow budget
    match_floor: int = 50
    budget_multiplier: float = 2.0
    budget_decay: float = 0.9
    # keyframe policy
    promote_ratio: float = 0.4
    max_kf_gap: int = 20
    # pose estimation
    ransac_iters: int = 200
    ransac_px: float = 1.5
    min_matches: int = 8
    # camera (0 = take from the sequence manifest)
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    @classmethod
    def from_file(cls, path):
        return cls() if path is None else _build(cls, parse_kv(path), path=str(path))

    def intrinsics(self, manifest_values=None):
        """Camera intrinsics: config overrides win, then the sequence
        manifest, then the generator defaults."""
        vals = {}
        for key, default in (("fx", 400.0), ("fy", 400.0), ("cx", 320.0), ("cy", 240.0)):
            own = getattr(self, key)
            if own > 0:
                vals[key] = own
            elif manifest_values and key in manifest_values:
                vals[key] = float(manifest_values[key])
            else:
                vals[key] = default
        return CameraIntrinsics(**vals)

    def manifest(self):
        return _manifest(self)
