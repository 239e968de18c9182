"""TUM-format trajectory I/O and timestamp association.

File format: `timestamp tx ty tz qx qy qz qw` per line, space separated,
`#` comments allowed. Values are written with 9 decimal places so the
read-write round trip is identity to within 1e-9.
"""

from __future__ import annotations

import numpy as np

from .geometry import Trajectory
from .image import atomic_write_text

QUAT_NORM_TOLERANCE = 1e-3


class EmptyAssociation(RuntimeError):
    """No timestamp pairs within the association window."""


def read_tum(path) -> Trajectory:
    """Parse a TUM trajectory file; quaternions are renormalized and must be
    within 1e-3 of unit norm."""
    times, positions, quats = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}"
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed number") from None
            t, tx, ty, tz, qx, qy, qz, qw = vals
            norm = np.linalg.norm([qw, qx, qy, qz])
            if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
                raise ValueError(
                    f"{path}:{lineno}: quaternion norm {norm:.6f} outside tolerance"
                )
            if times and t <= times[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps not strictly increasing")
            times.append(t)
            positions.append([tx, ty, tz])
            quats.append(np.array([qw, qx, qy, qz]) / norm)
    if not times:
        raise ValueError(f"{path}: no trajectory entries")
    return Trajectory(times=np.array(times), positions=np.array(positions),
                      quats=np.array(quats))


def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, p, q in zip(traj.times, traj.positions, traj.quats):
        w, x, y, z = q
        lines.append(
            f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
            f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}"
        )
    return "\n".join(lines) + "\n"


def write_tum(traj: Trajectory, path):
    atomic_write_text(path, format_tum(traj))


def associate(a: Trajectory, b: Trajectory, max_dt=0.02):
    """Greedy nearest-timestamp pairing: walk a's entries in time order,
    match each to the closest unused b entry within max_dt. Returns parallel
    index arrays (into a, into b). Raises EmptyAssociation when no pair fits."""
    if max_dt < 0:
        raise ValueError(f"max_dt must be >= 0, got {max_dt}")
    used = np.zeros(len(b), dtype=bool)
    ia, ib = [], []
    for i, t in enumerate(a.times):
        free = np.flatnonzero(~used)
        if len(free) == 0:
            break
        dts = np.abs(b.times[free] - t)
        k = int(np.argmin(dts))
        if dts[k] <= max_dt:
            used[free[k]] = True
            ia.append(i)
            ib.append(int(free[k]))
    if not ia:
        raise EmptyAssociation(
            f"no timestamp pairs within {max_dt} s between the two trajectories"
        )
    return np.array(ia, dtype=np.intp), np.array(ib, dtype=np.intp)
