"""Keypose discovery in raw demonstrations and segment interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DomainError, ValidationError
from .geometry import geodesic_interpolate, matrix_to_six_d, six_d_to_matrix

GRIPPER = "gripper"
STOP = "stop"
ACCELERATION = "acceleration"
RLBENCH_RULES = (GRIPPER, STOP)
CALVIN_RULES = (GRIPPER, STOP, ACCELERATION)

DEFAULT_VEL_EPS = 1e-2
DEFAULT_MIN_GAP = 2
ACC_MEDIAN_FACTOR = 3.0


@dataclass
class Action:
    pos: np.ndarray
    rot: np.ndarray
    open: bool

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(6)
        if not np.all(np.isfinite(self.pos)):
            raise ValidationError("action position must be finite")
        self.open = bool(self.open)


@dataclass
class RawTrajectory:
    """Time-stamped end-effector states; positions (N,3), rotations (N,6), open (N,)."""

    timestamps: np.ndarray
    pos: np.ndarray
    rot: np.ndarray
    open: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        self.rot = np.asarray(self.rot, dtype=np.float64)
        self.open = np.asarray(self.open).astype(bool)
        n = len(self.timestamps)
        if n < 2:
            raise DomainError(f"a raw trajectory needs at least 2 steps, got {n}")
        if self.pos.shape != (n, 3) or self.rot.shape != (n, 6) or self.open.shape != (n,):
            raise ValidationError("trajectory channels do not match the number of timestamps")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    def action(self, i: int) -> Action:
        return Action(self.pos[i], self.rot[i], self.open[i])

    def velocity(self) -> np.ndarray:
        """Per-step finite differences (metres per step)."""
        return np.gradient(self.pos, axis=0)

    def acceleration(self) -> np.ndarray:
        return np.gradient(self.velocity(), axis=0)

    def reversed(self) -> "RawTrajectory":
        ts = self.timestamps[-1] + self.timestamps[0] - self.timestamps[::-1]
        return RawTrajectory(ts, self.pos[::-1].copy(), self.rot[::-1].copy(), self.open[::-1].copy())


def extract_keyposes(traj: RawTrajectory, vel_eps: float = DEFAULT_VEL_EPS, acc_eps: float | None = None,
                     min_gap: int = DEFAULT_MIN_GAP, rules=RLBENCH_RULES) -> list[int]:
    """Indices of keyposes.

    A step is a candidate when the gripper state differs from the previous
    step, when the speed drops below ``vel_eps`` after being at or above it,
    or (with the acceleration rule) when the acceleration magnitude exceeds
    ``acc_eps``, which defaults to three times the median over the
    trajectory. A candidate closer than ``min_gap`` steps to the previous
    candidate is merged into it. The final step is always a keypose.
    """
    if len(traj) < 2:
        raise DomainError("trajectory shorter than 2 steps")
    if vel_eps <= 0 or min_gap < 1 or (acc_eps is not None and acc_eps <= 0):
        raise ConfigError("vel_eps and acc_eps must be positive and min_gap >= 1")
    unknown = set(rules) - {GRIPPER, STOP, ACCELERATION}
    if unknown:
        raise ConfigError(f"unknown keypose rules {sorted(unknown)}")
    n = len(traj)
    hit = np.zeros(n, dtype=bool)
    if GRIPPER in rules:
        hit[1:] |= traj.open[1:] != traj.open[:-1]
    if STOP in rules:
        speed = np.linalg.norm(traj.velocity(), axis=1)
        hit[1:] |= (speed[1:] < vel_eps) & (speed[:-1] >= vel_eps)
    if ACCELERATION in rules:
        acc = np.linalg.norm(traj.acceleration(), axis=1)
        if acc_eps is None:
            acc_eps = max(ACC_MEDIAN_FACTOR * float(np.median(acc)), 1e-12)
        hit |= acc > acc_eps

    keyposes: list[int] = []
    last_hit = None
    for i in np.flatnonzero(hit):
        if last_hit is None or i - last_hit >= min_gap:
            keyposes.append(int(i))
        last_hit = int(i)
    if not keyposes or keyposes[-1] != n - 1:
        keyposes.append(n - 1)
    return keyposes


def interpolate_segment(start: Action, end: Action, n: int) -> list[Action]:
    """``n`` actions strictly after ``start`` up to and including ``end``.

    Positions are linear, rotations follow the geodesic, and every step
    carries the end's gripper flag.
    """
    if n < 1:
        raise DomainError("segment length must be >= 1")
    R0, R1 = six_d_to_matrix(start.rot), six_d_to_matrix(end.rot)
    steps = []
    for i in range(1, n + 1):
        s = i / n
        if i == n:
            steps.append(Action(end.pos.copy(), end.rot.copy(), end.open))
            continue
        R = geodesic_interpolate(R0, R1, s)
        steps.append(Action(start.pos + s * (end.pos - start.pos), matrix_to_six_d(R, validate=False), end.open))
    return steps
