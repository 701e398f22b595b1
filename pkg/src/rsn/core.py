"""Shared primitives: oriented boxes, detections, detector constants, rigid
transforms and the seeded random generator used everywhere else."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

VEHICLE = 1
PEDESTRIAN = 2


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) so streams match across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi).

    Values already inside the interval are returned untouched, which keeps
    the function exactly idempotent.
    """
    if np.ndim(theta) == 0:
        t = float(theta)
        if not math.isfinite(t):
            raise ValueError(f"non-finite angle {theta!r}")
        if -math.pi <= t < math.pi:
            return t
        out = math.fmod(t + math.pi, TWO_PI)
        if out < 0.0:
            out += TWO_PI
        out -= math.pi
        if out >= math.pi:
            out -= TWO_PI
        return out
    t = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite angle in array")
    inside = (t >= -math.pi) & (t < math.pi)
    out = np.mod(t + math.pi, TWO_PI) - math.pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    return np.where(inside, t, out)


@dataclass(frozen=True)
class Box7:
    """Yaw-oriented 3D box with absolute center (meters) and heading (rad)."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError(f"non-finite box field in {vals}")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got {self.l, self.w, self.h}")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box7":
        return cls(*(float(v) for v in a[:7]))

    def volume(self) -> float:
        return self.l * self.w * self.h


def boxes_to_array(boxes: Iterable[Box7]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    if not rows:
        return np.zeros((0, 7))
    return np.stack(rows)


@dataclass(frozen=True)
class Detection:
    box: Box7
    score: float
    class_id: int = VEHICLE

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self) -> dict:
        b = self.box
        return {
            "cx": b.cx, "cy": b.cy, "cz": b.cz,
            "l": b.l, "w": b.w, "h": b.h, "theta": b.theta,
            "score": float(self.score), "class_id": int(self.class_id),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        box = Box7(d["cx"], d["cy"], d["cz"], d["l"], d["w"], d["h"], d["theta"])
        return cls(box, float(d["score"]), int(d.get("class_id", VEHICLE)))


@dataclass(frozen=True)
class DetectorConfig:
    """Every named detector constant. Defaults are the vehicle model."""

    gamma: float = 0.15
    lambda1: float = 400.0
    lambda2: float = 4.0
    sigma: float = 1.0
    delta1: float = 0.2
    delta2: float = 0.2
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    num_heading_bins: int = 12
    voxel_size: tuple[float, float, float] = (0.2, 0.2, math.inf)
    region: tuple[tuple[float, float], ...] = ((-79.5, 79.5), (-79.5, 79.5), (-5.0, 5.0))
    norm_caps: tuple[float, float, float] = (79.5, 2.0, 2.0)
    class_id: int = VEHICLE

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("delta1", "delta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if any(not v > 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")
        if self.num_heading_bins < 2:
            raise ValueError("need at least two heading bins")
        if len(self.region) != 3 or any(lo >= hi for lo, hi in self.region):
            raise ValueError(f"bad region {self.region}")
        if any(m <= 0 for m in self.norm_caps):
            raise ValueError("normalization caps must be positive")

    @classmethod
    def vehicle(cls, **overrides) -> "DetectorConfig":
        return cls(**overrides)

    @classmethod
    def pedestrian(cls, **overrides) -> "DetectorConfig":
        kw = dict(gamma=0.1, sigma=0.5, num_heading_bins=4,
                  voxel_size=(0.1, 0.1, math.inf), class_id=PEDESTRIAN)
        kw.update(overrides)
        return cls(**kw)

    @property
    def pillar(self) -> bool:
        return math.isinf(self.voxel_size[2])

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["voxel_size"] = [None if math.isinf(v) else v for v in self.voxel_size]
        d["region"] = [list(r) for r in self.region]
        d["norm_caps"] = list(self.norm_caps)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "voxel_size" in d:
            d["voxel_size"] = tuple(math.inf if v is None else float(v) for v in d["voxel_size"])
        if "region" in d:
            d["region"] = tuple(tuple(float(x) for x in r) for r in d["region"])
        if "norm_caps" in d:
            d["norm_caps"] = tuple(float(x) for x in d["norm_caps"])
        return cls(**d)


# --------------------------------------------------------------------------
# box geometry helpers


def box_corners_bev(box: Box7) -> np.ndarray:
    """(4, 2) corners of the box footprint, counter-clockwise."""
    hl, hw = box.l / 2.0, box.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def points_in_box(points: np.ndarray, box: Box7, bev_only: bool = False) -> np.ndarray:
    """Boolean mask of points (N, >=2) inside ``box``; faces count as inside."""
    pts = np.asarray(points, dtype=np.float64)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = math.cos(box.theta), math.sin(box.theta)
    xl = c * dx + s * dy
    yl = -s * dx + c * dy
    inside = (np.abs(xl) <= box.l / 2.0) & (np.abs(yl) <= box.w / 2.0)
    if not bev_only:
        inside &= np.abs(pts[:, 2] - box.cz) <= box.h / 2.0
    return inside


def point_in_box(p: Sequence[float], box: Box7) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[None, :3], box)[0])


# --------------------------------------------------------------------------
# rigid transforms used for augmentation and test-time augmentation


def _replace_box(box: Box7, cx, cy, cz, theta) -> Box7:
    return Box7(cx, cy, cz, box.l, box.w, box.h, theta)


def transform_flip_x(points: np.ndarray, boxes: Sequence[Box7]):
    """Mirror across the X axis (y -> -y); headings negate."""
    pts = np.array(points, dtype=np.float64, copy=True)
    if pts.size:
        pts[:, 1] = -pts[:, 1]
    out = [_replace_box(b, b.cx, -b.cy, b.cz, wrap_angle(-b.theta)) for b in boxes]
    return pts, out


def transform_rotate_z(points: np.ndarray, boxes: Sequence[Box7], angle: float):
    """Rotate points and boxes about the Z axis by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    pts = np.array(points, dtype=np.float64, copy=True)
    if pts.size:
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y
    out = [
        _replace_box(b, c * b.cx - s * b.cy, s * b.cx + c * b.cy, b.cz,
                     wrap_angle(b.theta + angle))
        for b in boxes
    ]
    return pts, out


@dataclass(frozen=True)
class RigidTransform:
    """Optional X-flip, then Z rotation, then translation."""

    angle: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip: bool = False

    def apply(self, points: np.ndarray, boxes: Sequence[Box7]):
        pts, bxs = np.asarray(points, dtype=np.float64), list(boxes)
        if self.flip:
            pts, bxs = transform_flip_x(pts, bxs)
        if self.angle != 0.0:
            pts, bxs = transform_rotate_z(pts, bxs, self.angle)
        t = self.translation
        if any(t):
            pts = np.array(pts, copy=True)
            if pts.size:
                pts[:, :3] += np.asarray(t)
            bxs = [_replace_box(b, b.cx + t[0], b.cy + t[1], b.cz + t[2], b.theta) for b in bxs]
        return pts, bxs

    def invert(self, points: np.ndarray, boxes: Sequence[Box7]):
        pts, bxs = np.asarray(points, dtype=np.float64), list(boxes)
        t = self.translation
        if any(t):
            pts = np.array(pts, copy=True)
            if pts.size:
                pts[:, :3] -= np.asarray(t)
            bxs = [_replace_box(b, b.cx - t[0], b.cy - t[1], b.cz - t[2], b.theta) for b in bxs]
        if self.angle != 0.0:
            pts, bxs = transform_rotate_z(pts, bxs, -self.angle)
        if self.flip:
            pts, bxs = transform_flip_x(pts, bxs)
        return pts, bxs

    @classmethod
    def random(cls, rng: np.random.Generator, max_angle: float = math.pi / 4,
               max_shift: float = 0.0, flip_prob: float = 0.5) -> "RigidTransform":
        angle = float(rng.uniform(-max_angle, max_angle))
        shift = tuple(float(v) for v in rng.uniform(-max_shift, max_shift, 3)) if max_shift else (0.0, 0.0, 0.0)
        flip = bool(rng.uniform() < flip_prob)
        return cls(angle, shift, flip)


def pose_matrix(yaw: float = 0.0, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """4x4 homogeneous transform with a yaw rotation and a translation."""
    c, s = math.cos(yaw), math.sin(yaw)
    T = np.eye(4)
    T[:2, :2] = [[c, -s], [s, c]]
    T[:3, 3] = translation
    return T


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)
