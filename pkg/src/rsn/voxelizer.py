"""Dynamic voxelization, per-point voxel statistics, the per-voxel PointNet,
and multi-frame merging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .foreground import ForegroundPoints

LN_EPS = 1e-6
DEFAULT_FRAME_DT = 0.1


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: tuple[float, float, float]
    region: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if any(not v > 0 for v in self.voxel_size):
            raise ValueError(f"voxel sizes must be positive: {self.voxel_size}")
        if math.isinf(self.voxel_size[0]) or math.isinf(self.voxel_size[1]):
            raise ValueError("only the z voxel size may be infinite")
        if len(self.region) != 3 or any(lo >= hi for lo, hi in self.region):
            raise ValueError(f"bad region {self.region}")

    @classmethod
    def from_config(cls, config) -> "VoxelGrid":
        return cls(tuple(config.voxel_size), tuple(tuple(r) for r in config.region))

    @property
    def pillar(self) -> bool:
        return math.isinf(self.voxel_size[2])

    @property
    def dims(self) -> int:
        return 2 if self.pillar else 3

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.region[: self.dims]])

    @property
    def cell(self) -> np.ndarray:
        return np.array(self.voxel_size[: self.dims], dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(math.ceil((hi - lo) / d - 1e-9))
                     for (lo, hi), d in zip(self.region[: self.dims], self.voxel_size))

    def centers(self, coords: np.ndarray, stride: int = 1) -> np.ndarray:
        """Metric centers of (possibly downsampled) voxel coordinates.

        A site at stride ``s`` sits on the center of input voxel ``s * coord``,
        the middle of its 3-wide receptive field.
        """
        return self.lower + (np.asarray(coords, np.float64) * stride + 0.5) * self.cell

    def z_center(self) -> float:
        lo, hi = self.region[2]
        return 0.5 * (lo + hi)


@dataclass
class VoxelMap:
    coords: np.ndarray        # (V, d) int64, lexicographically sorted
    point_voxel: np.ndarray   # (N,) voxel index per input point, -1 if dropped

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def kept(self) -> np.ndarray:
        return np.nonzero(self.point_voxel >= 0)[0]

    def counts(self) -> np.ndarray:
        return np.bincount(self.point_voxel[self.point_voxel >= 0], minlength=self.num_voxels)

    def members(self) -> dict[tuple[int, ...], list[int]]:
        out: dict[tuple[int, ...], list[int]] = {tuple(c): [] for c in self.coords.tolist()}
        keys = [tuple(c) for c in self.coords.tolist()]
        for i, v in enumerate(self.point_voxel.tolist()):
            if v >= 0:
                out[keys[v]].append(i)
        return out


def voxelize_dynamic(positions: np.ndarray, grid: VoxelGrid) -> VoxelMap:
    """Assign every in-region point to floor((p - region_min) / size).

    Points outside the half-open region are dropped; there is no per-voxel
    capacity.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    inside = np.ones(len(pts), bool)
    for a, (lo, hi) in enumerate(grid.region):
        inside &= (pts[:, a] >= lo) & (pts[:, a] < hi)
    d = grid.dims
    idx = np.floor((pts[:, :d] - grid.lower) / grid.cell).astype(np.int64)
    shape = np.array(grid.shape)
    inside &= np.all((idx >= 0) & (idx < shape), axis=1)
    point_voxel = np.full(len(pts), -1, np.int64)
    if not np.any(inside):
        return VoxelMap(np.zeros((0, d), np.int64), point_voxel)
    coords, inv = np.unique(idx[inside], axis=0, return_inverse=True)
    point_voxel[inside] = inv.reshape(-1)
    return VoxelMap(coords, point_voxel)


def augment_points(vmap: VoxelMap, positions: np.ndarray, grid: VoxelGrid,
                   frame_index: np.ndarray | None = None,
                   deltas: np.ndarray | None = None) -> np.ndarray:
    """Per-point (p - m, var, p - c[, delta]) for the kept points, in order.

    ``m`` and ``var`` are the mean and per-axis population variance of the
    point's voxel. With ``frame_index`` they are computed over the points of
    the same voxel *and* frame only, and the per-point time offset
    ``deltas`` is appended as a tenth column.
    """
    kept = vmap.kept
    pts = np.asarray(positions, dtype=np.float64)[kept]
    vox = vmap.point_voxel[kept]
    if frame_index is not None:
        fr = np.asarray(frame_index, np.int64)[kept]
        nf = int(fr.max()) + 1 if len(fr) else 1
        _, group = np.unique(vox * nf + fr, return_inverse=True)
    else:
        group = vox
    group = group.reshape(-1)
    ng = int(group.max()) + 1 if len(group) else 0
    cnt = np.bincount(group, minlength=ng).astype(np.float64)
    mean = np.stack([np.bincount(group, pts[:, a], ng) for a in range(3)], axis=1) / cnt[:, None]
    dev = pts - mean[group]
    var = np.stack([np.bincount(group, dev[:, a] ** 2, ng) for a in range(3)], axis=1) / cnt[:, None]

    centers = np.empty((len(pts), 3))
    centers[:, : grid.dims] = grid.centers(vmap.coords[vox])
    if grid.pillar:
        centers[:, 2] = grid.z_center()
    cols = [dev, var[group], pts - centers]
    if frame_index is not None:
        dl = np.zeros(len(kept)) if deltas is None else np.asarray(deltas, np.float64)[kept]
        cols.append(dl[:, None])
    return np.concatenate(cols, axis=1)


def point_features(points: ForegroundPoints, vmap: VoxelMap, grid: VoxelGrid,
                   temporal: bool = False) -> np.ndarray:
    """Full per-point input to the voxel PointNet:
    [p, p - m, var, p - c, (delta), range features]."""
    aug = augment_points(vmap, points.positions, grid,
                         points.frame_index if temporal else None,
                         points.deltas if temporal else None)
    kept = vmap.kept
    return np.concatenate([points.positions[kept], aug, points.features[kept]], axis=1)


def point_feature_width(range_feature_channels: int, temporal: bool = False) -> int:
    return 12 + int(temporal) + range_feature_channels


def init_pointnet_params(in_width: int, out_width: int, rng: np.random.Generator,
                         prefix: str = "pointnet/") -> dict[str, np.ndarray]:
    bound = math.sqrt(6.0 / in_width)
    return {
        prefix + "kernel": rng.uniform(-bound, bound, size=(in_width, out_width)),
        prefix + "bias": np.zeros(out_width),
        prefix + "ln_scale": np.ones(out_width),
        prefix + "ln_offset": np.zeros(out_width),
    }


def layer_norm(x: np.ndarray, scale=None, offset=None, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if scale is not None:
        y = y * scale
    if offset is not None:
        y = y + offset
    return y


def voxel_pointnet(features: np.ndarray, point_voxel: np.ndarray, num_voxels: int,
                   params: Mapping[str, np.ndarray] | None = None,
                   prefix: str = "pointnet/") -> np.ndarray:
    """linear -> layer norm -> ReLU per point, channelwise max per voxel.

    ``point_voxel`` maps each row of ``features`` to its voxel. With
    ``params=None`` the PointNet is skipped and raw features are max-pooled.
    """
    x = np.asarray(features, dtype=np.float64)
    if params is not None:
        W = params[prefix + "kernel"]
        if W.shape[0] != x.shape[1]:
            raise ValueError(f"PointNet expects width {W.shape[0]}, got {x.shape[1]}")
        x = x @ W + params[prefix + "bias"]
        x = layer_norm(x, params.get(prefix + "ln_scale"), params.get(prefix + "ln_offset"))
        x = np.maximum(x, 0.0)
    out = np.full((num_voxels, x.shape[1]), -np.inf)
    np.maximum.at(out, np.asarray(point_voxel), x)
    return out


def temporal_merge(frames: Sequence[tuple[ForegroundPoints, np.ndarray]],
                   timestamps: Sequence[float] | None = None) -> ForegroundPoints:
    """Bring every frame's points into frame 0 (the latest) coordinates.

    ``frames`` is latest-first; each pose maps that frame's sensor
    coordinates into a shared world frame. Points get their frame index and
    the time offset to frame 0 (``0.1 * i`` seconds without timestamps).
    Frame 0 points pass through untouched.
    """
    if not frames:
        raise ValueError("no frames to merge")
    pose0 = np.asarray(frames[0][1], dtype=np.float64)
    inv0 = np.linalg.inv(pose0)
    parts = []
    for i, (pts, pose) in enumerate(frames):
        if timestamps is not None:
            dt = float(timestamps[0]) - float(timestamps[i])
        else:
            dt = DEFAULT_FRAME_DT * i
        pos = pts.positions
        if i > 0:
            T = inv0 @ np.asarray(pose, dtype=np.float64)
            pos = pos @ T[:3, :3].T + T[:3, 3]
        n = len(pts)
        parts.append(ForegroundPoints(pos, pts.features, pts.pixels, pts.scores,
                                      np.full(n, i, np.int64), np.full(n, dt)))
    return ForegroundPoints.concat(parts)


def regroup_sequence(frames: Sequence, k: int) -> list[tuple]:
    """(f_i, f_{i-1}, ..., f_{i-k}) per frame, clamping i - j < 0 to f_0."""
    if not len(frames):
        raise ValueError("empty sequence")
    if k < 0:
        raise ValueError("k must be non-negative")
    return [tuple(frames[max(i - j, 0)] for j in range(k + 1)) for i in range(len(frames))]
