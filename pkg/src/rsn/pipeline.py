"""Synthetic scenes, planted oracles and the end-to-end detector run."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import PEDESTRIAN, VEHICLE, Box7, Detection, DetectorConfig, logit, points_in_box, pose_matrix
from .foreground import ForegroundPoints, select_foreground, selection_mask
from .head import decode, head_forward, init_head_params, plant_head_output
from .range_image import RangeImage, default_inclinations, label_foreground, normalize, project
from .rife import RifeOutput, UNetConfig, init_unet_params, unet_forward
from .sparse import SparseTensor, SpfeConfig, init_spfe_params, run_spfe, spfe_rulebooks
from .voxelizer import (VoxelGrid, init_pointnet_params, point_feature_width, point_features,
                        regroup_sequence, temporal_merge, voxel_pointnet, voxelize_dynamic)

GROUND_Z = -1.8
BOX_LIFT = 0.05       # gap between box bottoms and the ground plane
SURFACE_INSET = 0.05  # box returns are pushed this far past the entry face
MIN_CHORD = 0.02      # grazing rays through less box than this return nothing
PLANTED_LOGIT = 10.0

_DIMS = {
    VEHICLE: ((3.8, 5.2), (1.7, 2.1), (1.4, 1.9)),
    PEDESTRIAN: ((0.5, 1.0), (0.5, 1.0), (1.6, 1.9)),
}


# --------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    points: np.ndarray       # (N, 3) sensor frame
    intensity: np.ndarray    # (N,)
    elongation: np.ndarray   # (N,)
    boxes: list              # Box7, sensor frame
    classes: list            # class id per box
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))  # sensor -> world
    timestamp: float = 0.0

    def save(self, path) -> None:
        np.savez(path, points=self.points, intensity=self.intensity, elongation=self.elongation,
                 boxes=np.array([b.as_array() for b in self.boxes]).reshape(-1, 7),
                 classes=np.asarray(self.classes, np.int64), pose=self.pose,
                 timestamp=np.float64(self.timestamp))

    @classmethod
    def load(cls, path) -> "Scene":
        with np.load(path) as z:
            boxes = [Box7.from_array(r) for r in z["boxes"]]
            return cls(z["points"], z["intensity"], z["elongation"], boxes,
                       z["classes"].tolist(), z["pose"], float(z["timestamp"]))


def pixel_rays(height: int, width: int, inclinations=None,
               azimuth_span: float = 2.0 * math.pi) -> np.ndarray:
    """(H, W, 3) unit ray per range-image pixel, matching unprojection."""
    incl = default_inclinations(height) if inclinations is None else np.asarray(inclinations)
    az = -azimuth_span / 2.0 + np.arange(width) * (azimuth_span / width)
    ce = np.cos(incl)[:, None]
    return np.stack([ce * np.cos(az)[None, :], ce * np.sin(az)[None, :],
                     np.broadcast_to(np.sin(incl)[:, None], (height, width))], axis=-1)


def ray_box_interval(dirs: np.ndarray, box: Box7) -> tuple[np.ndarray, np.ndarray]:
    """Entry and exit distances of rays from the origin through ``box``;
    entry > exit means a miss."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    o = np.array([-(c * box.cx + s * box.cy), -(-s * box.cx + c * box.cy), -box.cz])
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], 1)
    half = np.array([box.l, box.w, box.h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0.0
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    return lo.max(axis=1), hi.min(axis=1)


def _sample_boxes(rng, n_boxes, class_id, min_range, max_range, max_tries=1000):
    boxes, spans = [], []
    dims = _DIMS[class_id]
    for _ in range(n_boxes):
        for _ in range(max_tries):
            l, w, h = (float(rng.uniform(*d)) for d in dims)
            r = float(rng.uniform(min_range, max_range))
            az = float(rng.uniform(-math.pi, math.pi))
            theta = float(rng.uniform(-math.pi, math.pi))
            reach = 0.5 * math.hypot(l, w)
            half = math.asin(min(1.0, (reach + 0.5) / r))
            clash = any(abs((az - a + math.pi) % (2 * math.pi) - math.pi) < half + ha + 0.02
                        for a, ha in spans)
            if not clash:
                break
        else:
            raise RuntimeError(f"could not place {n_boxes} separated boxes")
        spans.append((az, half))
        boxes.append(Box7(r * math.cos(az), r * math.sin(az), GROUND_Z + BOX_LIFT + h / 2.0,
                          l, w, h, theta))
    return boxes


def synth_scene(rng: np.random.Generator, n_boxes: int = 4, n_bg_points: int = 200,
                class_id: int = VEHICLE, height: int = 64, width: int = 512,
                ground_keep: float = 0.5, min_range: float = 8.0, max_range: float = 40.0,
                max_ground_range: float = 60.0, boxes: Sequence[Box7] | None = None) -> Scene:
    """Ray-cast a LiDAR sweep of boxes standing on a ground plane.

    Boxes are placed in non-overlapping azimuth sectors so none hides
    another. Every pixel ray returns its first hit: a box (pushed slightly
    inside it), the ground (kept with probability ``ground_keep``), or one of
    ``n_bg_points`` clutter returns on rays that miss every box.
    """
    if n_boxes < 0:
        raise ValueError("n_boxes must be non-negative")
    if boxes is None:
        boxes = _sample_boxes(rng, n_boxes, class_id, min_range, max_range)
    boxes = list(boxes)
    dirs = pixel_rays(height, width).reshape(-1, 3)
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    box_hit = np.zeros(n, bool)
    drop = np.zeros(n, bool)
    for b in boxes:
        t0, t1 = ray_box_interval(dirs, b)
        hit = (t1 >= t0) & (t0 > 0) & (t0 < t_hit)
        chord = t1 - t0
        good = hit & (chord >= MIN_CHORD)
        t_hit[good] = t0[good] + np.minimum(SURFACE_INSET, 0.5 * chord[good])
        box_hit[good] = True
        drop[good] = False
        drop[hit & ~good] = True
    t_hit[drop] = np.inf
    box_hit[drop] = False

    free = ~box_hit & ~drop
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, GROUND_Z / dirs[:, 2], np.inf)
    horiz = t_ground * np.hypot(dirs[:, 0], dirs[:, 1])
    ground = free & (horiz <= max_ground_range) & (rng.uniform(size=n) < ground_keep)
    t_hit[ground] = t_ground[ground]

    clutter_pool = np.nonzero(free)[0]
    k = min(n_bg_points, len(clutter_pool))
    clutter = rng.choice(clutter_pool, size=k, replace=False) if k else np.zeros(0, np.int64)
    if k:
        far = np.minimum(t_ground[clutter], max_ground_range)
        t_hit[clutter] = rng.uniform(0.2, 0.95, size=k) * far
    keep = np.isfinite(t_hit)
    pts = dirs[keep] * t_hit[keep, None]
    m = len(pts)
    return Scene(pts, rng.uniform(0.0, 1.5, m), rng.uniform(0.0, 1.0, m), boxes,
                 [class_id] * len(boxes))


def synth_sequence(rng: np.random.Generator, n_frames: int, n_boxes: int = 4,
                   n_bg_points: int = 200, class_id: int = VEHICLE, height: int = 64,
                   width: int = 512, speed: float = 5.0, dt: float = 0.1) -> list[Scene]:
    """Static world boxes seen by a sensor driving along +x, oldest frame first."""
    base = synth_scene(rng, n_boxes, 0, class_id, height, width)
    world_boxes = base.boxes
    out = []
    for f in range(n_frames):
        pose = pose_matrix(0.0, (speed * dt * f, 0.0, 0.0))
        inv = np.linalg.inv(pose)
        local = [Box7(*(inv[:3, :3] @ b.center + inv[:3, 3]), b.l, b.w, b.h, b.theta)
                 for b in world_boxes]
        s = synth_scene(rng, n_boxes, n_bg_points, class_id, height, width, boxes=local)
        s.pose = pose
        s.timestamp = dt * f
        out.append(s)
    return out


# --------------------------------------------------------------------------
# configuration and weights


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    spfe: SpfeConfig = field(default_factory=lambda: SpfeConfig.preset("CarS"))
    pointnet_channels: int = 64
    height: int = 64
    width: int = 512
    frames: int = 1  # k + 1
    temporal: bool = False
    seed: int = 0

    def __post_init__(self):
        want = 2 if self.detector.pillar else 3
        if self.spfe.dims != want:
            raise ValueError(f"SPFE is {self.spfe.dims}D but the voxel grid is {want}D")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.frames > 1 and not self.temporal:
            raise ValueError("multi-frame input requires temporal mode")
        t = self.unet.total_stride
        if self.height % t or self.width % t:
            raise ValueError(f"range image {self.height}x{self.width} must divide by {t}")

    @property
    def point_width(self) -> int:
        return point_feature_width(self.unet.feature_channels, self.temporal)

    @property
    def spfe_in_channels(self) -> int:
        return self.pointnet_channels if self.spfe.pointnet else self.point_width

    @property
    def head_in_channels(self) -> int:
        return self.spfe.out_channels(self.spfe_in_channels)

    def to_json(self) -> dict:
        return {"detector": self.detector.to_json(), "unet": self.unet.to_json(),
                "spfe": self.spfe.to_json(), "pointnet_channels": self.pointnet_channels,
                "height": self.height, "width": self.width, "frames": self.frames,
                "temporal": self.temporal, "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return cls(DetectorConfig.from_json(d["detector"]), UNetConfig.from_json(d["unet"]),
                   SpfeConfig.from_json(d["spfe"]), int(d.get("pointnet_channels", 64)),
                   int(d.get("height", 64)), int(d.get("width", 512)), int(d.get("frames", 1)),
                   bool(d.get("temporal", False)), int(d.get("seed", 0)))


def init_weights(config: RunConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Random weights for every learned stage, keyed by stage prefix."""
    w = init_unet_params(config.unet, rng)
    if config.spfe.pointnet:
        w.update(init_pointnet_params(config.point_width, config.pointnet_channels, rng))
    w.update(init_spfe_params(config.spfe, config.spfe_in_channels, rng))
    w.update(init_head_params(config.head_in_channels, config.detector.num_heading_bins, rng))
    return w


# --------------------------------------------------------------------------
# planted oracles


def planted_segmentation(image: RangeImage, boxes: Sequence[Box7], feature_channels: int,
                         fg_logit: float = PLANTED_LOGIT, bg_logit: float = -PLANTED_LOGIT,
                         rng: np.random.Generator | None = None,
                         fg_scores=(0.55, 0.95), bg_scores=(0.01, 0.3)) -> RifeOutput:
    """Segmentation output built from the labels.

    Without ``rng`` foreground pixels get ``fg_logit`` and the rest
    ``bg_logit``. With ``rng`` scores are drawn uniformly from the given
    ranges instead, as logits. Features are zero.
    """
    lab = label_foreground(image, boxes).fg_label
    if rng is None:
        seg = np.where(lab, fg_logit, bg_logit)
    else:
        seg = np.where(lab, logit(rng.uniform(*fg_scores, size=lab.shape)),
                       logit(rng.uniform(*bg_scores, size=lab.shape)))
    return RifeOutput(seg, np.zeros(lab.shape + (feature_channels,)))


# --------------------------------------------------------------------------
# pipeline


class StageError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"stage {stage!r} failed: {err}")
        self.stage = stage


@dataclass
class FrameResult:
    image: RangeImage
    rife: RifeOutput
    selected: ForegroundPoints


@dataclass
class PipelineResult:
    detections: list
    timings: dict
    counts: dict
    spfe_stats: list = field(default_factory=list)


def _stage(name, timings, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + 1000.0 * (time.perf_counter() - t0)


class FrameCache:
    """Per-frame projection, segmentation and selection, reused when the same
    frame appears in several temporal windows."""

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key, make):
        if key not in self._store:
            self._store[key] = make()
        return self._store[key]


def process_frame(scene: Scene, config: RunConfig, weights: Mapping[str, np.ndarray] | None,
                  planted_seg: bool, timings: dict) -> FrameResult:
    det = config.detector
    img = _stage("project", timings, project, scene.points, config.height, config.width,
                 None, scene.intensity, scene.elongation)
    if planted_seg:
        rife = _stage("segment", timings, planted_segmentation, img, scene.boxes,
                      config.unet.feature_channels)
    else:
        x = _stage("normalize", timings, normalize, img, det.norm_caps)
        rife = _stage("segment", timings, unet_forward, x, config.unet, weights)
    sel = _stage("select", timings, select_foreground, rife, img, det.gamma)
    return FrameResult(img, rife, sel)


def run_pipeline(frames: Sequence[Scene], config: RunConfig,
                 weights: Mapping[str, np.ndarray] | None, planted_seg: bool = False,
                 planted_head: bool = False, cache: FrameCache | None = None,
                 keep_features: bool = False) -> PipelineResult:
    """Detect boxes in ``frames[0]``; later entries are earlier frames used
    only in temporal mode."""
    if not frames:
        raise ValueError("no frames")
    if len(frames) != config.frames:
        raise ValueError(f"config expects {config.frames} frames, got {len(frames)}")
    det = config.detector
    timings: dict = {}
    counts: dict = {}
    results = []
    for s in frames:
        make = lambda s=s: process_frame(s, config, weights, planted_seg, timings)
        results.append(cache.get(id(s), make) if cache is not None else make())
    counts["valid_pixels"] = int(results[0].image.valid.sum())
    if config.temporal:
        pts = _stage("temporal_merge", timings, temporal_merge,
                     [(r.selected, s.pose) for r, s in zip(results, frames)],
                     [s.timestamp for s in frames])
    else:
        pts = results[0].selected
    counts["selected_points"] = len(pts)

    grid = VoxelGrid.from_config(det)
    vmap = _stage("voxelize", timings, voxelize_dynamic, pts.positions, grid)
    counts["voxels"] = vmap.num_voxels
    out = PipelineResult([], timings, counts)
    if vmap.num_voxels == 0:
        counts["spfe_sites"] = 0
        return out
    feats = _stage("point_features", timings, point_features, pts, vmap, grid, config.temporal)
    if keep_features:
        out.counts["point_features"] = feats
    pn = weights if config.spfe.pointnet else None
    vfeat = _stage("pointnet", timings, voxel_pointnet, feats, vmap.point_voxel[vmap.kept],
                   vmap.num_voxels, pn)
    st = SparseTensor(vmap.coords, vfeat)
    counts["spfe_input_sites"] = len(st)
    sp = _stage("spfe", timings, run_spfe, st, config.spfe, weights, stats=out.spfe_stats)
    counts["spfe_sites"] = len(sp)
    counts["spfe_pairs"] = int(sum(b.pairs for b in out.spfe_stats))
    centers = grid.centers(sp.coords, sp.stride_level)
    if grid.pillar:
        centers = centers[:, :2]
    if planted_head:
        ho = _stage("head", timings, plant_head_output, centers, frames[0].boxes,
                    det.num_heading_bins, grid.pillar)
    else:
        ho = _stage("head", timings, head_forward, sp.features, weights, det.num_heading_bins)
    out.detections = _stage("decode", timings, decode, ho, sp.coords, centers, det.delta2,
                            det.class_id, grid.pillar)
    counts["detections"] = len(out.detections)
    return out


def run_sequence(scenes: Sequence[Scene], config: RunConfig,
                 weights: Mapping[str, np.ndarray] | None, **kwargs) -> list[PipelineResult]:
    """Run every frame of an oldest-first sequence with k = frames - 1
    history frames, reusing per-frame work."""
    cache = FrameCache()
    return [run_pipeline(list(g), config, weights, cache=cache, **kwargs)
            for g in regroup_sequence(list(scenes), config.frames - 1)]


def detections_to_jsonl(dets: Sequence[Detection], **extra) -> str:
    lines = []
    for d in dets:
        row = dict(extra)
        row.update(d.to_json())
        lines.append(json.dumps(row, sort_keys=True))
    return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# gamma sweep


@dataclass
class SweepRow:
    gamma: float
    selected_points: int
    spfe_pairs: int
    wall_ms: float
    recall: float

    def as_csv(self) -> str:
        return f"{self.gamma!r},{self.selected_points},{self.spfe_pairs},{self.wall_ms:.3f},{self.recall!r}"


SWEEP_HEADER = "gamma,selected_points,spfe_pairs,wall_ms,recall"


def bench_gamma_sweep(scenes: Sequence[Scene], config: RunConfig, gammas: Sequence[float],
                      seed: int = 0, check: bool = True) -> list[SweepRow]:
    """Selected points, backbone rulebook pairs and pixel recall per gamma,
    summed over scenes, with planted scores (foreground in [0.55, 0.95],
    background in [0.01, 0.3]) standing in for the segmentation network."""
    if len(gammas) < 2:
        raise ValueError("need at least two gamma values")
    rng = np.random.Generator(np.random.Philox(seed))
    grid = VoxelGrid.from_config(config.detector)
    prepared = []
    for s in scenes:
        img = project(s.points, config.height, config.width, None, s.intensity, s.elongation)
        rife = planted_segmentation(img, s.boxes, config.unet.feature_channels, rng=rng)
        lab = label_foreground(img, s.boxes).fg_label
        prepared.append((img, rife, lab))
    rows = []
    for g in gammas:
        t0 = time.perf_counter()
        n_sel = pairs = tp = pos = 0
        for img, rife, lab in prepared:
            mask = selection_mask(rife.seg_logits, img.valid, g)
            sel = select_foreground(rife, img, g)
            n_sel += len(sel)
            vmap = voxelize_dynamic(sel.positions, grid)
            if vmap.num_voxels:
                st = SparseTensor(vmap.coords, np.zeros((vmap.num_voxels, 0)))
                pairs += sum(rb.num_pairs for rb in spfe_rulebooks(st, config.spfe))
            tp += int((mask & lab).sum())
            pos += int(lab.sum())
        recall = tp / pos if pos else float("nan")
        rows.append(SweepRow(float(g), n_sel, pairs, 1000.0 * (time.perf_counter() - t0), recall))
    if check:
        order = np.argsort([r.gamma for r in rows], kind="stable")
        for a, b in zip(order[:-1], order[1:]):
            if rows[b].selected_points > rows[a].selected_points or rows[b].spfe_pairs > rows[a].spfe_pairs:
                raise AssertionError(f"cost increased between gamma {rows[a].gamma} and {rows[b].gamma}")
    return rows


def points_in_any_box(points: np.ndarray, boxes: Sequence[Box7]) -> np.ndarray:
    hit = np.zeros(len(points), bool)
    for b in boxes:
        hit |= points_in_box(points, b)
    return hit
