"""AP / APH evaluation and yaw-aware weighted boxes fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .core import Box7, Detection, RigidTransform, wrap_angle
from .geometry import iou_3d, iou_bev

DEFAULT_WBF_THRESHOLD = 0.55
MODES = ("bev", "3d")


def _iou_fn(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return iou_bev if mode == "bev" else iou_3d


HEADING_SNAP = 1e-12


def heading_error(pred_theta: float, gt_theta: float) -> float:
    """|dtheta| folded into [0, pi] with a single rounding step.

    Errors within HEADING_SNAP of pi are reported as pi: a heading flipped
    by pi is only representable up to rounding of theta + pi.
    """
    err = abs(float(pred_theta) - float(gt_theta))
    err = math.fmod(err, 2 * math.pi)
    if err > math.pi:
        err = 2 * math.pi - err
    return math.pi if abs(err - math.pi) <= HEADING_SNAP else err


def heading_weight(pred_theta: float, gt_theta: float) -> float:
    """max(0, 1 - |wrapped heading error| / pi)."""
    return max(0.0, 1.0 - heading_error(pred_theta, gt_theta) / math.pi)


@dataclass
class MatchResult:
    order: np.ndarray          # detection indices by descending score (stable)
    gt_index: np.ndarray       # (n_det,) matched ground truth, -1 for false positives
    iou: np.ndarray            # (n_det,) IoU with the matched ground truth, 0 if none
    heading_error: np.ndarray  # (n_det,) wrapped |dtheta| of the match, nan if none

    @property
    def num_tp(self) -> int:
        return int((self.gt_index >= 0).sum())


def match_detections(dets: Sequence[Detection], gts: Sequence[Box7], iou_threshold: float,
                     mode: str = "3d") -> MatchResult:
    """Greedy matching: in descending score order each detection takes the
    unmatched ground truth of highest IoU, if that IoU reaches the threshold."""
    iou = _iou_fn(mode)
    n = len(dets)
    order = np.argsort(-np.array([d.score for d in dets], np.float64), kind="stable")
    gt_index = np.full(n, -1, np.int64)
    ious = np.zeros(n)
    herr = np.full(n, np.nan)
    taken = np.zeros(len(gts), bool)
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            gt_index[i] = best_j
            ious[i] = best
            herr[i] = heading_error(dets[i].box.theta, gts[best_j].theta)
    return MatchResult(order, gt_index, ious, herr)


@dataclass
class APResult:
    ap: float
    aph: float
    num_gt: int
    num_det: int
    match: MatchResult = field(repr=False)


def _step_area(scores_sorted, tp, weight, num_gt):
    """Exact non-interpolated area under the PR step curve, cutting only at
    distinct score values. Accumulated in rationals so the result is the
    correctly rounded value of the exact sum."""
    area = Fraction(0)
    prev_recall = Fraction(0)
    tp_acc = Fraction(0)
    n = len(scores_sorted)
    for k in range(n):
        if tp[k]:
            tp_acc += Fraction(weight[k])
        if k + 1 < n and scores_sorted[k + 1] == scores_sorted[k]:
            continue
        recall = tp_acc / num_gt
        precision = tp_acc / (k + 1)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def evaluate_ap(dets: Sequence[Detection], gts: Sequence[Box7], iou_threshold: float,
                mode: str = "3d") -> APResult:
    """AP and heading-weighted APH for one class.

    APH uses the same matching as AP; each true positive counts
    max(0, 1 - |dtheta|/pi) in both precision and recall.
    """
    if len(gts) == 0:
        raise ValueError("AP is undefined without ground truths")
    m = match_detections(dets, gts, iou_threshold, mode)
    o = m.order
    scores = [float(dets[i].score) for i in o]
    tp = (m.gt_index[o] >= 0).tolist()
    ones = [1.0] * len(o)
    w = [max(0.0, 1.0 - e / math.pi) if t else 0.0 for e, t in zip(m.heading_error[o], tp)]
    ap = _step_area(scores, tp, ones, len(gts))
    aph = _step_area(scores, tp, w, len(gts))
    return APResult(ap, aph, len(gts), len(dets), m)


def evaluation_report(dets: Sequence[Detection], gts: Sequence[tuple[Box7, int]],
                      iou_thresholds: dict[int, float], mode: str = "3d") -> dict:
    """Per-class JSON-ready report. ``gts`` holds (box, class_id) pairs."""
    report = {}
    for cls, thr in sorted(iou_thresholds.items()):
        g = [b for b, c in gts if c == cls]
        d = [x for x in dets if x.class_id == cls]
        if not g:
            continue
        r = evaluate_ap(d, g, thr, mode)
        report[str(cls)] = {"ap": r.ap, "aph": r.aph, "mode": mode, "iou_threshold": thr,
                            "num_gt": r.num_gt, "num_det": r.num_det}
    return report


# --------------------------------------------------------------------------
# weighted boxes fusion


@dataclass
class FusionCluster:
    members: list = field(default_factory=list)  # (Detection, source index)
    box: Box7 | None = None
    score: float = 0.0

    @property
    def class_id(self) -> int:
        return self.members[0][0].class_id

    @property
    def sources(self) -> set:
        return {s for _, s in self.members}


def fuse_boxes(boxes: Sequence[Box7], scores: Sequence[float]) -> Box7:
    """Score-weighted mean of center and dims; yaw by the weighted circular
    mean of 2*theta. Both are anchored on the first box so equal members come
    back unchanged, and theta / theta + pi never average to a perpendicular
    box."""
    s = np.asarray(scores, np.float64)
    if s.sum() <= 0.0:
        s = np.ones_like(s)
    wts = s / s.sum()
    arr = np.stack([b.as_array() for b in boxes])
    # mean of offsets from the first box, so identical members come back exactly
    geo = arr[0, :6] + wts @ (arr[:, :6] - arr[0, :6])
    ref = arr[0, 6]
    d = 2.0 * wrap_angle(arr[:, 6] - ref)
    phi = 0.5 * math.atan2(float(wts @ np.sin(d)), float(wts @ np.cos(d)))
    return Box7(*geo, float(wrap_angle(ref + phi)))


def _canonical_key(item):
    det, _ = item
    return (-det.score, *det.box.as_array().tolist(), det.class_id)


def wbf_3d(det_sets: Sequence[Sequence[Detection]],
           iou_threshold: float = DEFAULT_WBF_THRESHOLD) -> list[Detection]:
    """Fuse detection sets from several models / augmentations.

    Detections are pooled and visited in canonical order (score, then
    geometry); each joins the first same-class cluster whose fused box it
    overlaps by at least ``iou_threshold`` in 3D. The fused score is the
    member mean times the fraction of sets that contributed.
    """
    clusters = wbf_clusters(det_sets, iou_threshold)
    return [Detection(c.box, c.score, c.class_id) for c in clusters]


def wbf_clusters(det_sets: Sequence[Sequence[Detection]],
                 iou_threshold: float = DEFAULT_WBF_THRESHOLD) -> list[FusionCluster]:
    if len(det_sets) == 0:
        raise ValueError("need at least one detection set")
    total = len(det_sets)
    pooled = sorted(((d, s) for s, ds in enumerate(det_sets) for d in ds), key=_canonical_key)
    clusters: list[FusionCluster] = []
    for det, src in pooled:
        home = None
        for c in clusters:
            if c.class_id == det.class_id and iou_3d(c.box, det.box) >= iou_threshold:
                home = c
                break
        if home is None:
            home = FusionCluster()
            clusters.append(home)
        home.members.append((det, src))
        home.box = fuse_boxes([d.box for d, _ in home.members], [d.score for d, _ in home.members])
    for c in clusters:
        sc = [d.score for d, _ in c.members]
        c.score = min(1.0, math.fsum(sc) / len(sc) * len(c.sources) / total)
    return clusters


def tta_wrap(run: Callable[[np.ndarray], list[Detection]], points: np.ndarray,
             augmentations: Sequence[RigidTransform]) -> list[list[Detection]]:
    """One detection set per augmentation, mapped back to the input frame."""
    out = []
    for aug in augmentations:
        pts, _ = aug.apply(points, [])
        dets = run(pts)
        _, boxes = aug.invert(np.zeros((0, 3)), [d.box for d in dets])
        out.append([Detection(b, d.score, d.class_id) for b, d in zip(boxes, dets)])
    return out
