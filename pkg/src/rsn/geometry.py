"""Rotated-box overlap: convex polygon clipping, BEV / 3D IoU, IoU loss."""

from __future__ import annotations

import enum

import numpy as np

from .core import Box7, box_corners_bev

AREA_EPS = 1e-12
_INSIDE_TOL = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _dedupe(pts: list) -> list:
    out = []
    for p in pts:
        if not out or abs(p[0] - out[-1][0]) > AREA_EPS or abs(p[1] - out[-1][1]) > AREA_EPS:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= AREA_EPS and abs(out[0][1] - out[-1][1]) <= AREA_EPS:
        out.pop()
    return out


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of two counter-clockwise convex polygons.

    Returns an (n, 2) array, or a (0, 2) array when the overlap is empty or
    its area is below 1e-12.
    """
    output = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    m = len(clip)
    for i in range(m):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            cur_in = sc >= -_INSIDE_TOL
            prev_in = sp >= -_INSIDE_TOL
            if cur_in:
                if not prev_in:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_in:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
        output = _dedupe(output)
    if len(output) < 3:
        return np.zeros((0, 2))
    poly = np.array(output)
    if polygon_area(poly) < AREA_EPS:
        return np.zeros((0, 2))
    return poly


def bev_intersection_area(a: Box7, b: Box7) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * np.hypot(a.l, a.w)
    rb = 0.5 * np.hypot(b.l, b.w)
    if np.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    poly = clip_convex(box_corners_bev(a), box_corners_bev(b))
    return polygon_area(poly) if len(poly) else 0.0


def _ratio(inter: float, union: float) -> float:
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    # snap round-off on coincident boxes
    if union - inter <= AREA_EPS * union:
        return 1.0
    return min(1.0, inter / union)


def iou_bev(a: Box7, b: Box7) -> float:
    inter = bev_intersection_area(a, b)
    return _ratio(inter, a.l * a.w + b.l * b.w - inter)


def z_overlap(a: Box7, b: Box7) -> float:
    lo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    hi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    return max(0.0, hi - lo)


def iou_3d(a: Box7, b: Box7) -> float:
    dz = z_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    return _ratio(inter, a.volume() + b.volume() - inter)


class IoULossKind(enum.Enum):
    PLAIN = "plain"


def iou_loss(pred: Box7, target: Box7, kind: IoULossKind = IoULossKind.PLAIN) -> float:
    if kind is not IoULossKind.PLAIN:
        raise NotImplementedError(kind)
    return 1.0 - iou_3d(pred, target)


def iou_matrix(a: list[Box7], b: list[Box7], mode: str = "3d") -> np.ndarray:
    fn = iou_3d if mode.lower() == "3d" else iou_bev
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = fn(x, y)
    return out
