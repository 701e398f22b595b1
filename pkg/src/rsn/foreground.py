"""Foreground segmentation loss, score thresholding and point gathering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import logit, sigmoid
from .range_image import RangeImage, unproject
from .rife import RifeOutput


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss_seg(logits, labels, valid, focal_gamma: float = 2.0, focal_alpha: float = 0.25):
    """Alpha-balanced sigmoid focal loss averaged over valid pixels.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``logits`` and
    is zero on invalid pixels.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    m = np.asarray(valid, dtype=bool)
    if x.shape != y.shape or x.shape != m.shape:
        raise ValueError("logits, labels and valid mask must share a shape")
    P = int(m.sum())
    if P == 0:
        raise ValueError("focal loss needs at least one valid pixel")
    g = focal_gamma
    p = sigmoid(x)
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)

    pos = y & m
    neg = ~y & m
    per = np.zeros_like(x)
    grad = np.zeros_like(x)
    q = 1.0 - p
    per[pos] = -focal_alpha * q[pos] ** g * log_p[pos]
    grad[pos] = focal_alpha * q[pos] ** g * (g * p[pos] * log_p[pos] - q[pos])
    per[neg] = -(1.0 - focal_alpha) * p[neg] ** g * log_q[neg]
    grad[neg] = (1.0 - focal_alpha) * p[neg] ** g * (p[neg] - g * q[neg] * log_q[neg])
    return float(per[m].sum() / P), grad / P


@dataclass
class ForegroundPoints:
    """Selected points as parallel arrays, ordered by (frame, row, col)."""

    positions: np.ndarray                 # (N, 3)
    features: np.ndarray                  # (N, F)
    pixels: np.ndarray                    # (N, 2) row, col
    scores: np.ndarray                    # (N,)
    frame_index: np.ndarray = field(default=None)  # (N,) int
    deltas: np.ndarray = field(default=None)       # (N,) seconds behind frame 0

    def __post_init__(self):
        n = len(self.positions)
        if self.frame_index is None:
            self.frame_index = np.zeros(n, np.int64)
        if self.deltas is None:
            self.deltas = np.zeros(n)
        for name in ("features", "pixels", "scores", "frame_index", "deltas"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, idx) -> "ForegroundPoints":
        return ForegroundPoints(self.positions[idx], self.features[idx], self.pixels[idx],
                                self.scores[idx], self.frame_index[idx], self.deltas[idx])

    @classmethod
    def concat(cls, parts: list["ForegroundPoints"]) -> "ForegroundPoints":
        return cls(*(np.concatenate([getattr(p, n) for p in parts]) for n in
                     ("positions", "features", "pixels", "scores", "frame_index", "deltas")))


def selection_mask(seg_logits: np.ndarray, valid: np.ndarray, gamma: float) -> np.ndarray:
    """valid AND sigmoid(logit) > gamma, compared in logit space.

    gamma = 0 selects every valid pixel and gamma = 1 selects none, even for
    logits large enough to saturate the sigmoid.
    """
    if gamma <= 0.0:
        return np.asarray(valid, bool).copy()
    if gamma >= 1.0:
        return np.zeros_like(valid, dtype=bool)
    return np.asarray(valid, bool) & (np.asarray(seg_logits) > float(logit(gamma)))


def select_foreground(rife: RifeOutput, image: RangeImage, gamma: float) -> ForegroundPoints:
    if rife.seg_logits.shape != image.range.shape:
        raise ValueError("segmentation logits do not match the image")
    if rife.features.shape[:2] != image.range.shape:
        raise ValueError("feature map does not match the image")
    mask = selection_mask(rife.seg_logits, image.valid, gamma)
    pix, pts = unproject(image)
    keep = mask[pix[:, 0], pix[:, 1]]
    pix, pts = pix[keep], pts[keep]
    feats = rife.features[pix[:, 0], pix[:, 1]]
    scores = sigmoid(rife.seg_logits[pix[:, 0], pix[:, 1]])
    return ForegroundPoints(pts, feats, pix, scores)


def recall_precision(selected: np.ndarray, labels: np.ndarray) -> tuple[float, float | None]:
    """Pixel recall and precision of a selection mask against label mask.

    Precision is ``None`` when nothing is selected. Raises if there are no
    positive labels, where recall is undefined.
    """
    sel = np.asarray(selected, bool)
    lab = np.asarray(labels, bool)
    positives = int(lab.sum())
    if positives == 0:
        raise ValueError("recall undefined: no positive labels")
    tp = int((sel & lab).sum())
    n_sel = int(sel.sum())
    precision = tp / n_sel if n_sel else None
    return tp / positives, precision
