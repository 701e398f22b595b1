"""Sparse center-heatmap head: targets, box coding, losses and decoding.

Sites are the active voxels of the backbone output. ``centers`` are their
metric centers, (N, 2) for pillar backbones and (N, 3) for 3D ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Box7, Detection, VEHICLE, logit, points_in_box, sigmoid, wrap_angle
from .geometry import iou_3d
from .sparse import SparseTensor, build_rulebook_ssc

MIN_DIM = 1e-3


@dataclass
class HeadOutput:
    heatmap_logits: np.ndarray  # (N,)
    box: np.ndarray             # (N, 6): dx, dy, dz, l, w, h
    bin_logits: np.ndarray      # (N, B)
    bin_residuals: np.ndarray   # (N, B)

    def __post_init__(self):
        n = len(self.heatmap_logits)
        if self.box.shape != (n, 6):
            raise ValueError(f"box params must be ({n}, 6), got {self.box.shape}")
        if self.bin_logits.shape != self.bin_residuals.shape or len(self.bin_logits) != n:
            raise ValueError("bin logits/residuals misaligned with sites")

    @property
    def num_bins(self) -> int:
        return self.bin_logits.shape[1]

    @classmethod
    def zeros(cls, n: int, num_bins: int, fill_logit: float = -10.0) -> "HeadOutput":
        return cls(np.full(n, fill_logit), np.zeros((n, 6)), np.zeros((n, num_bins)),
                   np.zeros((n, num_bins)))


def head_width(num_bins: int) -> int:
    return 1 + 6 + 2 * num_bins


def init_head_params(in_channels: int, num_bins: int, rng: np.random.Generator,
                     prefix: str = "head/") -> dict[str, np.ndarray]:
    bound = math.sqrt(6.0 / in_channels)
    return {prefix + "kernel": rng.uniform(-bound, bound, size=(in_channels, head_width(num_bins))),
            prefix + "bias": np.zeros(head_width(num_bins))}


def head_forward(features: np.ndarray, params: Mapping[str, np.ndarray], num_bins: int,
                 prefix: str = "head/") -> HeadOutput:
    """One fully connected layer from site features to every head output."""
    W = params[prefix + "kernel"]
    if W.shape[1] != head_width(num_bins):
        raise ValueError(f"head kernel emits {W.shape[1]} values, need {head_width(num_bins)}")
    y = np.asarray(features, np.float64) @ W + params[prefix + "bias"]
    B = num_bins
    return HeadOutput(y[:, 0].copy(), y[:, 1:7].copy(), y[:, 7:7 + B].copy(), y[:, 7 + B:].copy())


# --------------------------------------------------------------------------
# targets


@dataclass
class HeatmapTarget:
    h: np.ndarray           # (N,) in [0, 1]
    assignment: np.ndarray  # (N,) containing box used for regression, -1 if none
    delta1: float = 0.2

    @property
    def mask(self) -> np.ndarray:
        return self.h > self.delta1


def sites_in_box(centers: np.ndarray, box: Box7) -> np.ndarray:
    c = np.asarray(centers, np.float64)
    return points_in_box(c, box, bev_only=c.shape[1] == 2)


def compute_heatmap(centers: np.ndarray, boxes: Sequence[Box7], sigma: float,
                    delta1: float = 0.2) -> HeatmapTarget:
    """h(v) = max over boxes containing v of exp(-(|v - c| - d_min) / sigma^2).

    ``d_min`` is the distance from the box center to its closest contained
    site, so that site scores exactly 1. Boxes containing no site add
    nothing; sites in no box score 0. Among several containing boxes the
    nearest center is used for regression.
    """
    c = np.asarray(centers, np.float64)
    if len(c) == 0:
        raise ValueError("heatmap needs at least one site")
    d = c.shape[1]
    h = np.zeros(len(c))
    assign = np.full(len(c), -1, np.int64)
    best_dist = np.full(len(c), np.inf)
    for j, b in enumerate(boxes):
        inside = sites_in_box(c, b)
        if not np.any(inside):
            continue
        dist = np.linalg.norm(c[inside] - b.center[:d], axis=1)
        dmin = dist.min()
        val = np.exp(-(dist - dmin) / sigma ** 2)
        idx = np.nonzero(inside)[0]
        h[idx] = np.maximum(h[idx], val)
        closer = dist < best_dist[idx]
        assign[idx[closer]] = j
        best_dist[idx[closer]] = dist[closer]
    return HeatmapTarget(h, assign, delta1)


def encode_heading(theta, num_bins: int):
    """(bin index, residual) with bins of width 2pi/B starting at -pi;
    the residual is normalized by half a bin width and lies in [-1, 1)."""
    bw = 2.0 * math.pi / num_bins
    t = wrap_angle(theta)
    b = np.clip(np.floor((np.asarray(t) + math.pi) / bw).astype(np.int64), 0, num_bins - 1)
    center = -math.pi + (b + 0.5) * bw
    return b, (t - center) / (bw / 2.0)


def decode_heading(bin_index, residual, num_bins: int):
    bw = 2.0 * math.pi / num_bins
    return wrap_angle(-math.pi + (np.asarray(bin_index) + 0.5) * bw + np.asarray(residual) * bw / 2.0)


def encode_box(center: np.ndarray, box: Box7, pillar: bool) -> np.ndarray:
    """(dx, dy, dz, l, w, h) of ``box`` relative to one site center.
    In pillar mode dz is the absolute box z."""
    dz = box.cz if pillar else box.cz - center[2]
    return np.array([box.cx - center[0], box.cy - center[1], dz, box.l, box.w, box.h])


def decode_box(center: np.ndarray, params: np.ndarray, theta: float, pillar: bool) -> Box7:
    cz = params[2] if pillar else center[2] + params[2]
    dims = np.maximum(params[3:6], MIN_DIM)
    return Box7(center[0] + params[0], center[1] + params[1], cz, dims[0], dims[1], dims[2], theta)


@dataclass
class BoxTargets:
    sites: np.ndarray     # (M,) site index
    box: np.ndarray       # (M, 6)
    bin: np.ndarray       # (M,)
    residual: np.ndarray  # (M,)
    boxes: list           # (M,) target Box7

    def __len__(self) -> int:
        return len(self.sites)


def encode_targets(centers: np.ndarray, boxes: Sequence[Box7], target: HeatmapTarget,
                   num_bins: int, pillar: bool | None = None) -> BoxTargets:
    c = np.asarray(centers, np.float64)
    if pillar is None:
        pillar = c.shape[1] == 2
    sites = np.nonzero(target.mask)[0]
    rows, bins, res, tb = [], [], [], []
    for i in sites:
        j = target.assignment[i]
        if j < 0:
            raise ValueError(f"site {i} is above delta1 but inside no box")
        b = boxes[j]
        rows.append(encode_box(c[i], b, pillar))
        bi, r = encode_heading(b.theta, num_bins)
        bins.append(int(bi))
        res.append(float(r))
        tb.append(b)
    return BoxTargets(sites, np.array(rows).reshape(-1, 6), np.array(bins, np.int64),
                      np.array(res, np.float64), tb)


# --------------------------------------------------------------------------
# losses; each returns (value, gradient(s) w.r.t. raw head outputs)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def loss_heatmap(logits: np.ndarray, h: np.ndarray, alpha: float = 2.0, beta: float = 4.0,
                 eps: float = 1e-3):
    """Penalty-reduced focal loss normalized by the number of peak sites
    (h > 1 - eps)."""
    x = np.asarray(logits, np.float64)
    h = np.asarray(h, np.float64)
    pos = h > 1.0 - eps
    N = int(pos.sum())
    if N == 0:
        raise ValueError("heatmap loss needs at least one site with h > 1 - eps")
    p = sigmoid(x)
    q = 1.0 - p
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    neg = ~pos
    loss = np.zeros_like(x)
    grad = np.zeros_like(x)
    loss[pos] = -(q[pos] ** alpha) * log_p[pos]
    grad[pos] = q[pos] ** alpha * (alpha * p[pos] * log_p[pos] - q[pos])
    w = (1.0 - h[neg]) ** beta
    loss[neg] = -w * p[neg] ** alpha * log_q[neg]
    grad[neg] = w * p[neg] ** alpha * (p[neg] - alpha * q[neg] * log_q[neg])
    return float(loss.sum() / N), grad / N


def smooth_l1(x):
    """Elementwise smooth-L1 (Huber with beta 1) and its derivative."""
    x = np.asarray(x, np.float64)
    a = np.abs(x)
    val = np.where(a < 1.0, 0.5 * x * x, a - 0.5)
    grad = np.where(a < 1.0, x, np.sign(x))
    return val, grad


def _bin_terms(bin_logits, residuals, target_theta, num_bins):
    z = np.asarray(bin_logits, np.float64)
    r = np.asarray(residuals, np.float64)
    b, r_t = encode_heading(np.asarray(target_theta, np.float64), num_bins)
    b = np.atleast_1d(b)
    r_t = np.atleast_1d(r_t)
    m = np.arange(len(z))
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = lse - z[m, b]
    soft = np.exp(z - lse[:, None])
    g_logits = soft
    g_logits[m, b] -= 1.0
    sl, sg = smooth_l1(r[m, b] - r_t)
    g_res = np.zeros_like(r)
    g_res[m, b] = sg
    return ce + sl, g_logits, g_res


def loss_bin_heading(bin_logits, residuals, target_theta, num_bins: int):
    """Bin classification cross-entropy plus smooth-L1 on the true bin's
    residual, averaged over sites. Returns (loss, grad_logits, grad_res)."""
    if num_bins < 2:
        raise ValueError("need at least two bins")
    z = np.atleast_2d(np.asarray(bin_logits, np.float64))
    if z.shape[1] != num_bins:
        raise ValueError("bin logits width must equal num_bins")
    per, gz, gr = _bin_terms(z, np.atleast_2d(residuals), np.atleast_1d(target_theta), num_bins)
    M = len(per)
    return float(per.sum() / M), gz / M, gr / M


@dataclass
class BoxLoss:
    total: float
    smooth_l1: float
    heading: float
    iou: float
    grad_box: np.ndarray
    grad_bin_logits: np.ndarray
    grad_bin_residuals: np.ndarray


def loss_box(head: HeadOutput, targets: BoxTargets, centers: np.ndarray,
             pillar: bool | None = None) -> BoxLoss:
    """Mean over masked sites of smooth-L1 (6 box params) + bin heading loss
    + (1 - IoU_3d). The IoU term is forward only."""
    M = len(targets)
    if M == 0:
        raise ValueError("box loss needs at least one masked site")
    c = np.asarray(centers, np.float64)
    if pillar is None:
        pillar = c.shape[1] == 2
    s = targets.sites
    B = head.num_bins
    sl, sg = smooth_l1(head.box[s] - targets.box)
    theta_t = np.array([b.theta for b in targets.boxes])
    hb, gz, gr = _bin_terms(head.bin_logits[s], head.bin_residuals[s], theta_t, B)
    iou_terms = np.empty(M)
    pred_bins = np.argmax(head.bin_logits[s], axis=1)
    for k, i in enumerate(s):
        th = decode_heading(pred_bins[k], head.bin_residuals[i, pred_bins[k]], B)
        iou_terms[k] = 1.0 - iou_3d(decode_box(c[i], head.box[i], th, pillar), targets.boxes[k])
    g_box = np.zeros_like(head.box)
    g_box[s] = sg / M
    g_z = np.zeros_like(head.bin_logits)
    g_z[s] = gz / M
    g_r = np.zeros_like(head.bin_residuals)
    g_r[s] = gr / M
    l_sl, l_h, l_i = sl.sum() / M, hb.sum() / M, iou_terms.sum() / M
    return BoxLoss(float(l_sl + l_h + l_i), float(l_sl), float(l_h), float(l_i), g_box, g_z, g_r)


def loss_total(seg: float, hm: float, box: float, lambda1: float = 400.0,
               lambda2: float = 4.0) -> float:
    vals = (seg, hm, box)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite loss component in {vals}")
    return lambda1 * seg + lambda2 * hm + box


# --------------------------------------------------------------------------
# decoding


def local_maxima(coords: np.ndarray, values: np.ndarray, window: int = 3) -> np.ndarray:
    """Indices of sites that beat every active neighbour in the window.

    Submanifold: inactive neighbours are ignored. Exact ties go to the
    lexicographically smaller coordinate (earlier canonical index).
    """
    t = SparseTensor(coords, values.reshape(-1, 1))
    rb = build_rulebook_ssc(t, window)
    keep = np.ones(len(values), bool)
    v = values
    for ii, oo in rb.pairs:
        other = ii != oo
        ii, oo = ii[other], oo[other]
        beaten = (v[ii] > v[oo]) | ((v[ii] == v[oo]) & (ii < oo))
        keep[oo[beaten]] = False
    return np.nonzero(keep)[0]


def decode(head: HeadOutput, coords: np.ndarray, centers: np.ndarray, delta2: float = 0.2,
           class_id: int = VEHICLE, pillar: bool | None = None) -> list[Detection]:
    """Threshold the heatmap at delta2, keep submanifold 3x3(x3) local maxima
    among the candidates, and decode one box per kept site. No NMS."""
    c = np.asarray(centers, np.float64)
    if pillar is None:
        pillar = c.shape[1] == 2
    x = np.asarray(head.heatmap_logits, np.float64)
    if delta2 <= 0.0:
        cand = np.arange(len(x))
    elif delta2 >= 1.0:
        cand = np.zeros(0, np.int64)
    else:
        cand = np.nonzero(x > float(logit(delta2)))[0]
    if len(cand) == 0:
        return []
    keep = cand[local_maxima(np.asarray(coords)[cand], x[cand])]
    B = head.num_bins
    scores = sigmoid(x[keep])
    dets = []
    for i, sc in zip(keep, scores):
        b = int(np.argmax(head.bin_logits[i]))
        th = decode_heading(b, head.bin_residuals[i, b], B)
        dets.append(Detection(decode_box(c[i], head.box[i], float(th), pillar), float(sc), class_id))
    return dets


def plant_head_output(centers: np.ndarray, boxes: Sequence[Box7], num_bins: int,
                      pillar: bool | None = None, peak_logit: float = 10.0,
                      floor_logit: float = -10.0) -> HeadOutput:
    """Head output that decodes exactly to ``boxes``.

    Each box is planted at the site nearest its center (BEV distance for
    pillars), with a confident true heading bin and the exact residual.
    """
    c = np.asarray(centers, np.float64)
    if pillar is None:
        pillar = c.shape[1] == 2
    out = HeadOutput.zeros(len(c), num_bins, floor_logit)
    d = c.shape[1]
    for b in boxes:
        i = int(np.argmin(np.linalg.norm(c - b.center[:d], axis=1)))
        out.heatmap_logits[i] = peak_logit
        out.box[i] = encode_box(c[i], b, pillar)
        bi, r = encode_heading(b.theta, num_bins)
        out.bin_logits[i] = -peak_logit
        out.bin_logits[i, int(bi)] = peak_logit
        out.bin_residuals[i, int(bi)] = float(r)
    return out
