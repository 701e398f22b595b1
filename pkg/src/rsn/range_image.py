"""Range images: synthetic projection, unprojection, normalization, labels,
and the RSNR binary file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Box7, points_in_box

MAGIC = b"RSNR"


def default_inclinations(height: int = 64, top: float = 0.1, bottom: float = -0.3) -> np.ndarray:
    """Uniform beam layout, row 0 is the highest beam."""
    return np.linspace(top, bottom, height)


@dataclass
class RangeImage:
    range: np.ndarray
    intensity: np.ndarray
    elongation: np.ndarray
    valid: np.ndarray
    inclinations: np.ndarray
    azimuth_span: float = 2.0 * math.pi

    def __post_init__(self):
        self.range = np.asarray(self.range, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.elongation = np.asarray(self.elongation, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.inclinations = np.asarray(self.inclinations, dtype=np.float64)
        shape = self.range.shape
        if len(shape) != 2:
            raise ValueError(f"range plane must be 2D, got {shape}")
        for name in ("intensity", "elongation", "valid"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} plane shape mismatch")
        if self.inclinations.shape != (shape[0],):
            raise ValueError("need one inclination per row")
        if shape[0] > 1 and not np.all(np.diff(self.inclinations) < 0):
            raise ValueError("beam inclinations must be strictly decreasing")
        if np.any(self.range[self.valid] < 0):
            raise ValueError("negative range on a valid pixel")

    @property
    def height(self) -> int:
        return self.range.shape[0]

    @property
    def width(self) -> int:
        return self.range.shape[1]

    @property
    def azimuth_step(self) -> float:
        return self.azimuth_span / self.width

    def column_azimuths(self) -> np.ndarray:
        """Azimuth at the center of each column; column ``W/2`` looks along +x."""
        return -self.azimuth_span / 2.0 + np.arange(self.width) * self.azimuth_step

    @classmethod
    def empty(cls, height: int, width: int, inclinations=None) -> "RangeImage":
        incl = default_inclinations(height) if inclinations is None else inclinations
        z = np.zeros((height, width))
        return cls(z, z.copy(), z.copy(), np.zeros((height, width), bool), incl)

    def roll_columns(self, k: int) -> "RangeImage":
        """Image of the scene rotated by ``k`` azimuth steps."""
        return RangeImage(np.roll(self.range, k, 1), np.roll(self.intensity, k, 1),
                          np.roll(self.elongation, k, 1), np.roll(self.valid, k, 1),
                          self.inclinations, self.azimuth_span)


@dataclass
class LabeledRangeImage:
    image: RangeImage
    fg_label: np.ndarray


def normalize(image: RangeImage, caps: Sequence[float] = (79.5, 2.0, 2.0)) -> np.ndarray:
    """(H, W, 3) tensor of min(v, m) / m per channel; invalid pixels are 0."""
    if len(caps) != 3 or any(not m > 0 for m in caps):
        raise ValueError(f"caps must be three positive values, got {caps}")
    planes = (image.range, image.intensity, image.elongation)
    out = np.stack([np.clip(p, 0.0, m) / m for p, m in zip(planes, caps)], axis=-1)
    out[~image.valid] = 0.0
    return out


def project(points: np.ndarray, height: int, width: int, inclinations=None,
            intensity=None, elongation=None, azimuth_span: float = 2.0 * math.pi) -> RangeImage:
    """Scatter a point cloud into a range image.

    Rows are the nearest beam inclination, columns the nearest azimuth
    center. When several points land in one pixel the largest range wins;
    equal ranges resolve to the earliest point.
    """
    incl = default_inclinations(height) if inclinations is None else np.asarray(inclinations, float)
    if len(incl) == 0:
        raise ValueError("empty inclination list")
    if len(incl) != height:
        raise ValueError("height must equal the number of inclinations")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    inten = np.zeros(n) if intensity is None else np.asarray(intensity, float)
    elong = np.zeros(n) if elongation is None else np.asarray(elongation, float)

    img = RangeImage.empty(height, width, incl)
    img.azimuth_span = azimuth_span
    r = np.linalg.norm(pts, axis=1)
    keep = r > 0
    if not np.any(keep):
        return img
    idx = np.nonzero(keep)[0]
    r = r[idx]
    az = np.arctan2(pts[idx, 1], pts[idx, 0])
    el = np.arcsin(np.clip(pts[idx, 2] / r, -1.0, 1.0))

    step = azimuth_span / width
    col = np.rint((az + azimuth_span / 2.0) / step).astype(np.int64) % width
    # nearest inclination on a strictly decreasing list
    asc = incl[::-1]
    pos = np.clip(np.searchsorted(asc, el), 1, height - 1) if height > 1 else np.zeros(len(el), np.int64)
    if height > 1:
        lo, hi = asc[pos - 1], asc[pos]
        pos = np.where(np.abs(el - lo) <= np.abs(hi - el), pos - 1, pos)
    row = height - 1 - pos

    flat = row * width + col
    order = np.lexsort((np.arange(len(flat)), -r, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order[first]
    rr, cc = row[win], col[win]
    img.range[rr, cc] = r[win]
    img.intensity[rr, cc] = inten[idx[win]]
    img.elongation[rr, cc] = elong[idx[win]]
    img.valid[rr, cc] = True
    return img


def unproject(image: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """Pixel indices (N, 2) in row-major order and their 3D points (N, 3)."""
    rows, cols = np.nonzero(image.valid)
    r = image.range[rows, cols]
    az = image.column_azimuths()[cols]
    inc = image.inclinations[rows]
    ce = np.cos(inc)
    pts = np.stack([r * ce * np.cos(az), r * ce * np.sin(az), r * np.sin(inc)], axis=1)
    return np.stack([rows, cols], axis=1), pts


def unproject_dense(image: RangeImage) -> np.ndarray:
    """(H, W, 3) point grid; invalid pixels hold zeros."""
    out = np.zeros(image.range.shape + (3,))
    pix, pts = unproject(image)
    out[pix[:, 0], pix[:, 1]] = pts
    return out


def label_foreground(image: RangeImage, boxes: Sequence[Box7]) -> LabeledRangeImage:
    labels = np.zeros(image.range.shape, bool)
    pix, pts = unproject(image)
    hit = np.zeros(len(pts), bool)
    for b in boxes:
        hit |= points_in_box(pts, b)
    labels[pix[hit, 0], pix[hit, 1]] = True
    return LabeledRangeImage(image, labels)


# --------------------------------------------------------------------------
# file format: "RSNR" u32 H u32 W | f32 range | f32 intensity | f32 elongation
#              | u8 valid | f32 inclinations   (little endian) + JSON sidecar


def save_range_image(image: RangeImage, path, meta: dict | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", image.height, image.width))
        for plane in (image.range, image.intensity, image.elongation):
            f.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(image.valid, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(image.inclinations, dtype="<f4").tobytes())
    sidecar = {"height": image.height, "width": image.width,
               "azimuth_span": image.azimuth_span}
    if meta:
        sidecar.update(meta)
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_range_image(path) -> RangeImage:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an RSNR range image")
    h, w = struct.unpack_from("<II", buf, 4)
    off = 12
    n = h * w

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    rng = take("<f4", n).reshape(h, w)
    inten = take("<f4", n).reshape(h, w)
    elong = take("<f4", n).reshape(h, w)
    valid = take(np.uint8, n).reshape(h, w).astype(bool)
    incl = take("<f4", h)
    span = 2.0 * math.pi
    side = path.with_name(path.name + ".json")
    if side.exists():
        span = float(json.loads(side.read_text()).get("azimuth_span", span))
    return RangeImage(rng.astype(np.float64), inten.astype(np.float64), elong.astype(np.float64),
                      valid, incl.astype(np.float64), span)
