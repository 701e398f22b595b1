"""Range image feature extraction: a small U-Net over the range image.

Tensors are (H, W, C) float64 arrays. Convolutions pad circularly along
the azimuth (width) axis and with zeros along the beam (height) axis, so a
column rotation of the input rotates stride-1 outputs identically.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

WEIGHTS_MAGIC = b"RSNW"

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class Conv2DLayer:
    kernel: np.ndarray  # (kh, kw, in_ch, out_ch)
    bias: np.ndarray    # (out_ch,)
    stride: int = 1

    def __post_init__(self):
        k = np.asarray(self.kernel)
        if k.ndim != 4:
            raise ValueError(f"kernel must be rank 4, got shape {k.shape}")
        if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise ValueError("kernel extents must be odd")
        if np.asarray(self.bias).shape != (k.shape[3],):
            raise ValueError("bias length must equal out_ch")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if not np.all(np.isfinite(k)):
            raise ValueError("non-finite kernel weights")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, layer: Conv2DLayer, wrap: bool = True) -> np.ndarray:
    """SAME cross-correlation; output spatial dims are ceil(in / stride)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) input, got shape {x.shape}")
    kh, kw, cin, cout = layer.kernel.shape
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, layer expects {cin}")
    s = layer.stride
    H, W, _ = x.shape
    oh, top, bottom = _same_pad(H, kh, s)
    ow, left, right = _same_pad(W, kw, s)
    xp = np.pad(x, ((top, bottom), (0, 0), (0, 0)))
    if left or right:
        xp = np.pad(xp, ((0, 0), (left, right), (0, 0)), mode="wrap" if wrap else "constant")
    out = np.broadcast_to(np.asarray(layer.bias, np.float64), (oh, ow, cout)).copy()
    kernel = np.asarray(layer.kernel, np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s, :]
            out += patch @ kernel[i, j]
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _layer(params: Mapping[str, np.ndarray], name: str, stride: int = 1) -> Conv2DLayer:
    return Conv2DLayer(params[f"{name}/kernel"], params[f"{name}/bias"], stride)


def resnet_block(x: np.ndarray, params: Mapping[str, np.ndarray], stride: int = 1,
                 prefix: str = "") -> np.ndarray:
    """Two 3x3 convs with ReLU plus a skip; ReLU(residual + skip).

    The skip is a strided 1x1 projection when ``{prefix}proj/kernel`` is
    present, identity otherwise (which requires stride 1 and equal widths).
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    h = relu(conv2d_forward(x, _layer(params, prefix + "conv1", stride)))
    h = conv2d_forward(h, _layer(params, prefix + "conv2", 1))
    if prefix + "proj/kernel" in params:
        skip = conv2d_forward(x, _layer(params, prefix + "proj", stride))
    else:
        if stride != 1 or x.shape[2] != h.shape[2]:
            raise ValueError("identity skip needs stride 1 and matching channels")
        skip = x
    return relu(h + skip)


def bilinear_upsample_2x(x: np.ndarray, wrap: bool = False) -> np.ndarray:
    """2x bilinear upsampling, half-pixel (align_corners=False) sampling.

    Borders replicate the edge sample; ``wrap=True`` treats the width axis
    as periodic instead.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]

    def up(a, axis, periodic):
        n = a.shape[axis]
        idx = np.arange(n)
        if periodic:
            prev, nxt = (idx - 1) % n, (idx + 1) % n
        else:
            prev, nxt = np.maximum(idx - 1, 0), np.minimum(idx + 1, n - 1)
        cur = a
        even = 0.75 * cur + 0.25 * np.take(a, prev, axis=axis)
        odd = 0.75 * cur + 0.25 * np.take(a, nxt, axis=axis)
        out = np.stack([even, odd], axis=axis + 1)
        shape = list(a.shape)
        shape[axis] = 2 * n
        return out.reshape(shape)

    y = up(up(x, 0, False), 1, wrap)
    return y[..., 0] if squeeze else y


# --------------------------------------------------------------------------
# U-Net


@dataclass(frozen=True)
class UNetConfig:
    down_blocks: tuple[tuple[int, int], ...] = ((1, 16), (2, 32), (2, 64))
    up_blocks: tuple[tuple[int, int], ...] = ((2, 32), (2, 16), (1, 16))
    feature_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if len(self.up_blocks) != len(self.down_blocks):
            raise ValueError("need as many up blocks as down blocks")
        for L, C in (*self.down_blocks, *self.up_blocks):
            if L < 1 or C < 1:
                raise ValueError(f"bad block (L={L}, C={C})")
        if self.feature_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def stem_channels(self) -> int:
        return self.down_blocks[0][1]

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.down_blocks)

    def to_json(self) -> dict:
        return {"down_blocks": [list(b) for b in self.down_blocks],
                "up_blocks": [list(b) for b in self.up_blocks],
                "feature_channels": self.feature_channels,
                "in_channels": self.in_channels}

    @classmethod
    def from_json(cls, d: dict) -> "UNetConfig":
        return cls(tuple(tuple(b) for b in d["down_blocks"]),
                   tuple(tuple(b) for b in d["up_blocks"]),
                   int(d.get("feature_channels", 16)), int(d.get("in_channels", 3)))


@dataclass
class RifeOutput:
    seg_logits: np.ndarray  # (H, W)
    features: np.ndarray    # (H, W, F)


def _conv_shapes(config: UNetConfig) -> dict[str, tuple[int, int, int, int]]:
    """Kernel shape of every conv in the network, in execution order."""
    shapes: dict[str, tuple[int, int, int, int]] = {}

    def res(prefix, cin, cout, stride):
        shapes[prefix + "conv1"] = (3, 3, cin, cout)
        shapes[prefix + "conv2"] = (3, 3, cout, cout)
        if stride != 1 or cin != cout:
            shapes[prefix + "proj"] = (1, 1, cin, cout)

    c = config.stem_channels
    shapes["stem"] = (3, 3, config.in_channels, c)
    skip_ch = [c]
    for i, (L, C) in enumerate(config.down_blocks):
        for j in range(L):
            res(f"down{i}/res{j}/", c, C, 2 if j == 0 else 1)
            c = C
        skip_ch.append(C)
    n = len(config.down_blocks)
    for i, (L, C) in enumerate(config.up_blocks):
        shapes[f"up{i}/proj"] = (1, 1, c, C)
        c = C + skip_ch[n - 1 - i]
        for j in range(L):
            res(f"up{i}/res{j}/", c, C, 1)
            c = C
    shapes["head"] = (1, 1, c, 1 + config.feature_channels)
    return shapes


def init_unet_params(config: UNetConfig, rng: np.random.Generator, prefix: str = "rife/") -> Params:
    """Fan-in scaled uniform kernels, zero biases."""
    params: Params = {}
    for name, shape in _conv_shapes(config).items():
        fan_in = shape[0] * shape[1] * shape[2]
        bound = math.sqrt(6.0 / fan_in)
        params[f"{prefix}{name}/kernel"] = rng.uniform(-bound, bound, size=shape)
        params[f"{prefix}{name}/bias"] = np.zeros(shape[3])
    return params


def _strip(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    if not prefix:
        return dict(params)
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def unet_forward(image: np.ndarray, config: UNetConfig, params: Mapping[str, np.ndarray],
                 prefix: str = "rife/") -> RifeOutput:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != config.in_channels:
        raise ValueError(f"expected (H, W, {config.in_channels}) image, got {image.shape}")
    H, W, _ = image.shape
    t = config.total_stride
    if H % t or W % t:
        raise ValueError(f"image {H}x{W} not divisible by the total stride {t}")
    p = _strip(params, prefix)
    expected = _conv_shapes(config)
    for name, shape in expected.items():
        k = p.get(name + "/kernel")
        if k is None or k.shape != shape:
            got = None if k is None else k.shape
            raise ValueError(f"weight {prefix}{name}: expected {shape}, got {got}")

    x = relu(conv2d_forward(image, _layer(p, "stem")))
    skips = [x]
    for i, (L, _) in enumerate(config.down_blocks):
        for j in range(L):
            x = resnet_block(x, p, 2 if j == 0 else 1, prefix=f"down{i}/res{j}/")
        skips.append(x)
    n = len(config.down_blocks)
    for i, (L, _) in enumerate(config.up_blocks):
        x = conv2d_forward(x, _layer(p, f"up{i}/proj"))
        x = bilinear_upsample_2x(x, wrap=True)
        x = np.concatenate([x, skips[n - 1 - i]], axis=-1)
        for j in range(L):
            x = resnet_block(x, p, 1, prefix=f"up{i}/res{j}/")
    out = conv2d_forward(x, _layer(p, "head"))
    return RifeOutput(out[..., 0].copy(), out[..., 1:].copy())


# --------------------------------------------------------------------------
# RSNW checkpoint: magic, then per tensor
#   u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f32 data


def save_weights(params: Mapping[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        for name in sorted(params):
            arr = np.asarray(params[name])
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> Params:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not an RSNW checkpoint")
    off = 4
    params: Params = {}
    while off < len(buf):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        params[name] = arr.astype(np.float64)
    return params


def quantize_f32(params: Mapping[str, np.ndarray]) -> Params:
    """Round weights through float32, i.e. exactly what a checkpoint stores."""
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}
