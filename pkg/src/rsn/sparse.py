"""Sparse tensors, rulebooks, submanifold (SSC) and regular (SC) sparse
convolution, submanifold max pooling, and the config-driven backbone.

Kernel taps use the cross-correlation convention: a rulebook pair
(i -> o) at tap ``t`` means ``coord(i) == stride * coord(o) + t`` and the
weight slice ``W[t]`` multiplies ``features[i]``. For stride 1 this is the
offset ``coord(o) - coord(i) == -t``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np


def _lex_sorted_unique(coords: np.ndarray) -> bool:
    if len(coords) < 2:
        return True
    d = np.diff(coords, axis=0)
    # first nonzero entry of each row difference must be positive
    nz = d != 0
    first = np.argmax(nz, axis=1)
    lead = d[np.arange(len(d)), first]
    return bool(np.all(nz.any(axis=1)) and np.all(lead > 0))


@dataclass(frozen=True)
class SparseTensor:
    coords: np.ndarray    # (N, d) int64, unique, lexicographic order
    features: np.ndarray  # (N, C)
    stride_level: int = 1

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64)
        f = np.asarray(self.features, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] not in (2, 3):
            raise ValueError(f"coords must be (N, 2) or (N, 3), got {c.shape}")
        if f.ndim != 2 or len(f) != len(c):
            raise ValueError("need one feature row per site")
        if not _lex_sorted_unique(c):
            raise ValueError("coords must be unique and lexicographically sorted; "
                             "use SparseTensor.from_unsorted")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "features", f)

    @classmethod
    def from_unsorted(cls, coords, features, stride_level: int = 1) -> "SparseTensor":
        c = np.asarray(coords, dtype=np.int64)
        f = np.asarray(features, dtype=np.float64)
        if len(c) == 0:
            return cls(c.reshape(0, c.shape[1] if c.ndim == 2 else 2), f.reshape(0, f.shape[-1] if f.ndim == 2 else 1), stride_level)
        order = np.lexsort(c.T[::-1])
        c, f = c[order], f[order]
        if len(c) > 1 and np.any(np.all(c[1:] == c[:-1], axis=1)):
            raise ValueError("duplicate coordinates")
        return cls(c, f, stride_level)

    @property
    def dims(self) -> int:
        return self.coords.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.stride_level)


class CoordIndex:
    """Lookup table from integer coordinates to row indices.

    Coordinates are packed into int64 keys in lexicographic order, so the
    canonical site order is also sorted-key order and lookups are a binary
    search (``np.searchsorted``).
    """

    def __init__(self, coords: np.ndarray, reach: int = 2):
        coords = np.asarray(coords, dtype=np.int64)
        self.dims = coords.shape[1]
        if len(coords):
            lo = coords.min(axis=0) - reach
            hi = coords.max(axis=0) + reach
        else:
            lo = np.zeros(self.dims, np.int64)
            hi = np.zeros(self.dims, np.int64)
        self.lo, self.hi = lo, hi
        span = (hi - lo + 1).astype(np.int64)
        mult = np.ones(self.dims, np.int64)
        for a in range(self.dims - 2, -1, -1):
            mult[a] = mult[a + 1] * span[a + 1]
        if float(np.prod(span.astype(float))) >= 2.0 ** 62:
            raise OverflowError("coordinate span too large to pack")
        self.mult = mult
        self.keys = self.pack(coords)

    def pack(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, np.int64) - self.lo) @ self.mult

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, -1 where absent."""
        query = np.asarray(query, np.int64)
        out = np.full(len(query), -1, np.int64)
        if len(self.keys) == 0 or len(query) == 0:
            return out
        ok = np.all((query >= self.lo) & (query <= self.hi), axis=1)
        k = self.pack(query[ok])
        pos = np.searchsorted(self.keys, k)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_c] == k
        res = np.where(hit, pos_c, -1)
        out[ok] = res
        return out


def kernel_taps(dims: int, extent: int = 3) -> np.ndarray:
    """All taps of an ``extent``^dims kernel in lexicographic order."""
    if extent % 2 == 0 or extent < 1:
        raise ValueError("kernel extent must be a positive odd number")
    r = extent // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=dims)), dtype=np.int64)


@dataclass
class Rulebook:
    taps: np.ndarray              # (K, d)
    pairs: list                   # per tap: (in_idx, out_idx) int64 arrays
    out_coords: np.ndarray        # (M, d) lexicographic
    stride: int = 1
    submanifold: bool = True

    @property
    def num_pairs(self) -> int:
        return int(sum(len(i) for i, _ in self.pairs))

    @property
    def num_out(self) -> int:
        return len(self.out_coords)

    def triples(self) -> set[tuple[int, int, int]]:
        return {(k, int(i), int(o)) for k, (ii, oo) in enumerate(self.pairs) for i, o in zip(ii, oo)}


def build_rulebook_ssc(t: SparseTensor, kernel_extent: int = 3) -> Rulebook:
    """Submanifold rulebook: output sites are exactly the input sites."""
    taps = kernel_taps(t.dims, kernel_extent)
    index = CoordIndex(t.coords, reach=kernel_extent)
    out_idx = np.arange(len(t), dtype=np.int64)
    pairs = []
    for tap in taps:
        src = index.lookup(t.coords + tap)
        hit = src >= 0
        pairs.append((src[hit], out_idx[hit]))
    return Rulebook(taps, pairs, t.coords.copy(), 1, True)


def build_rulebook_sc(t: SparseTensor, kernel_extent: int = 3, stride: int = 1) -> Rulebook:
    """Regular sparse conv rulebook.

    An output site is active iff at least one active input falls in its
    receptive field ``stride * o + taps``. Stride 1 therefore dilates the
    active set; stride 2 maps it onto the coarse grid.
    """
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    taps = kernel_taps(t.dims, kernel_extent)
    if len(t) == 0:
        return Rulebook(taps, [(np.zeros(0, np.int64), np.zeros(0, np.int64)) for _ in taps],
                        np.zeros((0, t.dims), np.int64), stride, False)
    cands = []
    for tap in taps:
        diff = t.coords - tap
        if stride == 1:
            cands.append(diff)
        else:
            ok = np.all(diff % stride == 0, axis=1)
            cands.append(diff[ok] // stride)
    out_coords = np.unique(np.concatenate(cands), axis=0)
    index = CoordIndex(t.coords, reach=kernel_extent * stride)
    out_idx = np.arange(len(out_coords), dtype=np.int64)
    pairs = []
    for tap in taps:
        src = index.lookup(stride * out_coords + tap)
        hit = src >= 0
        pairs.append((src[hit], out_idx[hit]))
    return Rulebook(taps, pairs, out_coords, stride, False)


def sparse_conv_forward(t: SparseTensor, weights: np.ndarray, bias: np.ndarray | None,
                        rulebook: Rulebook) -> SparseTensor:
    """Gather - matmul - scatter over the rulebook, taps in fixed order.

    ``weights`` is (K, C_in, C_out). Within a tap every output site has at
    most one contributing input, so the scatter is a plain indexed add.
    """
    W = np.asarray(weights, dtype=np.float64)
    K = len(rulebook.taps)
    if W.ndim != 3 or W.shape[0] != K:
        raise ValueError(f"weights must be ({K}, C_in, C_out), got {W.shape}")
    if W.shape[1] != t.channels:
        raise ValueError(f"tensor has {t.channels} channels, weights expect {W.shape[1]}")
    cout = W.shape[2]
    out = np.zeros((rulebook.num_out, cout))
    if bias is not None:
        out += np.asarray(bias, np.float64)
    for k, (ii, oo) in enumerate(rulebook.pairs):
        if len(ii):
            out[oo] += t.features[ii] @ W[k]
    return SparseTensor(rulebook.out_coords, out, t.stride_level * rulebook.stride)


def sparse_max_pool(t: SparseTensor, window: int = 3, rulebook: Rulebook | None = None) -> SparseTensor:
    """Channelwise max over the *active* sites in each window."""
    rb = rulebook if rulebook is not None else build_rulebook_ssc(t, window)
    out = t.features.copy()
    for ii, oo in rb.pairs:
        if len(ii):
            out[oo] = np.maximum(out[oo], t.features[ii])
    return t.with_features(out)


# --------------------------------------------------------------------------
# backbone config + executor


@dataclass(frozen=True)
class SpfeBlock:
    kind: str       # "SSC" | "SC"
    stride: int
    channels: int

    def __post_init__(self):
        if self.kind not in ("SSC", "SC"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "SSC" and self.stride != 1:
            raise ValueError("submanifold blocks cannot stride")
        if self.channels < 1:
            raise ValueError("channels must be positive")


@dataclass(frozen=True)
class SpfeConfig:
    dims: int = 2
    blocks: tuple[SpfeBlock, ...] = ()
    kernel_extent: int = 3
    pointnet: bool = True

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")

    @property
    def total_stride(self) -> int:
        return int(np.prod([b.stride for b in self.blocks])) if self.blocks else 1

    def out_channels(self, in_channels: int) -> int:
        return self.blocks[-1].channels if self.blocks else in_channels

    def to_json(self) -> dict:
        return {"dims": self.dims, "kernel_extent": self.kernel_extent, "pointnet": self.pointnet,
                "blocks": [{"kind": b.kind, "stride": b.stride, "channels": b.channels}
                           for b in self.blocks]}

    @classmethod
    def from_json(cls, d: dict | str) -> "SpfeConfig":
        if isinstance(d, str):
            d = json.loads(d)
        blocks = tuple(SpfeBlock(b["kind"], int(b.get("stride", 1)), int(b["channels"]))
                       for b in d.get("blocks", []))
        return cls(int(d.get("dims", 2)), blocks, int(d.get("kernel_extent", 3)),
                   bool(d.get("pointnet", True)))

    @classmethod
    def preset(cls, name: str, channels: int | None = None) -> "SpfeConfig":
        try:
            dims, layout, ch, pointnet = _PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}") from None
        ch = channels or ch
        blocks = tuple(SpfeBlock(kind, stride, ch) for kind, stride, n in layout for _ in range(n))
        return cls(dims, blocks, 3, pointnet)


# (kind, stride, repeat) runs. Block counts are defaults, not measured facts.
_PRESETS = {
    "CarS": (2, [("SSC", 1, 4), ("SC", 2, 1), ("SSC", 1, 2)], 96, True),
    "CarL": (2, [("SSC", 1, 6), ("SC", 2, 1), ("SSC", 1, 4)], 96, True),
    "PedS": (2, [("SSC", 1, 6)], 96, True),
    "PedL": (2, [("SSC", 1, 10)], 96, True),
    "CarXL": (3, [("SSC", 1, 4), ("SC", 2, 1), ("SSC", 1, 4)], 64, False),
}
PRESET_NAMES = tuple(_PRESETS)


def init_spfe_params(config: SpfeConfig, in_channels: int, rng: np.random.Generator,
                     prefix: str = "spfe/") -> dict[str, np.ndarray]:
    params = {}
    K = config.kernel_extent ** config.dims
    c = in_channels
    for i, b in enumerate(config.blocks):
        bound = math.sqrt(6.0 / (K * c))
        params[f"{prefix}block{i}/kernel"] = rng.uniform(-bound, bound, size=(K, c, b.channels))
        params[f"{prefix}block{i}/bias"] = np.zeros(b.channels)
        c = b.channels
    return params


@dataclass
class BlockStats:
    kind: str
    stride: int
    in_sites: int
    out_sites: int
    pairs: int


def build_rulebook(t: SparseTensor, block: SpfeBlock, kernel_extent: int = 3) -> Rulebook:
    if block.kind == "SSC":
        return build_rulebook_ssc(t, kernel_extent)
    return build_rulebook_sc(t, kernel_extent, block.stride)


def spfe_rulebooks(t: SparseTensor, config: SpfeConfig) -> list[Rulebook]:
    """Site structure of the backbone without running any matmuls."""
    books = []
    cur = t
    for b in config.blocks:
        rb = build_rulebook(cur, b, config.kernel_extent)
        books.append(rb)
        cur = SparseTensor(rb.out_coords, np.zeros((rb.num_out, 0)), cur.stride_level * rb.stride)
    return books


def run_spfe(t: SparseTensor, config: SpfeConfig, params: Mapping[str, np.ndarray] | None,
             prefix: str = "spfe/", stats: list | None = None) -> SparseTensor:
    """Apply the blocks in order: sparse conv + ReLU each.

    Rulebooks are cached by site set, so consecutive SSC blocks share one.
    Per-block site and pair counts are appended to ``stats`` if given.
    """
    if t.dims != config.dims:
        raise ValueError(f"config is {config.dims}D but tensor is {t.dims}D")
    cur = t
    ssc_cache: Rulebook | None = None
    for i, b in enumerate(config.blocks):
        if params is None:
            raise ValueError("missing SPFE weights")
        W = params.get(f"{prefix}block{i}/kernel")
        if W is None:
            raise ValueError(f"missing weights for block {i}")
        if W.shape[1] != cur.channels or W.shape[2] != b.channels:
            raise ValueError(f"block {i}: weights {W.shape} do not fit {cur.channels}->{b.channels}")
        if b.kind == "SSC":
            if ssc_cache is None:
                ssc_cache = build_rulebook_ssc(cur, config.kernel_extent)
            rb = ssc_cache
        else:
            rb = build_rulebook_sc(cur, config.kernel_extent, b.stride)
            ssc_cache = None
        out = sparse_conv_forward(cur, W, params.get(f"{prefix}block{i}/bias"), rb)
        out = out.with_features(np.maximum(out.features, 0.0))
        if stats is not None:
            stats.append(BlockStats(b.kind, b.stride, len(cur), len(out), rb.num_pairs))
        cur = out
    return cur
