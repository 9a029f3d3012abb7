"""Shared encoder/decoder, task heads and channel autoencoder.

Every layer is a per-cell affine map over the last axis (the arithmetic of a
1x1 convolution), optionally followed by ReLU. Forward functions ending in
``_forward`` return ``(out, cache)``; the matching ``_backward`` consumes the
cache and returns the input gradient plus a dict of parameter gradients.
Leading axes (batch, agent, rows, columns) are arbitrary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARAM_NAMES = ("enc_w", "enc_b", "dec_w", "dec_b", "seg_w", "seg_b",
               "det_w", "det_b", "cmp_w", "cmp_b", "dcmp_w", "dcmp_b")
DET_CHANNELS = 5

CHECKPOINT_MAGIC = b"AR2VPCKP"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDims:
    c_in: int = 12
    c_f: int = 32
    c_d: int = 16
    num_classes: int = 7
    compression_n: int = 1

    def __post_init__(self):
        if self.compression_n < 1 or self.c_f % self.compression_n:
            raise ShapeError(f"C_f={self.c_f} is not divisible by compression factor {self.compression_n}")

    @property
    def c_z(self) -> int:
        return self.c_f // self.compression_n


class ModelParams:
    """Named float64 tensors shared by the RSU and every vehicle."""

    def __init__(self, tensors: dict, dims: ModelDims):
        missing = set(PARAM_NAMES) - set(tensors)
        if missing:
            raise KeyError(f"missing parameter tensors: {sorted(missing)}")
        self.tensors = {k: np.asarray(tensors[k], dtype=np.float64) for k in PARAM_NAMES}
        self.dims = dims
        for k, v in self.tensors.items():
            if v.shape != expected_shapes(dims)[k]:
                raise ShapeError(f"{k}: shape {v.shape} != {expected_shapes(dims)[k]}")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{k} contains non-finite values")

    @classmethod
    def initialize(cls, dims: ModelDims, seed: int) -> "ModelParams":
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in expected_shapes(dims).items():
            if name.endswith("_b"):
                tensors[name] = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / shape[1])
                tensors[name] = rng.uniform(-limit, limit, size=shape)
        return cls(tensors, dims)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.dims)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equals(self, other: "ModelParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


@dataclass
class FeatureMap:
    """An (H, W, C) feature map and the id of the agent whose frame it is in."""

    data: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be (H, W, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map has non-finite values")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self):
        return self.data.shape


def expected_shapes(d: ModelDims) -> dict:
    return {
        "enc_w": (d.c_f, d.c_in), "enc_b": (d.c_f,),
        "dec_w": (d.c_d, d.c_f), "dec_b": (d.c_d,),
        "seg_w": (d.num_classes, d.c_d), "seg_b": (d.num_classes,),
        "det_w": (DET_CHANNELS, d.c_d), "det_b": (DET_CHANNELS,),
        "cmp_w": (d.c_z, d.c_f), "cmp_b": (d.c_z,),
        "dcmp_w": (d.c_f, d.c_z), "dcmp_b": (d.c_f,),
    }


# ---------------------------------------------------------------- primitives

def _check(x, w, what):
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"{what}: input has {x.shape[-1]} channels, expected {w.shape[1]}")


def affine_forward(x, w, b):
    return x @ w.T + b, (x, w)


def affine_backward(dout, cache):
    if cache is None:
        raise CacheError("backward called without a forward cache")
    x, w = cache
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = d2.T @ x.reshape(-1, x.shape[-1])
    db = d2.sum(axis=0)
    return dout @ w, dw, db


def affine_relu_forward(x, w, b):
    pre = x @ w.T + b
    return np.maximum(pre, 0.0), (x, w, pre)


def affine_relu_backward(dout, cache):
    if cache is None:
        raise CacheError("backward called without a forward cache")
    x, w, pre = cache
    dpre = dout * (pre > 0)
    return affine_backward(dpre, (x, w))


def spatial_context(grid) -> np.ndarray:
    """Append a zero-padded 3x3 mean of every channel: (..., H, W, C) -> (..., H, W, 2C)."""
    x = np.asarray(grid, dtype=float)
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    H, W = x.shape[-3], x.shape[-2]
    acc = np.zeros_like(x)
    for dr in range(3):
        for dc in range(3):
            acc += xp[..., dr:dr + H, dc:dc + W, :]
    return np.concatenate([x, acc / 9.0], axis=-1)


# ---------------------------------------------------------------- layers

def _layer(name_w, name_b, relu, what):
    def forward(x, p):
        x = np.asarray(x, dtype=float)
        _check(x, p[name_w], what)
        if relu:
            return affine_relu_forward(x, p[name_w], p[name_b])
        return affine_forward(x, p[name_w], p[name_b])

    def backward(dout, cache):
        if cache is None:
            raise CacheError(f"{what}: backward called without a forward cache")
        fn = affine_relu_backward if relu else affine_backward
        dx, dw, db = fn(dout, cache)
        return dx, {name_w: dw, name_b: db}

    def apply(x, p):
        return forward(x, p)[0]

    return forward, backward, apply


encode_forward, encode_backward, encode = _layer("enc_w", "enc_b", True, "encode")
decode_forward, decode_backward, decode = _layer("dec_w", "dec_b", True, "decode")
seg_head_forward, seg_head_backward, seg_head = _layer("seg_w", "seg_b", False, "seg_head")
det_head_forward, det_head_backward, det_head = _layer("det_w", "det_b", False, "det_head")
_compress_forward, compress_backward, _compress = _layer("cmp_w", "cmp_b", False, "compress")
_decompress_forward, decompress_backward, _decompress = _layer("dcmp_w", "dcmp_b", False, "decompress")


def _check_factor(p: ModelParams, n: int):
    if n < 1 or p.dims.c_f % n:
        raise ShapeError(f"C_f={p.dims.c_f} is not divisible by compression factor {n}")
    if n != p.dims.compression_n:
        raise ShapeError(f"parameters were built for compression factor {p.dims.compression_n}, not {n}")


def compress_forward(x, p: ModelParams, n: int):
    _check_factor(p, n)
    return _compress_forward(x, p)


def decompress_forward(z, p: ModelParams, n: int):
    _check_factor(p, n)
    return _decompress_forward(z, p)


def compress(x, p: ModelParams, n: int):
    return compress_forward(x, p, n)[0]


def decompress(z, p: ModelParams, n: int):
    return decompress_forward(z, p, n)[0]


def add_grads(total: dict, part: dict):
    for k, v in part.items():
        total[k] = total[k] + v if k in total else v
    return total


# ---------------------------------------------------------------- checkpoints
# Layout (little-endian):
#   magic[8] "AR2VPCKP" | u32 version | u32 c_in c_f c_d num_classes compression_n | u32 count
#   per tensor: u16 name_len | name (ascii) | u32 ndim | u32 dims... | f64 row-major data

def save_checkpoint(p: ModelParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(p))


def checkpoint_bytes(p: ModelParams) -> bytes:
    d = p.dims
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<5I", d.c_in, d.c_f, d.c_d, d.num_classes, d.compression_n),
           struct.pack("<I", len(PARAM_NAMES))]
    for name in PARAM_NAMES:
        t = np.ascontiguousarray(p[name], dtype="<f8")
        nb = name.encode("ascii")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def load_checkpoint(path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(buf: bytes) -> ModelParams:
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an AR2VP checkpoint (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = ModelDims(*struct.unpack_from("<5I", buf, off))
    off += 20
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode("ascii")
            off += ln
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(buf):
                raise ValueError(f"checkpoint truncated inside tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8,
                                          offset=off).reshape(shape).astype(np.float64)
            off += nbytes
    except struct.error as exc:
        raise ValueError(f"checkpoint truncated: {exc}") from None
    return ModelParams(tensors, dims)
