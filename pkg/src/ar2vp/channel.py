"""Lossless broadcast channel with exact byte accounting.

Wire format (little-endian), shared by every payload kind::

    offset size field
    0      4    magic  b"AR2M"
    4      2    version (u16, =1)
    6      2    sender agent id (u16)
    8      1    kind (u8: 0 pose, 1 feature, 2 compressed_feature)
    9      1    dtype (u8: 0 float64, 1 float32)
    10     4    H (u32)
    14     4    W (u32)
    18     4    C (u32)
    22     ...  H*W*C values, row-major (H, W, C)

A pose is sent as a 1x1x6 float64 map: position (2) then rotation (4, row-major).
A broadcast is charged once per send regardless of how many agents receive it.
"""
from __future__ import annotations

import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose

MAGIC = b"AR2M"
VERSION = 1
HEADER = struct.Struct("<4sHHBBIII")
HEADER_SIZE = HEADER.size  # 22
KINDS = ("pose", "feature", "compressed_feature")
DTYPES = {"float64": (0, "<f8"), "float32": (1, "<f4")}
_DTYPE_BY_CODE = {code: (name, np_dtype) for name, (code, np_dtype) in DTYPES.items()}


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    sender: int
    payload_kind: str
    payload: bytes
    byte_count: int

    def __post_init__(self):
        if self.payload_kind not in KINDS:
            raise ValueError(f"unknown payload kind {self.payload_kind!r}")
        if self.byte_count != len(self.payload):
            raise ValueError(f"byte_count {self.byte_count} != payload length {len(self.payload)}")


def feature_byte_count(h: int, w: int, c: int, dtype: str = "float64") -> int:
    return HEADER_SIZE + int(np.dtype(DTYPES[dtype][1]).itemsize) * h * w * c


def serialize_feature(m, sender: int = 0, kind: str = "feature", dtype: str = "float64") -> bytes:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 3:
        raise WireError(f"feature maps must be (H, W, C), got shape {arr.shape}")
    if dtype not in DTYPES:
        raise WireError(f"unknown wire dtype {dtype!r}")
    code, np_dtype = DTYPES[dtype]
    h, w, c = arr.shape
    head = HEADER.pack(MAGIC, VERSION, sender, KINDS.index(kind), code, h, w, c)
    return head + np.ascontiguousarray(arr, dtype=np_dtype).tobytes()


def parse_header(buf: bytes) -> dict:
    if len(buf) < HEADER_SIZE:
        raise WireError(f"buffer of {len(buf)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, sender, kind, code, h, w, c = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported wire version {version}")
    if kind >= len(KINDS) or code not in _DTYPE_BY_CODE:
        raise WireError("malformed header: unknown kind or dtype code")
    return {"sender": sender, "kind": KINDS[kind], "dtype": _DTYPE_BY_CODE[code][0],
            "shape": (h, w, c)}


def deserialize_feature(buf: bytes) -> np.ndarray:
    head = parse_header(buf)
    np_dtype = DTYPES[head["dtype"]][1]
    n = int(np.prod(head["shape"]))
    need = HEADER_SIZE + n * np.dtype(np_dtype).itemsize
    if len(buf) != need:
        raise WireError(f"payload length {len(buf)} does not match header (expected {need})")
    data = np.frombuffer(buf, dtype=np_dtype, count=n, offset=HEADER_SIZE)
    return data.astype(np.float64).reshape(head["shape"])


def serialize_pose(pose: Pose, sender: int = 0) -> bytes:
    vals = np.concatenate([pose.position, pose.rotation.ravel()]).reshape(1, 1, 6)
    return serialize_feature(vals, sender, "pose", "float64")


def deserialize_pose(buf: bytes) -> Pose:
    head = parse_header(buf)
    if head["kind"] != "pose" or head["shape"] != (1, 1, 6):
        raise WireError("not a pose message")
    v = deserialize_feature(buf).ravel()
    return Pose(v[:2], v[2:].reshape(2, 2))


def make_message(payload: bytes) -> Message:
    head = parse_header(payload)
    return Message(head["sender"], head["kind"], payload, len(payload))


@dataclass
class BandwidthLedger:
    """Per-step and cumulative byte totals split by payload kind and sender."""

    steps: list = field(default_factory=list)  # one dict per step: (kind, sender) -> bytes
    message_counts: list = field(default_factory=list)  # one dict per step: kind -> sends

    def new_step(self):
        self.steps.append(defaultdict(int))
        self.message_counts.append(defaultdict(int))

    def record(self, msg: Message):
        if not self.steps:
            self.new_step()
        self.steps[-1][(msg.payload_kind, msg.sender)] += msg.byte_count
        self.message_counts[-1][msg.payload_kind] += 1

    def step_bytes(self, step: int = -1, kind: str | None = None) -> int:
        return sum(b for (k, _), b in self.steps[step].items() if kind is None or k == kind)

    def step_messages(self, step: int = -1, kind: str | None = None) -> int:
        counts = self.message_counts[step]
        return sum(v for k, v in counts.items() if kind is None or k == kind)

    def cumulative(self, kind: str | None = None, sender: int | None = None) -> int:
        return sum(b for step in self.steps for (k, s), b in step.items()
                   if (kind is None or k == kind) and (sender is None or s == sender))

    def cumulative_series(self, kind: str | None = None) -> list:
        out, acc = [], 0
        for i in range(len(self.steps)):
            acc += self.step_bytes(i, kind)
            out.append(acc)
        return out

    def feature_bytes(self, headers: bool = True) -> int:
        """Cumulative feature traffic; ``headers=False`` counts array payload only."""
        total = self.cumulative("feature") + self.cumulative("compressed_feature")
        if not headers:
            sends = sum(c["feature"] + c["compressed_feature"] for c in self.message_counts)
            total -= HEADER_SIZE * sends
        return total

    def merge(self, other: "BandwidthLedger"):
        for step, counts in zip(other.steps, other.message_counts):
            self.steps.append(defaultdict(int, step))
            self.message_counts.append(defaultdict(int, counts))


def broadcast(msg: Message, recipients, ledger: BandwidthLedger) -> dict:
    """Deliver identical payload copies; charge the ledger once for the send."""
    ledger.record(msg)
    return {r: msg.payload for r in recipients}
