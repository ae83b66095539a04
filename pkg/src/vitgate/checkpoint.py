"""Single-file named-tensor container.

Layout (all integers little-endian)::

    bytes 0..8    magic b"VITCKPT1"
    bytes 8..16   header_len, unsigned 64-bit
    next header_len bytes
                  UTF-8 JSON object: tensor name -> {"dtype": "f32",
                  "shape": [...], "data_offsets": [begin, end]}, plus the
                  optional reserved key "__config__" holding the ViTConfig
    remainder     payload; offsets are relative to its first byte

Offsets must tile the payload exactly: ascending, non-overlapping, no gaps
and no trailing bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VITCKPT1"
CONFIG_KEY = "__config__"
_PREFIX = len(MAGIC) + 8


class CheckpointError(ValueError):
    """Base class for checkpoint parse/validation failures."""


class BadMagicError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class UnsupportedDtypeError(CheckpointError):
    pass


class OverlapError(CheckpointError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    depth: int = 6
    mlp_hidden: int = 256
    num_classes: int = 10

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"embed_dim {self.embed_dim} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.depth < 3:
            raise ConfigError("depth must be >= 3 (block 0, a highway block, a last block)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def last_block(self) -> int:
        return self.depth - 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    """Named float32 tensors plus an optional model config."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: ViTConfig | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()}, self.config)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def _encode(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    if ckpt.config is not None:
        header[CONFIG_KEY] = ckpt.config.to_dict()
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        if name == CONFIG_KEY:
            raise CheckpointError(f"tensor name {CONFIG_KEY!r} is reserved")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise UnsupportedDtypeError(f"{name}: only float32 tensors can be saved, got {arr.dtype}")
        if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
            raise CheckpointError(f"{name}: shape dims must be strictly positive, got {arr.shape}")
        data = arr.astype("<f4", copy=False).tobytes(order="C")
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    if offset >= 2**64:
        raise CheckpointError("payload offset overflow")
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    blob = _encode(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _strict_pairs(pairs):
    seen = set()
    for k, _ in pairs:
        if k in seen:
            raise MalformedHeaderError(f"duplicate header key {k!r}")
        seen.add(k)
    return dict(pairs)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX:
        raise BadMagicError("file shorter than magic + header length")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:len(MAGIC)]!r}")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : _PREFIX])
    if hlen == 0:
        raise MalformedHeaderError("header_len is 0")
    if _PREFIX + hlen > len(blob):
        raise MalformedHeaderError(f"header_len {hlen} runs past end of file")
    try:
        header = json.loads(blob[_PREFIX : _PREFIX + hlen].decode("utf-8"), object_pairs_hook=_strict_pairs)
    except MalformedHeaderError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")

    config = None
    if CONFIG_KEY in header:
        raw = header.pop(CONFIG_KEY)
        if not isinstance(raw, dict):
            raise MalformedHeaderError("__config__ must be an object")
        try:
            config = ViTConfig.from_dict(raw)
        except (ConfigError, TypeError) as exc:
            raise MalformedHeaderError(f"bad __config__: {exc}") from None

    payload = memoryview(blob)[_PREFIX + hlen :]
    entries = []
    for name, meta in header.items():
        if not isinstance(meta, dict) or set(meta) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(f"{name}: entry must have exactly dtype, shape, data_offsets")
        if meta["dtype"] != "f32":
            raise UnsupportedDtypeError(f"{name}: unsupported dtype {meta['dtype']!r}")
        shape, offs = meta["shape"], meta["data_offsets"]
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
        ):
            raise MalformedHeaderError(f"{name}: bad shape {shape!r}")
        if (
            not isinstance(offs, list)
            or len(offs) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offs)
            or offs[0] > offs[1]
        ):
            raise MalformedHeaderError(f"{name}: bad data_offsets {offs!r}")
        if int(np.prod(shape, dtype=object)) * 4 != offs[1] - offs[0]:
            raise MalformedHeaderError(f"{name}: shape {shape} does not match byte span {offs}")
        entries.append((offs[0], offs[1], name, shape))

    entries.sort()
    cursor = 0
    for begin, end, name, _ in entries:
        if begin < cursor:
            raise OverlapError(f"{name}: data_offsets [{begin},{end}) overlap the previous tensor")
        if begin > cursor:
            raise MalformedHeaderError(f"{name}: gap in payload before offset {begin}")
        if end > len(payload):
            raise TruncatedPayloadError(
                f"{name}: payload truncated (needs bytes up to {end}, have {len(payload)})"
            )
        cursor = end
    if cursor != len(payload):
        raise MalformedHeaderError(f"{len(payload) - cursor} trailing bytes after last tensor")

    # Rebuild in header order so the name order round-trips.
    spans = {name: (b, e, s) for b, e, name, s in entries}
    tensors = {}
    for name in header:
        b, e, shape = spans[name]
        arr = np.frombuffer(payload[b:e], dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32, copy=True)
    return Checkpoint(tensors, config)


def load(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes())


def tensors_equal_bitwise(a: Checkpoint, b: Checkpoint) -> bool:
    if a.config != b.config or list(a.tensors) != list(b.tensors):
        return False
    return all(
        a.tensors[k].shape == b.tensors[k].shape and a.tensors[k].tobytes() == b.tensors[k].tobytes()
        for k in a.tensors
    )
