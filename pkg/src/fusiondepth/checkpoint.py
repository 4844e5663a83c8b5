"""Binary checkpoint format.

Layout (little-endian)::

    b"DFCK" | u32 version | u32 tensor count | u8 value width (4 or 8)
    per tensor: u16 name length | name (UTF-8) | u8 ndim | ndim x u32 dims | values

Names are namespaced: ``param/``, ``buffer/``, ``adam.m/``, ``adam.v/`` and
``meta/`` (step counter, UTF-8 bytes of the config text).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"DFCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    def __init__(self, offset: int, needed: int, total: int):
        super().__init__(f"checkpoint truncated at byte offset {offset}: need {needed} more bytes, file has {total}")
        self.offset = offset


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, group in (("param/", self.params), ("buffer/", self.buffers),
                              ("adam.m/", self.adam_m), ("adam.v/", self.adam_v)):
            out.update({prefix + k: v for k, v in group.items()})
        out["meta/step"] = np.array([self.step])
        out["meta/config"] = np.frombuffer(self.config.to_text().encode("utf-8"), dtype=np.uint8)
        return out


def _width(ckpt: Checkpoint) -> int:
    dtypes = {v.dtype for v in ckpt.params.values()}
    return 4 if dtypes == {np.dtype(np.float32)} else 8


def to_bytes(ckpt: Checkpoint) -> bytes:
    width = _width(ckpt)
    dtype = np.dtype("<f4" if width == 4 else "<f8")
    tensors = ckpt.tensors()
    parts = [MAGIC, struct.pack("<IIB", ckpt.version, len(tensors), width)]
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        values = arr.astype(dtype)
        if not np.array_equal(values, arr):
            raise CheckpointError(f"{name} cannot be stored losslessly at {width}-byte width")
        parts.append(values.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(self.pos, self.pos + n - len(self.buf), len(self.buf))
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count, width = r.unpack("<IIB")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    if width not in (4, 8):
        raise CheckpointError(f"invalid value width {width}")
    dtype = np.dtype("<f4" if width == 4 else "<f8")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(n * width)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor")

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    try:
        config_text = tensors["meta/config"].astype(np.uint8).tobytes().decode("utf-8")
        step = int(tensors["meta/step"][0])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc.args[0]}") from None
    return Checkpoint(
        config=TrainConfig.from_text(config_text),
        params=group("param/"),
        buffers=group("buffer/"),
        adam_m=group("adam.m/"),
        adam_v=group("adam.v/"),
        step=step,
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return from_bytes(buf)
