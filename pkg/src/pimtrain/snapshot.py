"""Tensor container and the flat little-endian snapshot format.

One tensor record::

    magic  b"PTNS"
    u8     ndim
    u8     len(layout) ; ascii layout tag
    u8     len(mode)   ; ascii numeric mode
    u32    dims[ndim]
    payload            f64 (float), i16 (fixed16) or i32 (fixed32*)

A snapshot file is ``b"PSNP" u32 count`` followed by ``u16 len(name) name``
and one tensor record per entry.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_DTYPES = {"float": "<f8", "fixed16": "<i2", "fixed32": "<i4", "fixed32sr": "<i4"}
LAYOUTS = ("NCHW", "NHWC", "NC", "OI", "OIHW")


@dataclass
class Tensor:
    payload: np.ndarray
    layout: str = "NCHW"
    mode: str = "float"

    def __post_init__(self):
        if self.payload.ndim > 4:
            raise ValueError("at most 4 extents")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout}")
        if self.mode not in _DTYPES:
            raise ValueError(f"unknown mode {self.mode}")

    @property
    def dims(self) -> tuple:
        return self.payload.shape

    def to_layout(self, layout: str) -> "Tensor":
        if layout == self.layout:
            return self
        perms = {("NCHW", "NHWC"): (0, 2, 3, 1), ("NHWC", "NCHW"): (0, 3, 1, 2)}
        if (self.layout, layout) not in perms:
            raise ValueError(f"no conversion {self.layout} -> {layout}")
        return Tensor(np.ascontiguousarray(self.payload.transpose(perms[(self.layout, layout)])), layout, self.mode)


def tensor_bytes(t: Tensor) -> bytes:
    head = b"PTNS" + struct.pack("<B", t.payload.ndim)
    for s in (t.layout, t.mode):
        head += struct.pack("<B", len(s)) + s.encode("ascii")
    head += struct.pack(f"<{t.payload.ndim}I", *t.payload.shape)
    return head + np.ascontiguousarray(t.payload, dtype=_DTYPES[t.mode]).tobytes()


def tensor_from_bytes(buf: bytes, off: int = 0):
    if buf[off:off + 4] != b"PTNS":
        raise ValueError("bad tensor magic")
    off += 4
    ndim = buf[off]
    off += 1
    strs = []
    for _ in range(2):
        n = buf[off]
        strs.append(buf[off + 1:off + 1 + n].decode("ascii"))
        off += 1 + n
    layout, mode = strs
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dt = np.dtype(_DTYPES[mode])
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).copy()
    off += count * dt.itemsize
    return Tensor(arr if mode != "float" else arr.astype(np.float64), layout, mode), off


def save_snapshot(path, tensors: dict) -> None:
    out = b"PSNP" + struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc + tensor_bytes(tensors[name])
    with open(path, "wb") as f:
        f.write(out)


def load_snapshot(path) -> dict:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != b"PSNP":
        raise ValueError("bad snapshot magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + n].decode("utf-8")
        out[name], off = tensor_from_bytes(buf, off + 2 + n)
    return out


def params_to_tensors(params: dict) -> dict:
    out = {}
    for i, p in params.items():
        if isinstance(p, dict):
            for m, a in p.items():
                out[f"layer{i}.{m}"] = Tensor(np.asarray(a, dtype=np.float64), "OI")
        else:
            out[f"layer{i}.w"] = Tensor(np.asarray(p, dtype=np.float64), "OIHW" if p.ndim == 4 else "OI")
    return out
