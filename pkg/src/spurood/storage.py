"""Flat little-endian binary containers.

``MLP1``, ``CAL1`` and ``SCR1`` files share one layout: a 4-byte magic, a
uint32 section count, then sections of named arrays::

    section := name:str  n_arrays:u32  array*
    array   := name:str  ndim:u32  shape:u32[ndim]  float64[prod(shape)]
    str     := len:u16  utf-8 bytes

Model checkpoints put one array per layer parameter in a single section;
calibrations use one section per scorer; score dumps use a single section.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedError

MODEL_MAGIC = b"MLP1"
CALIBRATION_MAGIC = b"CAL1"
SCORES_MAGIC = b"SCR1"

Sections = dict[str, dict[str, np.ndarray]]


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode(magic: bytes, sections: Sections) -> bytes:
    out = [magic, struct.pack("<I", len(sections))]
    for sec_name, arrays in sections.items():
        out.append(_pack_str(sec_name))
        out.append(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(_pack_str(name))
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        return self.take(n).decode("utf-8")


def decode(magic: bytes, buf: bytes) -> Sections:
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4)
    sections: Sections = {}
    for _ in range(r.u32()):
        sec_name = r.string()
        arrays = {}
        for _ in range(r.u32()):
            name = r.string()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        sections[sec_name] = arrays
    return sections


def save(path, magic: bytes, sections: Sections) -> None:
    Path(path).write_bytes(encode(magic, sections))


def load(path, magic: bytes) -> Sections:
    return decode(magic, Path(path).read_bytes())


def save_scores(path, id_scores, ood_scores) -> None:
    save(path, SCORES_MAGIC, {"scores": {"id": np.asarray(id_scores), "ood": np.asarray(ood_scores)}})


def load_scores(path) -> tuple[np.ndarray, np.ndarray]:
    sec = load(path, SCORES_MAGIC)["scores"]
    return sec["id"], sec["ood"]
