"""Checkpoint files and on-disk datasets.

Checkpoint layout (little-endian)::

    b"CCFN"  u32 version=1
    u64 n    n bytes of UTF-8 JSON (config snapshot, epoch, extras)
    u32 count
    count × { u16 len, name, u8 rank, rank × u32 dims, float32 data }

Datasets are one 16-bit binary PGM (big-endian samples, maxval 65535) plus
one JSON sidecar per sample, named ``{sample_id:06}.pgm`` / ``.json``.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import NUM_OBJECTS, OBJECT_IDS, AnnotationError, SpineAnnotation
from .synth import Sample

MAGIC = b"CCFN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptFileError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


class FormatError(DataError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict  # name -> float32 array
    epoch: int = 0
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps(
        {"config": ckpt.config, "epoch": ckpt.epoch, "extra": ckpt.extra}, sort_keys=True
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4) if len(r.buf) >= 4 else r.buf
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version} not supported (supported: {VERSION})")
    (n,) = r.unpack("<Q")
    meta = json.loads(r.take(n).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise CorruptFileError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(meta["config"], tensors, meta.get("epoch", 0), meta.get("extra", {}), version)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos, tokens = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(buf, pos)
        if not m:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 65535:
        raise FormatError(f"{path}: PGM maxval {maxval}, expected 65535")
    pos += 1  # single whitespace after maxval
    data = buf[pos : pos + 2 * w * h]
    if len(data) != 2 * w * h:
        raise FormatError(f"{path}: pixel data truncated")
    return (np.frombuffer(data, dtype=">u2").reshape(h, w) / 65535.0).astype(np.float32)


def write_sample(directory, sample: Sample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"{sample.sample_id:06}"
    write_pgm(d / f"{stem}.pgm", sample.image)
    ann = sample.annotation
    side = {
        "sample_id": sample.sample_id,
        "spacing_mm": ann.spacing_mm,
        "objects": [{"id": o.id, "x": o.x, "y": o.y, "diseased": o.diseased} for o in ann.objects],
    }
    (d / f"{stem}.json").write_text(json.dumps(side, indent=1))


def read_sample(directory, sample_id: int) -> Sample:
    d = Path(directory)
    stem = f"{sample_id:06}"
    side_path = d / f"{stem}.json"
    if not side_path.exists():
        raise DataError(f"missing sidecar {side_path}")
    try:
        side = json.loads(side_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{side_path}: invalid JSON ({exc})") from exc
    objs = side.get("objects")
    if not isinstance(objs, list) or len(objs) != NUM_OBJECTS:
        n = len(objs) if isinstance(objs, list) else "no"
        raise SchemaError(f"{side_path}: expected {NUM_OBJECTS} objects, found {n}")
    try:
        xy = [[float(o["x"]), float(o["y"])] for o in objs]
        ids = tuple(o["id"] for o in objs)
        labels = [bool(o["diseased"]) for o in objs]
        spacing = float(side["spacing_mm"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{side_path}: bad field ({exc})") from exc
    if ids != OBJECT_IDS:
        raise SchemaError(f"{side_path}: object ids {ids} not in canonical order")
    try:
        ann = SpineAnnotation.from_arrays(xy, labels, spacing)
    except AnnotationError as exc:
        raise SchemaError(f"{side_path}: {exc}") from exc
    image = read_pgm(d / f"{stem}.pgm")
    return Sample(image[None], ann, int(side.get("sample_id", sample_id)))


def list_samples(directory) -> list[int]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    ids = sorted(int(p.stem) for p in d.glob("*.pgm") if p.stem.isdigit())
    if not ids:
        raise DataError(f"no samples in {d}")
    return ids


def read_dataset(directory, ids: Optional[list] = None) -> list[Sample]:
    return [read_sample(directory, i) for i in (ids if ids is not None else list_samples(directory))]
