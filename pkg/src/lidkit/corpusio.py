"""Binary containers, manifests and audio readers shared by every stage.

Two binary formats are used, both little-endian with f64 payloads:

``MatrixFile``
    ``b"FVM1"``, version u32, rows u32, cols u32, row-major payload.

``ModelContainer``
    ``b"LRMD"``, version u32, metadata block (u32 byte length + UTF-8 text),
    then named tensors until end of file.  Each tensor is a u16 name length,
    the UTF-8 name, a u8 rank, one u32 per dimension and the payload.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

MATRIX_MAGIC = b"FVM1"
CONTAINER_MAGIC = b"LRMD"
FORMAT_VERSION = 1

PathLike = Union[str, Path]

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Raised when a binary file is corrupt or truncated.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype=_F64).tobytes()


def encode_matrix(values) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {values.shape}")
    rows, cols = values.shape
    if rows > 0xFFFFFFFF or cols > 0xFFFFFFFF:
        raise ValueError("matrix dimensions overflow u32")
    head = MATRIX_MAGIC + struct.pack("<III", FORMAT_VERSION, rows, cols)
    return head + _payload(values)


def decode_matrix(data: bytes) -> np.ndarray:
    if len(data) < 16:
        raise FormatError(f"header needs 16 bytes, got {len(data)}", len(data))
    if data[:4] != MATRIX_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MATRIX_MAGIC!r}", 0)
    version, rows, cols = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = 16 + 8 * rows * cols
    if len(data) != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(data)}",
            min(len(data), expected))
    return np.frombuffer(data, dtype=_F64, offset=16).reshape(rows, cols).astype(np.float64)


def write_matrix(path: PathLike, values) -> None:
    Path(path).write_bytes(encode_matrix(values))


def read_matrix(path: PathLike) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


@dataclass
class ModelContainer:
    """Metadata dictionary plus an ordered mapping of named f64 tensors."""

    metadata: dict = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def encode_container(container: ModelContainer) -> bytes:
    meta = json.dumps(container.metadata, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [CONTAINER_MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta]
    for name, tensor in container.tensors.items():
        tensor = np.asarray(tensor, dtype=np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if tensor.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        if any(d > 0xFFFFFFFF for d in tensor.shape):
            raise ValueError(f"tensor {name!r} dimension overflows u32")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(_payload(tensor))
    return b"".join(parts)


def _need(data: bytes, pos: int, n: int, what: str) -> None:
    if pos + n > len(data):
        raise FormatError(
            f"truncated {what}: expected {n} bytes, got {len(data) - pos}", pos)


def decode_container(data: bytes) -> ModelContainer:
    _need(data, 0, 12, "header")
    if data[:4] != CONTAINER_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {CONTAINER_MAGIC!r}", 0)
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 12
    _need(data, pos, meta_len, "metadata")
    try:
        metadata = json.loads(data[pos:pos + meta_len].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid UTF-8 JSON: {exc}", pos) from exc
    pos += meta_len
    tensors: Dict[str, np.ndarray] = {}
    while pos < len(data):
        _need(data, pos, 2, "tensor name length")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        _need(data, pos, name_len, "tensor name")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        _need(data, pos, 1, "tensor rank")
        rank = data[pos]
        pos += 1
        _need(data, pos, 4 * rank, "tensor dims")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        _need(data, pos, nbytes, f"payload of tensor {name!r}")
        tensors[name] = np.frombuffer(
            data, dtype=_F64, count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    return ModelContainer(metadata, tensors)


def write_container(path: PathLike, container: ModelContainer) -> None:
    Path(path).write_bytes(encode_container(container))


def read_container(path: PathLike) -> ModelContainer:
    return decode_container(Path(path).read_bytes())


def file_checksum(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- manifests --------------------------------------------------------------

MANIFEST_COLUMNS = ("utt_id", "path", "language", "duration_s", "vtln_warp")


@dataclass
class ManifestRow:
    utt_id: str
    path: str
    language: str
    duration_s: float
    vtln_warp: Optional[float] = None


def write_manifest(path: PathLike, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            warp = "" if r.vtln_warp is None else repr(float(r.vtln_warp))
            writer.writerow([r.utt_id, r.path, r.language, repr(float(r.duration_s)), warp])


def read_manifest(path: PathLike) -> List[ManifestRow]:
    """Read a manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    rows: List[ManifestRow] = []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header[:4]) != MANIFEST_COLUMNS[:4]:
            raise ValueError(f"{path}: bad manifest header {header!r}")
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) < 4:
                raise ValueError(f"{path}:{lineno}: expected at least 4 columns")
            utt_id = fields[0]
            if utt_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
            seen.add(utt_id)
            audio = Path(fields[1])
            if not audio.is_absolute():
                audio = path.parent / audio
            warp = fields[4] if len(fields) > 4 and fields[4] != "" else None
            rows.append(ManifestRow(utt_id, str(audio), fields[2], float(fields[3]),
                                    None if warp is None else float(warp)))
    return rows


# --- audio and labels -------------------------------------------------------

def write_wav(path: PathLike, samples, sample_rate: int) -> None:
    """Write mono PCM16; ``samples`` are floats in [-1, 1]."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path: PathLike):
    """Return ``(samples, sample_rate)`` for a mono PCM16 WAV file."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError(f"{path}: only mono PCM16 WAV is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def mulaw_decode(data: bytes) -> np.ndarray:
    """G.711 mu-law bytes to floats in [-1, 1]."""
    u = ~np.frombuffer(data, dtype=np.uint8)
    sign = u & 0x80
    exponent = (u >> 4) & 0x07
    mantissa = u & 0x0F
    magnitude = ((mantissa.astype(np.int32) << 3) + 0x84) << exponent
    value = np.where(sign != 0, 0x84 - magnitude, magnitude - 0x84)
    return value.astype(np.float64) / 32768.0


def mulaw_encode(samples) -> bytes:
    """Floats in [-1, 1] to G.711 mu-law bytes (reference 14-bit algorithm)."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767)
    v = pcm.astype(np.int32) >> 2
    mask = np.where(v < 0, 0x7F, 0xFF)
    v = np.minimum(np.abs(v), 8159) + 0x21
    seg = np.searchsorted(_MULAW_SEG_END, v)
    code = np.where(seg >= 8, 0x7F, (seg << 4) | ((v >> (seg + 1)) & 0x0F))
    return ((code ^ mask) & 0xFF).astype(np.uint8).tobytes()


_MULAW_SEG_END = np.array([0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF, 0x1FFF])


def read_audio(path: PathLike, sample_rate: int = 8000):
    """Read WAV, or raw 8-bit mu-law when the suffix is ``.ulaw``/``.mulaw``."""
    path = Path(path)
    if path.suffix.lower() in (".ulaw", ".mulaw", ".mu"):
        return mulaw_decode(path.read_bytes()), sample_rate
    return read_wav(path)


def write_labels(path: PathLike, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="utf-8")


def read_labels(path: PathLike) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    return np.array([int(v) for v in text], dtype=np.int64)


def write_ids(path: PathLike, ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_ids(path: PathLike) -> List[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
