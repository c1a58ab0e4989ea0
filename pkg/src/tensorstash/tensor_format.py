"""Reading and writing safetensors files as collections of raw-byte tensors.

Tensors are exposed as :class:`TensorView` objects holding a read-only
``memoryview`` into the source buffer, so parsing a memory-mapped file does
not copy any payload bytes.
"""

from __future__ import annotations

import enum
import json
import mmap
import os
import struct
from dataclasses import dataclass, field
from math import prod
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DType",
    "TensorView",
    "ManifestEntry",
    "ModelManifest",
    "BlobFlags",
    "FormatError",
    "parse_model",
    "write_model",
    "load_model",
    "write_blob",
    "read_blob",
]

MAX_HEADER_BYTES = 100_000_000
METADATA_KEY = "__metadata__"
BLOB_TENSOR_NAME = "data"


class FormatError(ValueError):
    """Raised for malformed safetensors input."""


class DType(enum.Enum):
    # value: (header string, bits per element, on-disk code, numpy dtype)
    F64 = ("F64", 64, 0, "<f8")
    F32 = ("F32", 32, 1, "<f4")
    F16 = ("F16", 16, 2, "<f2")
    BF16 = ("BF16", 16, 3, "<u2")
    I64 = ("I64", 64, 4, "<i8")
    I32 = ("I32", 32, 5, "<i4")
    I16 = ("I16", 16, 6, "<i2")
    I8 = ("I8", 8, 7, "i1")
    U8 = ("U8", 8, 8, "u1")
    BOOL = ("BOOL", 8, 9, "u1")

    @property
    def bits(self) -> int:
        return self.value[1]

    @property
    def itemsize(self) -> int:
        return self.value[1] // 8

    @property
    def code(self) -> int:
        return self.value[2]

    @property
    def numpy_dtype(self) -> np.dtype:
        """Numpy dtype used to view the raw bytes (BF16 is viewed as ``<u2``)."""
        return np.dtype(self.value[3])

    @property
    def uint_dtype(self) -> np.dtype:
        """Unsigned little-endian integer of the same width."""
        return np.dtype(f"<u{self.itemsize}")

    @classmethod
    def from_str(cls, name: str) -> "DType":
        try:
            return cls[name]
        except KeyError:
            raise FormatError(f"unsupported dtype {name!r}") from None

    @classmethod
    def from_code(cls, code: int) -> "DType":
        for dt in cls:
            if dt.code == code:
                return dt
        raise FormatError(f"unknown dtype code {code}")


@dataclass(frozen=True)
class TensorView:
    """A named, typed tensor backed by contiguous raw little-endian bytes."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data: memoryview = field(repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.data, memoryview):
            object.__setattr__(self, "data", memoryview(self.data))
        data = self.data
        if data.ndim != 1 or data.itemsize != 1:
            data = data.cast("B")
        if not data.readonly:
            data = data.toreadonly()
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if any(s < 0 for s in self.shape):
            raise FormatError(f"{self.name}: negative dimension in shape {self.shape}")
        if len(self.data) != self.nbytes:
            raise FormatError(
                f"{self.name}: byte length {len(self.data)} does not match "
                f"{self.dtype.name}{list(self.shape)} ({self.nbytes} bytes)"
            )

    @property
    def n(self) -> int:
        return prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.n * self.dtype.itemsize

    def words(self) -> np.ndarray:
        """Zero-copy unsigned-integer view of the elements."""
        return np.frombuffer(self.data, dtype=self.dtype.uint_dtype)

    def numpy(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=self.dtype.numpy_dtype).reshape(self.shape)

    @classmethod
    def from_numpy(cls, name: str, array: np.ndarray, dtype: DType | None = None) -> "TensorView":
        array = np.ascontiguousarray(array)
        if dtype is None:
            dtype = _dtype_for_numpy(array.dtype)
        return cls(name, dtype, array.shape, memoryview(array.tobytes()))


def _dtype_for_numpy(dt: np.dtype) -> DType:
    if dt == np.bool_:
        return DType.BOOL
    for cand in (DType.F64, DType.F32, DType.F16, DType.I64, DType.I32, DType.I16, DType.I8, DType.U8):
        if cand.numpy_dtype == dt.newbyteorder("<") or cand.numpy_dtype == dt:
            return cand
    raise FormatError(f"no tensor dtype for numpy dtype {dt}")


@dataclass(frozen=True)
class ManifestEntry:
    tensor_name: str
    tensor_digest: bytes
    dtype: DType
    shape: tuple[int, ...]
    storage_ref: str
    codec_id: str
    base_digest: bytes | None = None


@dataclass
class ModelManifest:
    model_id: str
    entries: list[ManifestEntry] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.tensor_name in seen:
                raise FormatError(f"duplicate tensor name {e.tensor_name!r} in manifest")
            seen.add(e.tensor_name)
            if (e.base_digest is not None) != (e.codec_id in ("TENSORX", "FMPP")):
                raise FormatError(f"{e.tensor_name}: base digest must be set iff codec is a delta codec")


def _read_header(buf: memoryview) -> tuple[dict, int]:
    if len(buf) < 8:
        raise FormatError("file shorter than the 8-byte header length prefix")
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if hlen > MAX_HEADER_BYTES or hlen > len(buf) - 8:
        raise FormatError(f"header length {hlen} exceeds file size {len(buf)}")
    raw = bytes(buf[8 : 8 + hlen])
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header JSON is not an object")
    return header, 8 + hlen


def _entry(name: str, info) -> tuple[DType, tuple[int, ...], int, int]:
    if not isinstance(info, dict):
        raise FormatError(f"{name}: header entry is not an object")
    try:
        dtype_str, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
    except KeyError as exc:
        raise FormatError(f"{name}: header entry missing {exc.args[0]!r}") from None
    if not isinstance(dtype_str, str):
        raise FormatError(f"{name}: dtype is not a string")
    try:
        dtype = DType.from_str(dtype_str)
    except FormatError as exc:
        raise FormatError(f"{name}: {exc}") from None
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
        raise FormatError(f"{name}: invalid shape {shape!r}")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
    ):
        raise FormatError(f"{name}: invalid data_offsets {offsets!r}")
    begin, end = offsets
    return dtype, tuple(shape), begin, end


def parse_model(data, *, with_metadata: bool = False):
    """Split a safetensors buffer into tensor views, in header order.

    ``data`` may be ``bytes``, ``mmap`` or anything exposing the buffer
    protocol. With ``with_metadata=True`` the ``__metadata__`` map is
    returned alongside the views.
    """
    buf = memoryview(data).cast("B") if not isinstance(data, memoryview) else data.cast("B")
    header, start = _read_header(buf)
    payload_len = len(buf) - start
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict):
        raise FormatError("__metadata__ is not an object")

    views = []
    spans = []
    for name, info in header.items():
        dtype, shape, begin, end = _entry(name, info)
        if not 0 <= begin <= end <= payload_len:
            raise FormatError(f"{name}: data_offsets [{begin}, {end}] out of bounds (payload {payload_len} bytes)")
        expected = prod(shape) * dtype.itemsize
        if end - begin != expected:
            raise FormatError(f"{name}: payload length {end - begin} != {expected} for {dtype.name}{list(shape)}")
        spans.append((begin, end, name))
        views.append(TensorView(name, dtype, shape, buf[start + begin : start + end]))

    spans.sort()
    for (_, prev_end, prev_name), (begin, end, name) in zip(spans, spans[1:]):
        if begin < prev_end and end > begin:
            raise FormatError(f"{name}: data_offsets overlap tensor {prev_name!r}")

    if with_metadata:
        return views, metadata
    return views


def _header_bytes(header: dict) -> bytes:
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return raw + b" " * (-len(raw) % 8)


def write_model(tensors: Sequence[TensorView], metadata: Mapping[str, str] | None = None) -> bytes:
    """Serialize tensors into a safetensors byte string, preserving order."""
    header: dict = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    offset = 0
    for t in tensors:
        if t.name in header or t.name == METADATA_KEY:
            raise FormatError(f"duplicate tensor name {t.name!r}")
        if len(t.data) != t.nbytes:
            raise FormatError(f"{t.name}: length mismatch")
        header[t.name] = {"dtype": t.dtype.name, "shape": list(t.shape), "data_offsets": [offset, offset + t.nbytes]}
        offset += t.nbytes
    hbytes = _header_bytes(header) if header else b"{}      "
    out = bytearray(8 + len(hbytes) + offset)
    struct.pack_into("<Q", out, 0, len(hbytes))
    out[8 : 8 + len(hbytes)] = hbytes
    pos = 8 + len(hbytes)
    for t in tensors:
        out[pos : pos + t.nbytes] = t.data
        pos += t.nbytes
    return bytes(out)


def load_model(path: str | os.PathLike, *, with_metadata: bool = False):
    """Memory-map ``path`` and parse it without copying tensor payloads."""
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        if size == 0:
            raise FormatError(f"{path}: empty file")
        mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
    return parse_model(mm, with_metadata=with_metadata)


@dataclass(frozen=True)
class BlobFlags:
    """Compression metadata recorded in a blob's ``__metadata__`` map."""

    codec_id: str
    dtype: DType
    shape: tuple[int, ...]
    raw_len: int
    base_digest: bytes | None = None

    def to_metadata(self) -> dict[str, str]:
        md = {
            "th.codec": self.codec_id,
            "th.dtype": self.dtype.name,
            "th.shape": json.dumps(list(self.shape), separators=(",", ":")),
            "th.raw_len": str(self.raw_len),
        }
        if self.base_digest is not None:
            md["th.base"] = self.base_digest.hex()
        return md

    @classmethod
    def from_metadata(cls, md: Mapping[str, str]) -> "BlobFlags":
        if "th.codec" not in md:
            raise FormatError("blob metadata has no th.codec entry")
        try:
            base = md.get("th.base")
            return cls(
                codec_id=md["th.codec"],
                dtype=DType.from_str(md["th.dtype"]),
                shape=tuple(json.loads(md["th.shape"])),
                raw_len=int(md["th.raw_len"]),
                base_digest=bytes.fromhex(base) if base else None,
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed blob metadata: {exc}") from None


def write_blob(tensor: TensorView | None, flags: BlobFlags, payload=None) -> bytes:
    """Wrap a tensor (uncompressed) or a compressed payload in a safetensors container.

    For ``codec_id == "RAW"`` the tensor itself is stored with its own dtype
    and shape. Otherwise ``payload`` holds the compressed bytes and is stored
    as a flat ``U8`` tensor so stock readers can still locate it.
    """
    if not getattr(flags, "codec_id", None):
        raise FormatError("blob flags carry no codec_id")
    if flags.codec_id == "RAW":
        if tensor is None:
            raise FormatError("RAW blob needs the tensor")
        body = TensorView(BLOB_TENSOR_NAME, tensor.dtype, tensor.shape, tensor.data)
    else:
        if payload is None:
            raise FormatError(f"{flags.codec_id} blob needs a compressed payload")
        payload = memoryview(payload).cast("B")
        body = TensorView(BLOB_TENSOR_NAME, DType.U8, (len(payload),), payload)
    return write_model([body], metadata=flags.to_metadata())


def read_blob(data) -> tuple[BlobFlags, memoryview]:
    """Inverse of :func:`write_blob`: returns the flags and the stored payload."""
    views, md = parse_model(data, with_metadata=True)
    flags = BlobFlags.from_metadata(md)
    if len(views) != 1:
        raise FormatError(f"blob holds {len(views)} tensors, expected 1")
    return flags, views[0].data


def canonical_model(tensors: Iterable[TensorView], metadata: Mapping[str, str] | None = None) -> bytes:
    """Write tensors in sorted-name order, the form used when reconstructing models."""
    return write_model(sorted(tensors, key=lambda t: t.name), metadata=metadata)
