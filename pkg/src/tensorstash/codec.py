"""Lossless delta codecs over raw tensor bytes.

Every codec shares one container (``THDX``): the tensor is cut into chunks of
``chunk_elements`` elements, each chunk is transformed (XOR delta, wrapping
subtraction delta, or nothing), split into byte planes and each plane is
compressed on its own by a general-purpose backend. Chunks never depend on
each other, so they are encoded and decoded on a thread pool and the output
is identical for any worker count.
"""

from __future__ import annotations

import enum
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import zstandard

from .fingerprint import DIGEST_SIZE, tensor_digest
from .tensor_format import DType

__all__ = [
    "CodecId",
    "Backend",
    "DeltaBlob",
    "CodecError",
    "DEFAULT_CHUNK_ELEMENTS",
    "tensorx_encode",
    "tensorx_decode",
    "fmpp_encode",
    "fmpp_decode",
    "standalone_encode",
    "standalone_decode",
    "encode",
    "decode",
]

MAGIC = b"THDX"
VERSION = 1
DEFAULT_CHUNK_ELEMENTS = 4 * 1024 * 1024
ZSTD_LEVEL = 3
_HEADER = struct.Struct("<4sBBBBQI16sI")
_ZERO_DIGEST = bytes(DIGEST_SIZE)


class CodecError(ValueError):
    """Raised when a blob cannot be produced or decoded."""


class CodecId(enum.IntEnum):
    RAW = 0
    STANDALONE = 1
    TENSORX = 2
    FMPP = 3

    @property
    def is_delta(self) -> bool:
        return self in (CodecId.TENSORX, CodecId.FMPP)


class Backend(enum.IntEnum):
    NONE = 0
    ZSTD = 1
    ZLIB = 2


def _compress(backend: Backend, data: bytes) -> bytes:
    if backend == Backend.ZSTD:
        return zstandard.ZstdCompressor(level=ZSTD_LEVEL).compress(data)
    if backend == Backend.ZLIB:
        return zlib.compress(data, 6)
    if backend == Backend.NONE:
        return bytes(data)
    raise CodecError(f"unknown backend {backend}")


def _decompress(backend: Backend, data, expected: int) -> bytes:
    try:
        if backend == Backend.ZSTD:
            out = zstandard.ZstdDecompressor().decompress(data, max_output_size=expected)
        elif backend == Backend.ZLIB:
            out = zlib.decompress(data)
        elif backend == Backend.NONE:
            out = bytes(data)
        else:
            raise CodecError(f"unknown backend {backend}")
    except (zstandard.ZstdError, zlib.error) as exc:
        raise CodecError(f"backend decompression failed: {exc}") from None
    if len(out) != expected:
        raise CodecError(f"plane decompressed to {len(out)} bytes, expected {expected}")
    return out


@dataclass
class DeltaBlob:
    codec_id: CodecId
    dtype: DType
    element_count: int
    chunk_elements: int
    backend_id: Backend
    base_digest: bytes | None
    lengths: np.ndarray  # (chunk_count, planes) compressed plane lengths
    payload: bytes

    @property
    def planes(self) -> int:
        return self.dtype.itemsize

    @property
    def chunk_count(self) -> int:
        return int(self.lengths.shape[0])

    @property
    def raw_len(self) -> int:
        return self.element_count * self.dtype.itemsize

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC,
            VERSION,
            int(self.codec_id),
            self.dtype.code,
            int(self.backend_id),
            self.element_count,
            self.chunk_elements,
            self.base_digest or _ZERO_DIGEST,
            self.chunk_count,
        )
        return head + self.lengths.astype("<u4").tobytes() + self.payload

    def __len__(self) -> int:
        return _HEADER.size + 4 * self.lengths.size + len(self.payload)

    @classmethod
    def from_bytes(cls, data) -> "DeltaBlob":
        data = memoryview(data).cast("B")
        if len(data) < _HEADER.size:
            raise CodecError("truncated blob header")
        magic, version, codec, dcode, backend, n, chunk, base, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CodecError("not a delta blob (bad magic)")
        if version != VERSION:
            raise CodecError(f"unsupported blob version {version}")
        try:
            codec_id = CodecId(codec)
            backend_id = Backend(backend)
            dtype = DType.from_code(dcode)
        except ValueError as exc:
            raise CodecError(f"corrupt blob header: {exc}") from None
        if chunk == 0 and n > 0:
            raise CodecError("corrupt blob header: zero chunk size")
        expected_chunks = -(-n // chunk) if n else 0
        if count != expected_chunks:
            raise CodecError(f"corrupt chunk table: {count} chunks for {n} elements")
        table_end = _HEADER.size + 4 * count * dtype.itemsize
        if len(data) < table_end:
            raise CodecError("truncated chunk table")
        lengths = np.frombuffer(data[_HEADER.size : table_end], dtype="<u4").reshape(count, dtype.itemsize)
        payload = bytes(data[table_end:])
        if int(lengths.sum(dtype=np.int64)) != len(payload):
            raise CodecError(
                f"corrupt chunk table: lengths sum to {int(lengths.sum())}, payload is {len(payload)} bytes"
            )
        return cls(
            codec_id,
            dtype,
            n,
            chunk,
            backend_id,
            None if base == _ZERO_DIGEST else base,
            lengths.astype(np.int64),
            payload,
        )


# -- per-chunk transforms -----------------------------------------------------


def _planes(words: np.ndarray) -> list[bytes]:
    """Plane k holds byte k of every element (little-endian byte order)."""
    size = words.dtype.itemsize
    as_bytes = words.view(np.uint8).reshape(-1, size)
    return [np.ascontiguousarray(as_bytes[:, k]).tobytes() for k in range(size)]


def _unplanes(planes: list[bytes], dtype: np.dtype, count: int) -> np.ndarray:
    size = dtype.itemsize
    out = np.empty((count, size), dtype=np.uint8)
    for k, plane in enumerate(planes):
        out[:, k] = np.frombuffer(plane, dtype=np.uint8)
    return out.reshape(-1).view(dtype)


def _zigzag(delta: np.ndarray) -> np.ndarray:
    bits = delta.dtype.itemsize * 8
    signed = delta.view(np.dtype(f"<i{delta.dtype.itemsize}"))
    return ((signed << 1) ^ (signed >> (bits - 1))).view(delta.dtype)


def _unzigzag(code: np.ndarray) -> np.ndarray:
    one = code.dtype.type(1)
    return (code >> one) ^ (np.zeros_like(code) - (code & one))


def _forward(codec: CodecId, target: np.ndarray, base: np.ndarray | None) -> np.ndarray:
    if codec == CodecId.TENSORX:
        return np.bitwise_xor(target, base)
    if codec == CodecId.FMPP:
        return _zigzag(target - base)
    return target


def _inverse(codec: CodecId, residual: np.ndarray, base: np.ndarray | None) -> np.ndarray:
    if codec == CodecId.TENSORX:
        return np.bitwise_xor(residual, base)
    if codec == CodecId.FMPP:
        return _unzigzag(residual) + base
    return residual


def _as_words(data, dtype: DType, what: str) -> np.ndarray:
    buf = memoryview(data).cast("B")
    if len(buf) % dtype.itemsize:
        raise CodecError(f"{what} length {len(buf)} is not a multiple of {dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype.uint_dtype)


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def encode(
    codec: CodecId,
    target,
    base,
    dtype: DType,
    chunk_elements: int = DEFAULT_CHUNK_ELEMENTS,
    *,
    backend: Backend = Backend.ZSTD,
    workers: int = 1,
    base_digest: bytes | None = None,
) -> DeltaBlob:
    """Encode ``target`` (optionally against ``base``) into a :class:`DeltaBlob`."""
    codec = CodecId(codec)
    if codec == CodecId.RAW:
        raise CodecError("RAW tensors are stored without a delta container")
    if chunk_elements <= 0:
        raise CodecError("chunk_elements must be positive")
    t = _as_words(target, dtype, "target")
    if codec.is_delta:
        if base is None:
            raise CodecError(f"{codec.name} needs a base tensor")
        b = _as_words(base, dtype, "base")
        if b.shape != t.shape:
            raise CodecError(f"target and base lengths differ ({t.nbytes} vs {b.nbytes} bytes)")
        if base_digest is None:
            base_digest = tensor_digest(base)
    else:
        b = None
        base_digest = None

    n = t.shape[0]
    bounds = [(s, min(s + chunk_elements, n)) for s in range(0, n, chunk_elements)]

    def work(bound):
        lo, hi = bound
        residual = _forward(codec, t[lo:hi], None if b is None else b[lo:hi])
        return [_compress(backend, plane) for plane in _planes(residual)]

    parts = _map(work, bounds, workers)
    lengths = np.array([[len(p) for p in chunk] for chunk in parts], dtype=np.int64).reshape(
        len(parts), dtype.itemsize
    )
    payload = b"".join(p for chunk in parts for p in chunk)
    return DeltaBlob(codec, dtype, n, chunk_elements, backend, base_digest, lengths, payload)


def decode(blob: DeltaBlob | bytes, base=None, *, expect: CodecId | None = None, workers: int = 1) -> bytes:
    """Reconstruct the original bytes. Delta blobs need the exact base they were made against."""
    if not isinstance(blob, DeltaBlob):
        blob = DeltaBlob.from_bytes(blob)
    if expect is not None and blob.codec_id != expect:
        raise CodecError(f"blob is {blob.codec_id.name}, expected {CodecId(expect).name}")
    dtype = blob.dtype
    b = None
    if blob.codec_id.is_delta:
        if base is None:
            raise CodecError(f"{blob.codec_id.name} blob needs its base")
        if tensor_digest(base) != blob.base_digest:
            raise CodecError("base digest does not match the blob's base reference")
        b = _as_words(base, dtype, "base")
        if b.shape[0] != blob.element_count:
            raise CodecError("base length does not match blob element count")

    n = blob.element_count
    size = dtype.itemsize
    offsets = np.concatenate([[0], np.cumsum(blob.lengths.reshape(-1))])
    payload = memoryview(blob.payload)
    out = np.empty(n, dtype=dtype.uint_dtype)

    def work(ci):
        lo = ci * blob.chunk_elements
        hi = min(lo + blob.chunk_elements, n)
        planes = []
        for k in range(size):
            j = ci * size + k
            planes.append(_decompress(blob.backend_id, payload[offsets[j] : offsets[j + 1]], hi - lo))
        residual = _unplanes(planes, dtype.uint_dtype, hi - lo)
        out[lo:hi] = _inverse(blob.codec_id, residual, None if b is None else b[lo:hi])

    _map(work, list(range(blob.chunk_count)), workers)
    return out.tobytes()


def tensorx_encode(target, base, dtype: DType, chunk_elements: int = DEFAULT_CHUNK_ELEMENTS, **kw) -> DeltaBlob:
    """XOR delta, byte planes, backend compression per plane."""
    return encode(CodecId.TENSORX, target, base, dtype, chunk_elements, **kw)


def tensorx_decode(blob, base, **kw) -> bytes:
    return decode(blob, base, expect=CodecId.TENSORX, **kw)


def fmpp_encode(target, base, dtype: DType, chunk_elements: int = DEFAULT_CHUNK_ELEMENTS, **kw) -> DeltaBlob:
    """Wrapping integer subtraction, zigzag sign interleave, byte planes, backend compression."""
    return encode(CodecId.FMPP, target, base, dtype, chunk_elements, **kw)


def fmpp_decode(blob, base, **kw) -> bytes:
    return decode(blob, base, expect=CodecId.FMPP, **kw)


def standalone_encode(target, dtype: DType, chunk_elements: int = DEFAULT_CHUNK_ELEMENTS, **kw) -> DeltaBlob:
    return encode(CodecId.STANDALONE, target, None, dtype, chunk_elements, **kw)


def standalone_decode(blob, **kw) -> bytes:
    return decode(blob, None, expect=CodecId.STANDALONE, **kw)


def reduction_ratio(raw_len: int, stored_len: int) -> float:
    """1 - stored/raw, floored at 0 (a blob larger than raw saves nothing)."""
    if raw_len == 0:
        return 0.0
    return max(0.0, 1.0 - stored_len / raw_len)
