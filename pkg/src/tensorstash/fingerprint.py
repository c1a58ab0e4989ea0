"""Content digests and bit-level count-sketch fingerprints of tensors.

A sketch hashes every set bit ``(i, k)`` of every element into ``d`` rows of
``w`` signed counters. Bits shared by two tensors land in the same bucket
with the same sign and cancel in the difference of their sketches, so the
squared norm of each row difference estimates how many bits differ.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import xxhash
from sklearn.base import BaseEstimator, TransformerMixin

from . import _kernels
from .tensor_format import DType, FormatError, TensorView

__all__ = [
    "DIGEST_SIZE",
    "SketchParams",
    "Sketch",
    "SketchError",
    "tensor_digest",
    "sketch",
    "hamming_estimate",
    "normalized_distance",
    "exact_hamming",
    "TensorSketcher",
]

DIGEST_SIZE = 16
SKETCH_MAGIC = b"THSK"
SKETCH_VERSION = 1
_SKETCH_HEADER = struct.Struct("<4sBBHQQB")

# element slices handed to each worker; large enough to amortize dispatch
_SLICE_ELEMENTS = 1 << 20


class SketchError(ValueError):
    """Incompatible or malformed sketches."""


def tensor_digest(data) -> bytes:
    """128-bit XXH3 digest of raw tensor bytes."""
    return xxhash.xxh3_128_digest(data)


def _row_keys(seed: int, depth: int) -> np.ndarray:
    keys = np.empty(depth, dtype=np.uint64)
    for r in range(depth):
        keys[r] = _splitmix(seed + (r + 1) * 0x9E3779B97F4A7C15)
    return keys


def _splitmix(x: int) -> int:
    mask = (1 << 64) - 1
    z = x & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SketchParams:
    depth: int = 2
    width: int = 1024
    seed: int = 0x5EED

    def __post_init__(self):
        if self.depth < 1:
            raise SketchError(f"sketch depth must be >= 1, got {self.depth}")
        if self.width < 2 or self.width & (self.width - 1):
            raise SketchError(f"sketch width must be a power of two >= 2, got {self.width}")
        if not 0 <= self.seed < 1 << 64:
            raise SketchError("sketch seed must fit in 64 bits")

    @property
    def log2_width(self) -> int:
        return self.width.bit_length() - 1

    def row_keys(self) -> np.ndarray:
        return _row_keys(self.seed, self.depth)


@dataclass(eq=False)
class Sketch:
    params: SketchParams
    counters: np.ndarray = field(repr=False)
    n: int = 0
    bits: int = 16

    def __post_init__(self):
        self.counters = np.asarray(self.counters, dtype=np.int64)
        if self.counters.shape != (self.params.depth, self.params.width):
            raise SketchError(f"counter matrix shape {self.counters.shape} does not match {self.params}")

    def __eq__(self, other):
        if not isinstance(other, Sketch):
            return NotImplemented
        return (
            self.params == other.params
            and self.n == other.n
            and self.bits == other.bits
            and np.array_equal(self.counters, other.counters)
        )

    @property
    def total_bits(self) -> int:
        return self.n * self.bits

    def to_bytes(self) -> bytes:
        head = _SKETCH_HEADER.pack(
            SKETCH_MAGIC,
            SKETCH_VERSION,
            self.params.depth,
            self.params.log2_width,
            self.params.seed,
            self.n,
            self.bits,
        )
        return head + self.counters.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data) -> "Sketch":
        data = bytes(data)
        if len(data) < _SKETCH_HEADER.size:
            raise SketchError("truncated sketch header")
        magic, version, depth, log2w, seed, n, bits = _SKETCH_HEADER.unpack_from(data)
        if magic != SKETCH_MAGIC or version != SKETCH_VERSION:
            raise SketchError("not a sketch (bad magic or version)")
        params = SketchParams(depth, 1 << log2w, seed)
        body = data[_SKETCH_HEADER.size :]
        if len(body) != depth * params.width * 4:
            raise SketchError(f"sketch body is {len(body)} bytes, expected {depth * params.width * 4}")
        counters = np.rint(np.frombuffer(body, dtype="<f4")).astype(np.int64).reshape(depth, params.width)
        return cls(params, counters, n, bits)

    def vector(self) -> np.ndarray:
        """Flattened rows as float32, the representation indexed for search."""
        return self.counters.reshape(-1).astype(np.float32)


def sketch(tensor: TensorView, params: SketchParams | None = None, *, workers: int = 1) -> Sketch:
    """Bit-level count-sketch of ``tensor``.

    With ``workers > 1`` the element range is split into slices whose counter
    matrices are summed; the result is identical for any worker count.
    """
    params = params or SketchParams()
    if not isinstance(tensor.dtype, DType):
        raise FormatError(f"unsupported dtype {tensor.dtype!r}")
    words = tensor.words()
    keys = params.row_keys()
    mask = np.uint64(params.width - 1)
    bits = tensor.dtype.bits
    n = words.shape[0]

    def run(start: int, stop: int) -> np.ndarray:
        out = np.zeros((params.depth, params.width), dtype=np.int64)
        _kernels.sketch_accumulate(words[start:stop], bits, start, keys, mask, out)
        return out

    if workers <= 1 or n <= _SLICE_ELEMENTS:
        counters = run(0, n)
    else:
        bounds = [(s, min(s + _SLICE_ELEMENTS, n)) for s in range(0, n, _SLICE_ELEMENTS)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda b: run(*b), bounds))
        counters = np.sum(parts, axis=0)
    return Sketch(params, counters, n, bits)


def _check_comparable(a: Sketch, b: Sketch) -> None:
    if a.params != b.params:
        raise SketchError(f"sketch parameters differ: {a.params} vs {b.params}")
    if a.n != b.n or a.bits != b.bits:
        raise SketchError(f"sketches cover different shapes: n={a.n}/{b.n}, p={a.bits}/{b.bits}")


def hamming_estimate(a: Sketch, b: Sketch) -> float:
    """Median over rows of the squared L2 norm of the counter difference.

    For an even depth the median is the mean of the two middle rows.
    """
    _check_comparable(a, b)
    diff = a.counters - b.counters
    per_row = np.einsum("ij,ij->i", diff, diff)
    return float(np.median(per_row))


def normalized_distance(a: Sketch, b: Sketch) -> float:
    """Estimated fraction of differing bits, clamped to [0, 1]."""
    h = hamming_estimate(a, b)
    total = a.total_bits
    if total == 0:
        return 0.0
    return min(max(h / total, 0.0), 1.0)


def exact_hamming(a, b) -> int:
    """Exact count of differing bits between two equal-length byte buffers."""
    x = np.frombuffer(a, dtype=np.uint8)
    y = np.frombuffer(b, dtype=np.uint8)
    if x.shape != y.shape:
        raise ValueError("buffers differ in length")
    return int(_kernels.popcount_xor(x, y))


class TensorSketcher(TransformerMixin, BaseEstimator):
    """Transformer mapping tensor views to flattened sketch vectors.

    Parameters
    ----------
    depth, width, seed : int
        Sketch shape and hash seed; sketches are comparable only when all
        three agree.
    workers : int
        Threads used per tensor.
    """

    def __init__(self, depth=2, width=1024, seed=0x5EED, workers=1):
        self.depth = depth
        self.width = width
        self.seed = seed
        self.workers = workers

    def fit(self, X=None, y=None):
        self.params_ = SketchParams(self.depth, self.width, self.seed)
        return self

    def sketch(self, tensor: TensorView) -> Sketch:
        if not hasattr(self, "params_"):
            self.fit()
        return sketch(tensor, self.params_, workers=self.workers)

    def transform(self, X):
        """Return an ``(len(X), depth * width)`` float32 array of sketch rows."""
        if not hasattr(self, "params_"):
            self.fit()
        out = np.empty((len(X), self.depth * self.width), dtype=np.float32)
        for i, t in enumerate(X):
            out[i] = self.sketch(t).vector()
        return out
