"""Synthetic weight tensors and fine-tune style perturbations.

Used by the benchmarks, the predictor-fitting corpus and the test-suite.
Every generator takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np

from .tensor_format import DType, TensorView

FLIP_FRACTIONS = (0.0, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.25, 0.5)


def to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 (nearest-even) and return the raw uint16 bits."""
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    rounding = np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))
    return ((u + rounding) >> np.uint32(16)).astype(np.uint16)


def from_bf16_bits(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def base_weights(n: int, rng: np.random.Generator, dtype: DType = DType.BF16, scale: float = 0.02) -> np.ndarray:
    """Gaussian weights as raw unsigned words of ``dtype``."""
    values = rng.standard_normal(n, dtype=np.float32) * np.float32(scale)
    if dtype == DType.BF16:
        return to_bf16_bits(values)
    if dtype in (DType.F32, DType.F16, DType.F64):
        return values.astype(dtype.numpy_dtype).view(dtype.uint_dtype)
    return rng.integers(0, 1 << min(dtype.bits, 63), n, dtype=np.uint64).astype(dtype.uint_dtype)


def flip_bits(words: np.ndarray, fraction: float, rng: np.random.Generator, *, keep_sign: bool = True) -> np.ndarray:
    """Flip ``round(fraction * n * p)`` distinct bits chosen uniformly.

    With ``keep_sign`` the top (sign) bit of each element is left alone, so
    flips land in exponent and mantissa bits only.
    """
    bits = words.dtype.itemsize * 8
    positions = bits - 1 if keep_sign else bits
    total = words.size * positions
    count = int(round(fraction * words.size * bits))
    count = min(count, total)
    out = words.copy()
    if count == 0:
        return out
    chosen = rng.choice(total, size=count, replace=False) if count < total // 4 else np.flatnonzero(
        rng.permutation(total) < count
    )
    elem = chosen // positions
    bit = (chosen % positions).astype(out.dtype)
    np.bitwise_xor.at(out, elem, (np.ones(1, dtype=out.dtype) << bit))
    return out


def finetune(words: np.ndarray, dtype: DType, rng: np.random.Generator, rel_noise: float) -> np.ndarray:
    """Add Gaussian noise proportional to each weight and round back to ``dtype``.

    Mimics a fine-tune: most elements move by zero or a few ulps.
    """
    if dtype not in (DType.BF16, DType.F32, DType.F16, DType.F64):
        step = rng.integers(-2, 3, size=words.size)
        mask = rng.random(words.size) < rel_noise
        return (words.astype(np.int64) + step * mask).astype(words.dtype)
    # NaN, Inf and out-of-range F64 inputs are legitimate here
    with np.errstate(over="ignore", invalid="ignore"):
        if dtype == DType.BF16:
            values = from_bf16_bits(words)
        else:
            values = words.view(dtype.numpy_dtype).astype(np.float32)
        noisy = values + rng.standard_normal(values.size, dtype=np.float32) * np.float32(rel_noise) * np.abs(values)
    if dtype == DType.BF16:
        return to_bf16_bits(noisy)
    return noisy.astype(dtype.numpy_dtype).view(dtype.uint_dtype)


def ulp_perturb(words: np.ndarray, fraction: float, rng: np.random.Generator, max_step: int = 3) -> np.ndarray:
    """Move a random ``fraction`` of elements by a small nonzero integer step.

    On float bit patterns this is an ulp-scale change of magnitude.
    """
    out = words.copy()
    count = int(round(fraction * words.size))
    if count == 0:
        return out
    idx = rng.choice(words.size, size=count, replace=False)
    step = rng.integers(1, max_step + 1, size=count) * rng.choice([-1, 1], size=count)
    out[idx] = (out[idx].astype(np.int64) + step).astype(out.dtype)
    return out


def view(name: str, words: np.ndarray, dtype: DType, shape: tuple[int, ...] | None = None) -> TensorView:
    return TensorView(name, dtype, shape if shape is not None else (words.size,), memoryview(words.tobytes()))


def bit_fraction(a: np.ndarray, b: np.ndarray) -> float:
    """Exact fraction of differing bits between two word arrays."""
    x = np.bitwise_xor(a.view(np.uint8), b.view(np.uint8))
    return float(np.unpackbits(x).sum()) / (x.size * 8) if x.size else 0.0


def training_corpus(count: int, rng: np.random.Generator, codec_id="TENSORX", *, family_size: int = 10,
                    sizes=(1 << 15, 1 << 16, 1 << 17), dtypes=(DType.BF16, DType.F16, DType.F32), params=None):
    """Measured (p_hat, ratio) pairs from simulated fine-tune families.

    Each family draws a base tensor and derives variants by proportional
    Gaussian noise at log-uniform scales in [1e-4, 1]; a few variants are
    exact copies or 50% random bit flips so both ends of the range are
    represented. Ratios are measured by actually running ``codec_id``.
    """
    from . import codec as _codec
    from .fingerprint import SketchParams, normalized_distance, sketch
    from .predictor import TrainingPair

    params = params or SketchParams()
    cid = _codec.CodecId[codec_id] if isinstance(codec_id, str) else _codec.CodecId(codec_id)
    pairs = []
    while len(pairs) < count:
        dtype = dtypes[int(rng.integers(len(dtypes)))]
        n = int(sizes[int(rng.integers(len(sizes)))])
        base = base_weights(n, rng, dtype)
        base_bytes = base.tobytes()
        base_sketch = sketch(view("base", base, dtype), params)
        for _ in range(min(family_size, count - len(pairs))):
            u = rng.random()
            if u < 0.05:
                variant = base.copy()
            elif u < 0.10:
                variant = flip_bits(base, 0.5, rng, keep_sign=False)
            else:
                variant = finetune(base, dtype, rng, float(10 ** rng.uniform(-4, 0)))
            p_hat = normalized_distance(base_sketch, sketch(view("v", variant, dtype), params))
            blob = _codec.encode(cid, variant.tobytes(), base_bytes, dtype)
            pairs.append(TrainingPair(p_hat, _codec.reduction_ratio(variant.nbytes, len(blob)), variant.nbytes))
    return pairs
