"""Small input-checking helpers shared by the estimators and the engine."""

from __future__ import annotations

import numpy as np

from .tensor_format import TensorView


def column_or_1d(X) -> np.ndarray:
    """Accept a 1-d array or a single-column 2-d array and return 1-d."""
    arr = np.asarray(X)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d array or a single column, got shape {arr.shape}")
    return arr


def check_unit_interval(x, name: str = "value") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and (np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def check_same_layout(a: TensorView, b: TensorView) -> None:
    if a.dtype != b.dtype or a.shape != b.shape:
        raise ValueError(
            f"tensors {a.name!r} and {b.name!r} differ in layout: "
            f"{a.dtype.name}{list(a.shape)} vs {b.dtype.name}{list(b.shape)}"
        )


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
