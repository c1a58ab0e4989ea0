"""Predict delta reduction ratio from estimated bit divergence.

The model is linear in three features of the normalized Hamming distance
``p``: ``p`` itself, ``tau = 8 * S(p)`` where ``S`` is the binary entropy,
and the product ``p * tau``. Predictions are clipped to ``[0, 1]``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_unit_interval, column_or_1d

__all__ = [
    "PredictorCoefficients",
    "TrainingPair",
    "RankDeficientError",
    "entropy_feature",
    "predict_ratio",
    "design_matrix",
    "fit",
    "RatioPredictor",
    "DEFAULT_COEFFICIENTS",
    "read_pairs_csv",
    "write_pairs_csv",
    "error_report",
]

RECORD_VERSION = 1


class RankDeficientError(ValueError):
    """The training pairs do not determine all four coefficients."""


@dataclass(frozen=True)
class PredictorCoefficients:
    alpha: float
    beta: float
    gamma: float
    epsilon: float
    codec_id: str = "TENSORX"
    corpus_digest: str = ""

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "epsilon"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"coefficient {name} is not finite")

    def to_record(self) -> str:
        return (
            f"v{RECORD_VERSION} codec={self.codec_id} alpha={self.alpha!r} beta={self.beta!r} "
            f"gamma={self.gamma!r} epsilon={self.epsilon!r} corpus={self.corpus_digest}"
        )

    @classmethod
    def from_record(cls, text: str) -> "PredictorCoefficients":
        head, *fields = text.split()
        if head != f"v{RECORD_VERSION}":
            raise ValueError(f"unsupported coefficient record version {head!r}")
        kv = dict(f.split("=", 1) for f in fields)
        return cls(
            alpha=float(kv["alpha"]),
            beta=float(kv["beta"]),
            gamma=float(kv["gamma"]),
            epsilon=float(kv["epsilon"]),
            codec_id=kv.get("codec", "TENSORX"),
            corpus_digest=kv.get("corpus", ""),
        )


@dataclass(frozen=True)
class TrainingPair:
    p_hat: float
    measured_ratio: float
    nbytes: int = 0


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -(q * np.log(q) + (1 - q) * np.log1p(-q)) / math.log(2)
    return out


def entropy_feature(p_hat):
    """``8 * S(p_hat)``: bits of uncertainty per byte. Scalar in, scalar out."""
    arr = check_unit_interval(p_hat, "p_hat")
    tau = 8.0 * _binary_entropy(arr)
    return float(tau) if np.ndim(p_hat) == 0 else tau


def design_matrix(p_hat) -> np.ndarray:
    p = np.clip(column_or_1d(p_hat).astype(np.float64), 0.0, 1.0)
    tau = 8.0 * _binary_entropy(p)
    return np.column_stack([p, tau, p * tau, np.ones_like(p)])


def predict_ratio(p_hat, coeffs: PredictorCoefficients):
    arr = check_unit_interval(p_hat, "p_hat")
    X = design_matrix(np.atleast_1d(arr))
    w = np.array([coeffs.alpha, coeffs.beta, coeffs.gamma, coeffs.epsilon])
    r = np.clip(X @ w, 0.0, 1.0)
    return float(r[0]) if np.ndim(p_hat) == 0 else r


def _canonical(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((y, p))
    return p[order], y[order]


def _corpus_digest(p: np.ndarray, y: np.ndarray) -> str:
    p, y = _canonical(np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64))
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _solve(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # rows in a canonical order so the floating-point sums do not depend on input order
    p, y = _canonical(p, y)
    X = design_matrix(p)
    if X.shape[0] < 4:
        raise RankDeficientError(f"need at least 4 training pairs, got {X.shape[0]}")
    gram = X.T @ X
    rank = np.linalg.matrix_rank(X)
    if rank < 4:
        raise RankDeficientError(f"design matrix has rank {rank} < 4 (too few distinct p_hat values)")
    return np.linalg.solve(gram, X.T @ y)


def fit(pairs: Sequence[TrainingPair], codec_id: str = "TENSORX") -> PredictorCoefficients:
    """Ordinary least squares of measured ratio on ``[p, tau, p*tau, 1]``."""
    p = np.array([pr.p_hat for pr in pairs], dtype=np.float64)
    y = np.array([pr.measured_ratio for pr in pairs], dtype=np.float64)
    a, b, g, e = _solve(p, y)
    return PredictorCoefficients(float(a), float(b), float(g), float(e), codec_id, _corpus_digest(p, y))


class RatioPredictor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit` / :func:`predict_ratio`.

    ``X`` is a 1-d array (or single column) of normalized Hamming
    distances, ``y`` the measured reduction ratios.
    """

    def __init__(self, codec_id="TENSORX"):
        self.codec_id = codec_id

    def fit(self, X, y):
        p = column_or_1d(X)
        y = column_or_1d(y)
        if p.shape != y.shape:
            raise ValueError(f"X and y have {p.shape[0]} and {y.shape[0]} samples")
        check_unit_interval(p, "X")
        a, b, g, e = _solve(p.astype(np.float64), y.astype(np.float64))
        self.coef_ = np.array([a, b, g])
        self.intercept_ = float(e)
        self.corpus_digest_ = _corpus_digest(p, y)
        return self

    def predict(self, X):
        check_is_fitted(self)
        return predict_ratio(column_or_1d(X), self.coefficients())

    def coefficients(self) -> PredictorCoefficients:
        check_is_fitted(self)
        a, b, g = (float(c) for c in self.coef_)
        return PredictorCoefficients(a, b, g, self.intercept_, self.codec_id, self.corpus_digest_)

    @classmethod
    def from_coefficients(cls, coeffs: PredictorCoefficients) -> "RatioPredictor":
        est = cls(codec_id=coeffs.codec_id)
        est.coef_ = np.array([coeffs.alpha, coeffs.beta, coeffs.gamma])
        est.intercept_ = coeffs.epsilon
        est.corpus_digest_ = coeffs.corpus_digest
        return est


def error_report(predicted, measured) -> dict:
    """Pearson r and absolute-error percentiles, in ratio units."""
    predicted = np.asarray(predicted, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    err = np.abs(predicted - measured)
    r = float(np.corrcoef(predicted, measured)[0, 1]) if len(err) > 1 else float("nan")
    return {
        "n": int(len(err)),
        "pearson_r": r,
        "mean_abs_error": float(err.mean()) if len(err) else float("nan"),
        "p50": float(np.percentile(err, 50)) if len(err) else float("nan"),
        "p90": float(np.percentile(err, 90)) if len(err) else float("nan"),
        "p99": float(np.percentile(err, 99)) if len(err) else float("nan"),
    }


def read_pairs_csv(path) -> list[TrainingPair]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"p_hat", "measured_ratio"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            TrainingPair(float(row["p_hat"]), float(row["measured_ratio"]), int(float(row.get("bytes") or 0)))
            for row in reader
        ]


def write_pairs_csv(path, pairs: Iterable[TrainingPair]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p_hat", "measured_ratio", "bytes"])
        for pr in pairs:
            w.writerow([repr(pr.p_hat), repr(pr.measured_ratio), pr.nbytes])


# Fitted with ``th fit --synthesize 600 --seed 7`` (all 600 pairs) on the
# fine-tune corpus from :func:`tensorstash.synth.training_corpus`.
DEFAULT_COEFFICIENTS = {
    "TENSORX": PredictorCoefficients(
        -1.1738097369366558, -0.025602169399555466, -0.045296764510171714, 0.9867150140625817,
        "TENSORX", "2925db1dcbfc60e8",
    ),
    "FMPP": PredictorCoefficients(
        -0.5225720408936417, -0.019493564823916412, -0.138112668711909, 0.9844548032885015,
        "FMPP", "b551f27b8f0043ba",
    ),
}
