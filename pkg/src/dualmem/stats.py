"""Streaming moment estimation and the closed-form linear discriminant.

The background class is summarized by a single-pass mean/covariance accumulator
(Welford-style recurrence, mergeable across partitions). Slot classifiers then
come for free: with a shared covariance, training is two triangular solves
against a cached Cholesky factor.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve

logger = logging.getLogger(__name__)

BG_MAGIC = b"DMBG"


class InsufficientSamplesError(ValueError):
    """Background statistics need at least two samples."""


class MomentAccumulator:
    """Single-pass mean and centered second-moment sums over d-vectors.

    ``m2`` holds sum_i (x_i - mean)(x_i - mean)^T, updated with the numerically
    stable recurrence; dividing by the count gives the population covariance.
    """

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("dimension must be >= 1")
        self.d = d
        self.count = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))

    def add(self, x: np.ndarray) -> "MomentAccumulator":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ValueError(f"sample has shape {x.shape}, expected ({self.d},)")
        if not np.all(np.isfinite(x)):
            raise ValueError("sample contains non-finite values")
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        # outer(delta, delta) * (n-1)/n equals the delta/delta2 form but is
        # exactly symmetric in floating point.
        self.m2 += np.outer(delta, delta) * ((self.count - 1) / self.count)
        return self

    def add_batch(self, xs: np.ndarray) -> "MomentAccumulator":
        for x in np.asarray(xs, dtype=np.float64):
            self.add(x)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Combine two accumulators as if their samples were seen sequentially."""
        if other.d != self.d:
            raise ValueError(f"dimension mismatch: {self.d} vs {other.d}")
        merged = MomentAccumulator(self.d)
        if self.count == 0:
            merged.count = other.count
            merged.mean = other.mean.copy()
            merged.m2 = other.m2.copy()
            return merged
        if other.count == 0:
            merged.count = self.count
            merged.mean = self.mean.copy()
            merged.m2 = self.m2.copy()
            return merged
        total = self.count + other.count
        delta = other.mean - self.mean
        merged.count = total
        merged.mean = self.mean + delta * (other.count / total)
        merged.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / total)
        return merged


@dataclass
class LinearClassifier:
    """A plain linear scorer: weights . f + bias."""

    weights: np.ndarray
    bias: float

    def score(self, f: np.ndarray) -> float:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != self.weights.shape:
            raise ValueError(f"feature has shape {f.shape}, expected {self.weights.shape}")
        return float(self.weights @ f + self.bias)

    def score_batch(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        return feats @ self.weights + self.bias


@dataclass
class BackgroundStats:
    """Shared negative-class moments plus the factored covariance used for solves."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int
    chol_lower: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_moments(cls, mean: np.ndarray, covariance: np.ndarray, count: int) -> "BackgroundStats":
        mean = np.asarray(mean, dtype=np.float64)
        covariance = np.asarray(covariance, dtype=np.float64)
        try:
            chol = np.linalg.cholesky(covariance)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "covariance is not positive definite; increase ridge_lambda"
            ) from exc
        return cls(mean=mean, covariance=covariance, count=int(count), chol_lower=chol)

    def save(self, path: str | Path) -> None:
        d = self.d
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sI", BG_MAGIC, d))
            fh.write(self.mean.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.covariance, dtype="<f8").tobytes())
            fh.write(struct.pack("<Q", self.count))

    @classmethod
    def load(cls, path: str | Path) -> "BackgroundStats":
        with open(path, "rb") as fh:
            magic, d = struct.unpack("<4sI", fh.read(8))
            if magic != BG_MAGIC:
                raise ValueError(f"bad magic {magic!r} in background stats file")
            mean = np.frombuffer(fh.read(8 * d), dtype="<f8").copy()
            covariance = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
            (count,) = struct.unpack("<Q", fh.read(8))
        return cls.from_moments(mean, covariance, count)


def finalize_background(acc: MomentAccumulator, ridge_lambda: float) -> BackgroundStats:
    """Population-normalized covariance with a ridge floor, Cholesky-factored."""
    if acc.count < 2:
        raise InsufficientSamplesError(
            f"background estimation needs >= 2 samples, got {acc.count}"
        )
    sigma = acc.m2 / acc.count
    sigma = (sigma + sigma.T) / 2.0
    sigma[np.diag_indices_from(sigma)] += ridge_lambda
    return BackgroundStats.from_moments(acc.mean.copy(), sigma, acc.count)


def train_lda(mean_pos: np.ndarray, count_pos: int, bg: BackgroundStats) -> LinearClassifier:
    """Closed-form two-class discriminant of a slot against the shared background.

    weights solve covariance . w = (mean_pos - mean_neg) through the cached
    factor; the bias folds in the log prior ratio and the midpoint term.
    """
    mean_pos = np.asarray(mean_pos, dtype=np.float64)
    if mean_pos.shape != bg.mean.shape:
        raise ValueError(f"mean has shape {mean_pos.shape}, expected {bg.mean.shape}")
    if count_pos < 1:
        raise ValueError("positive count must be >= 1")
    diff = mean_pos - bg.mean
    w = cho_solve((bg.chol_lower, True), diff, check_finite=False)
    b = float(np.log(count_pos / bg.count) - 0.5 * (w @ (mean_pos + bg.mean)))
    return LinearClassifier(weights=w, bias=b)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, defined as 0 for a zero vector."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        logger.warning("cosine_similarity against a zero vector; returning 0.0")
        return 0.0
    return float(np.clip((a @ b) / (norm_a * norm_b), -1.0, 1.0))
