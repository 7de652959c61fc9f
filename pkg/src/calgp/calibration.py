"""Classifier calibration metrics and reliability-diagram bins.

Bins are right-closed: bin m (1-based) holds scores in ((m-1)/M, m/M]. The
default confidence of a bin is its midpoint (m - 0.5)/M, so even a perfect
classifier whose scores are all 1.0 has ECE = 1/(2M). The usual
mean-score-per-bin variant is available as ``confidence="mean"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import DTYPE, check_onehot

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EvalReport:
    probs: np.ndarray  # [N, Q], rows on the simplex
    labels: np.ndarray  # [N, Q], one-hot

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=DTYPE)
        labels = np.asarray(self.labels, dtype=DTYPE)
        if probs.ndim != 2 or probs.shape != labels.shape:
            raise ValueError(f"probs {probs.shape} and labels {labels.shape} must be matching [N, Q] arrays")
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("every probs row must be non-negative and sum to 1")
        check_onehot(labels)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_class_indices(cls, probs, targets) -> "EvalReport":
        probs = np.asarray(probs, dtype=DTYPE)
        onehot = np.zeros_like(probs)
        onehot[np.arange(probs.shape[0]), np.asarray(targets)] = 1.0
        return cls(probs, onehot)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def scores(self) -> np.ndarray:
        return self.probs.max(axis=1)

    def correct(self) -> np.ndarray:
        return self.probs.argmax(axis=1) == self.labels.argmax(axis=1)


@dataclass(frozen=True)
class ReliabilityBins:
    M: int
    counts: np.ndarray  # [M]
    accuracy: np.ndarray  # [M], nan for empty bins
    mean_score: np.ndarray  # [M], nan for empty bins

    @property
    def lower(self) -> np.ndarray:
        return np.arange(self.M) / self.M

    @property
    def upper(self) -> np.ndarray:
        return np.arange(1, self.M + 1) / self.M

    @property
    def confidence(self) -> np.ndarray:
        return (np.arange(1, self.M + 1) - 0.5) / self.M

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0


def bin_index(scores, M: int) -> np.ndarray:
    """0-based bin of each score under right-closed intervals; 0 maps to the first bin."""
    upper = np.arange(1, M + 1) / M
    idx = np.searchsorted(upper, np.asarray(scores, dtype=DTYPE), side="left")
    return np.clip(idx, 0, M - 1)


def bin_predictions(report: EvalReport, M: int = 10) -> ReliabilityBins:
    if M < 1:
        raise ValueError("M must be >= 1")
    scores = report.scores()
    idx = bin_index(scores, M)
    counts = np.bincount(idx, minlength=M)
    hits = np.bincount(idx, weights=report.correct().astype(DTYPE), minlength=M)
    score_sum = np.bincount(idx, weights=scores, minlength=M)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
        mean = np.where(counts > 0, score_sum / np.maximum(counts, 1), np.nan)
    return ReliabilityBins(M, counts, acc, mean)


def ece(report: EvalReport, M: int = 10, confidence: str = "midpoint") -> float:
    """Expected calibration error; ``confidence="mean"`` is the non-midpoint variant."""
    bins = bin_predictions(report, M)
    if confidence == "midpoint":
        conf = bins.confidence
    elif confidence == "mean":
        conf = bins.mean_score
    else:
        raise ValueError(f"confidence must be 'midpoint' or 'mean', got {confidence!r}")
    occ = bins.occupied
    weights = bins.counts[occ] / report.n
    return float(np.sum(weights * np.abs(bins.accuracy[occ] - conf[occ])))


def brier(report: EvalReport) -> float:
    return float(np.mean(np.mean((report.labels - report.probs) ** 2, axis=1)))


def err_and_mnll(report: EvalReport) -> tuple[float, float]:
    err = float(np.mean(~report.correct()))
    p_true = np.sum(report.probs * report.labels, axis=1)
    mnll = float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))
    return err, mnll


def predictive_entropy(report_or_probs) -> np.ndarray:
    """Natural-log entropy of each row, with 0 log 0 = 0."""
    probs = report_or_probs.probs if isinstance(report_or_probs, EvalReport) else np.asarray(report_or_probs, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=1), 0.0)


@dataclass(frozen=True)
class EntropyHistogram:
    edges: np.ndarray  # [bins + 1]
    density: np.ndarray  # [bins]
    counts: np.ndarray  # [bins]


def entropy_histogram(entropies, bins: int, num_classes: int) -> EntropyHistogram:
    """Density-normalized histogram over [0, ln Q]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    e = np.asarray(entropies, dtype=DTYPE)
    hi = math.log(num_classes)
    e = np.clip(e, 0.0, hi)
    edges = np.linspace(0.0, hi, bins + 1)
    counts, _ = np.histogram(e, bins=edges)
    width = np.diff(edges)
    total = counts.sum()
    density = counts / (total * width) if total else np.zeros(bins)
    return EntropyHistogram(edges, density, counts)


def all_metrics(report: EvalReport, M: int = 10) -> dict:
    err, mnll = err_and_mnll(report)
    return {"err": err, "mnll": mnll, "ece": ece(report, M), "brier": brier(report)}
