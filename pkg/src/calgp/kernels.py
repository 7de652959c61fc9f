"""Closed-form covariance functions on extracted feature vectors.

Both kernels use a diagonal length-scale matrix ``Lambda = diag(l_1^2, ...)``.
:class:`KernelParams` stores the length-scales ``l_k`` themselves, so
``Lambda^{-1/2} c`` is ``c / lengthscales``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import DTYPE, ShapeError


@dataclass(frozen=True)
class KernelParams:
    sigma: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=DTYPE))
        object.__setattr__(self, "lengthscales", ls)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not np.all(ls > 0):
            raise ValueError("every lengthscale must be positive")

    @classmethod
    def isotropic(cls, dim: int, sigma: float = 1.0, lengthscale: float = 1.0) -> "KernelParams":
        return cls(sigma, np.full(dim, float(lengthscale)))

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]

    def scale(self, c):
        c = np.asarray(c, dtype=DTYPE)
        if c.shape[-1] != self.dim:
            raise ShapeError(f"feature length {c.shape[-1]} does not match {self.dim} lengthscales")
        return c / self.lengthscales


def _angular_part(cos_a: np.ndarray) -> np.ndarray:
    cos_a = np.clip(cos_a, -1.0, 1.0)
    alpha = np.arccos(cos_a)
    return np.sin(alpha) + (math.pi - alpha) * cos_a


def arc_cosine_k1(c_i, c_j, params: KernelParams) -> float:
    """Order-one arc-cosine kernel."""
    a, b = params.scale(c_i), params.scale(c_j)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("arc-cosine kernel is undefined for a zero (scaled) feature vector")
    # form the product of norms once so k(a, b) == k(b, a) bit for bit
    norms = na * nb
    cos_a = float(a @ b) / norms
    return float(params.sigma**2 / math.pi * norms * _angular_part(np.asarray(cos_a)))


def rbf(c_i, c_j, params: KernelParams) -> float:
    """``sigma^2 exp(-(c_i - c_j)^T Lambda^{-1} (c_i - c_j))``; note: no factor 1/2."""
    if np.shape(c_i) != np.shape(c_j):
        raise ShapeError(f"vectors differ in shape: {np.shape(c_i)} vs {np.shape(c_j)}")
    diff = params.scale(np.asarray(c_i, dtype=DTYPE) - np.asarray(c_j, dtype=DTYPE))
    return float(params.sigma**2 * math.exp(-float(diff @ diff)))


def gram_matrix(features, params: KernelParams, kind: str = "arc") -> np.ndarray:
    """Pairwise kernel matrix of the rows of ``features`` ([n, d])."""
    x = params.scale(np.atleast_2d(features))
    n = x.shape[0]
    if n < 1:
        raise ShapeError("gram_matrix needs at least one row")
    if kind == "arc":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0.0):
            raise ValueError(f"arc-cosine kernel is undefined for zero row {int(np.argmin(norms))}")
        outer = np.outer(norms, norms)
        k = params.sigma**2 / math.pi * outer * _angular_part((x @ x.T) / outer)
    elif kind == "rbf":
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
        np.fill_diagonal(d2, 0.0)
        k = params.sigma**2 * np.exp(-d2)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}; expected 'arc' or 'rbf'")
    return 0.5 * (k + k.T)
