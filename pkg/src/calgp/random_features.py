"""Random feature maps with ``K ~= Phi Phi^T``.

Two spectral constructions are supported:

* ``explicit``: a dense ``[nconv, n_rf]`` matrix whose columns are
  ``scale * Lambda^{-1/2} eps`` with ``eps`` standard normal. The draws ``eps``
  are kept so that length-scale updates can regenerate the matrix without new
  randomness.
* ``sorf``: the structured operator ``G = sqrt(d) Hn D1 Hn D2 Hn D3`` with
  ``Hn = H / sqrt(d)`` the orthonormal Hadamard matrix and ``D_i`` random sign
  diagonals. Inputs are zero-padded to ``d`` (next power of two); when
  ``n_rf > d`` independent blocks are stacked. Only the sign vectors are stored.

``scale`` is 1 for the arc-cosine kernel. For the RBF kernel written without
the usual factor 1/2 in the exponent, the matching spectral density is
``N(0, 2 Lambda^{-1})``, so ``scale = sqrt(2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .kernels import KernelParams
from .tensor_core import DTYPE, LayerCache, Rng, ShapeError, fwht, hadamard_matrix

KIND_SCALE = {"arc": 1.0, "rbf": math.sqrt(2.0)}


def _kind_scale(kind: str) -> float:
    try:
        return KIND_SCALE[kind]
    except KeyError:
        raise ValueError(f"unknown kernel kind {kind!r}; expected 'arc' or 'rbf'") from None


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


@dataclass(frozen=True)
class SpectralMatrix:
    mode: str
    nconv: int
    n_rf: int
    scale: float = 1.0
    # explicit mode
    omega: np.ndarray | None = None
    eps: np.ndarray | None = None
    lengthscales: np.ndarray | None = None
    # sorf mode
    signs: np.ndarray | None = None  # [n_blocks, 3, d]; row 0 is D1
    lengthscale: float = 1.0

    @property
    def d(self) -> int:
        return self.signs.shape[2] if self.mode == "sorf" else self.nconv

    @property
    def n_blocks(self) -> int:
        return self.signs.shape[0] if self.mode == "sorf" else 1

    def with_lengthscales(self, lengthscales) -> "SpectralMatrix":
        """Same randomness, new length-scales."""
        if self.mode == "sorf":
            ls = np.atleast_1d(np.asarray(lengthscales, dtype=DTYPE))
            return replace(self, lengthscale=float(_isotropic(ls)))
        if self.eps is None:
            raise ValueError("this spectral matrix has no stored draws; cannot regenerate it")
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=DTYPE), (self.nconv,)).copy()
        omega = self.scale * self.eps / ls[:, None]
        return replace(self, omega=omega, lengthscales=ls)

    def with_omega(self, omega) -> "SpectralMatrix":
        if self.mode != "explicit":
            raise ValueError("only explicit spectral matrices hold a dense omega")
        omega = np.asarray(omega, dtype=DTYPE)
        if omega.shape != (self.nconv, self.n_rf):
            raise ShapeError(f"omega must have shape {(self.nconv, self.n_rf)}, got {omega.shape}")
        return replace(self, omega=omega)

    # -- products with C ----------------------------------------------------

    def project(self, c) -> np.ndarray:
        """``C @ Omega`` for ``C`` of shape [batch, nconv]."""
        c = np.asarray(c, dtype=DTYPE)
        if c.ndim != 2 or c.shape[1] != self.nconv:
            raise ShapeError(f"features must be [batch, {self.nconv}], got {c.shape}")
        if self.mode == "explicit":
            return c @ self.omega
        d = self.d
        padded = np.zeros((c.shape[0], d), dtype=DTYPE)
        padded[:, : self.nconv] = c
        blocks = [sorf_apply(padded, s) for s in self.signs]
        out = np.concatenate(blocks, axis=1)[:, : self.n_rf]
        return out * (self.scale / self.lengthscale)

    def project_transpose(self, g) -> np.ndarray:
        """``G @ Omega^T``: back-propagates a [batch, n_rf] gradient to the features."""
        g = np.asarray(g, dtype=DTYPE)
        if self.mode == "explicit":
            return g @ self.omega.T
        d = self.d
        full = np.zeros((g.shape[0], self.n_blocks * d), dtype=DTYPE)
        full[:, : self.n_rf] = g
        acc = np.zeros((g.shape[0], d), dtype=DTYPE)
        for b, s in enumerate(self.signs):
            acc += sorf_apply_transpose(full[:, b * d : (b + 1) * d], s)
        return acc[:, : self.nconv] * (self.scale / self.lengthscale)

    def dense(self) -> np.ndarray:
        """Materialize Omega as a dense [nconv, n_rf] array."""
        if self.mode == "explicit":
            return self.omega.copy()
        return self.project(np.eye(self.nconv))


def _isotropic(ls: np.ndarray) -> float:
    if not np.all(ls == ls[0]):
        raise ValueError("sorf mode supports isotropic length-scales only")
    if not ls[0] > 0:
        raise ValueError("lengthscale must be positive")
    return float(ls[0])


def sample_spectral(nconv: int, n_rf: int, params: KernelParams, rng: Rng, kind: str = "arc") -> SpectralMatrix:
    """Dense Gaussian frequencies: column j is ``scale * Lambda^{-1/2} eps_j``."""
    if nconv < 1 or n_rf < 1:
        raise ValueError(f"nconv and n_rf must be >= 1, got {nconv}, {n_rf}")
    if params.dim != nconv:
        raise ShapeError(f"params have {params.dim} lengthscales but nconv = {nconv}")
    scale = _kind_scale(kind)
    eps = rng.normal((nconv, n_rf))
    return SpectralMatrix(
        mode="explicit",
        nconv=nconv,
        n_rf=n_rf,
        scale=scale,
        omega=scale * eps / params.lengthscales[:, None],
        eps=eps,
        lengthscales=params.lengthscales.copy(),
    )


def sorf_spectral(nconv: int, n_rf: int, lengthscale, rng: Rng, kind: str = "arc") -> SpectralMatrix:
    if nconv < 1 or n_rf < 1:
        raise ValueError(f"nconv and n_rf must be >= 1, got {nconv}, {n_rf}")
    ell = _isotropic(np.atleast_1d(np.asarray(lengthscale, dtype=DTYPE)))
    d = next_pow2(nconv)
    n_blocks = -(-n_rf // d)
    signs = rng.signs(n_blocks * 3 * d).reshape(n_blocks, 3, d)
    return SpectralMatrix(mode="sorf", nconv=nconv, n_rf=n_rf, scale=_kind_scale(kind), signs=signs, lengthscale=ell)


def sorf_apply(v, signs) -> np.ndarray:
    """``sqrt(d) Hn D1 Hn D2 Hn D3 v`` along the last axis; ``signs`` rows are D1, D2, D3."""
    d = signs.shape[-1]
    y = fwht(v * signs[2])
    y = fwht(y * signs[1])
    y = fwht(y * signs[0])
    return y / d  # sqrt(d) * d^{-3/2}


def sorf_apply_transpose(v, signs) -> np.ndarray:
    d = signs.shape[-1]
    y = fwht(v) * signs[0]
    y = fwht(y) * signs[1]
    y = fwht(y) * signs[2]
    return y / d


def sorf_dense_block(signs) -> np.ndarray:
    """Dense ``sqrt(d) Hn D1 Hn D2 Hn D3`` built from explicit matrices (test oracle)."""
    d = signs.shape[-1]
    hn = hadamard_matrix(d) / math.sqrt(d)
    return math.sqrt(d) * hn @ np.diag(signs[0]) @ hn @ np.diag(signs[1]) @ hn @ np.diag(signs[2])


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    spectral: SpectralMatrix
    kind: str = "arc"
    sigma: float = 1.0

    def __post_init__(self):
        _kind_scale(self.kind)
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def n_rf(self) -> int:
        return self.spectral.n_rf

    @property
    def nconv(self) -> int:
        return self.spectral.nconv

    @property
    def width(self) -> int:
        return self.n_rf if self.kind == "arc" else 2 * self.n_rf

    @property
    def amplitude(self) -> float:
        factor = 2.0 if self.kind == "arc" else 1.0
        return self.sigma * math.sqrt(factor / self.n_rf)


class FeatureMapGrads(NamedTuple):
    conv: np.ndarray
    omega: np.ndarray | None
    pre: np.ndarray  # gradient w.r.t. C @ Omega


def apply_feature_map(conv_features, fmap: FeatureMap):
    """Phi for a batch of feature vectors; returns (Phi, cache)."""
    c = np.asarray(conv_features, dtype=DTYPE)
    pre = fmap.spectral.project(c)
    amp = fmap.amplitude
    if fmap.kind == "arc":
        phi = amp * np.maximum(pre, 0.0)
    else:
        phi = amp * np.concatenate([np.cos(pre), np.sin(pre)], axis=1)
    return phi, LayerCache("feature_map", phi.shape, {"c": c, "pre": pre, "fmap": fmap})


def feature_map_backward(grad_out, cache: LayerCache, want_omega: bool = False) -> FeatureMapGrads:
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    cache.check("feature_map", grad_out)
    fmap: FeatureMap = cache.saved["fmap"]
    c, pre = cache.saved["c"], cache.saved["pre"]
    if want_omega and fmap.spectral.mode == "sorf":
        raise ValueError("sorf spectral operators are not learnable; no gradient w.r.t. omega")
    amp = fmap.amplitude
    if fmap.kind == "arc":
        g_pre = amp * grad_out * (pre > 0)
    else:
        n = fmap.n_rf
        g_pre = amp * (np.cos(pre) * grad_out[:, n:] - np.sin(pre) * grad_out[:, :n])
    g_c = fmap.spectral.project_transpose(g_pre)
    g_omega = c.T @ g_pre if want_omega else None
    return FeatureMapGrads(g_c, g_omega, g_pre)


def theta_gradients(grad_out, grads: FeatureMapGrads, cache: LayerCache):
    """Gradients w.r.t. log(sigma) and log(lengthscales) with the draws held fixed.

    Explicit mode yields one entry per input dimension; sorf mode yields one
    shared entry.
    """
    phi_shape = cache.out_shape
    fmap: FeatureMap = cache.saved["fmap"]
    spectral = fmap.spectral
    pre = cache.saved["pre"]
    if tuple(np.shape(grad_out)) != phi_shape:
        raise ShapeError("grad_out does not match the cached feature map output")
    # Phi is linear in sigma
    amp = fmap.amplitude
    if fmap.kind == "arc":
        phi = amp * np.maximum(pre, 0.0)
    else:
        phi = amp * np.concatenate([np.cos(pre), np.sin(pre)], axis=1)
    g_log_sigma = float((grad_out * phi).sum())
    if spectral.mode == "explicit":
        g_omega = cache.saved["c"].T @ grads.pre
        g_log_ls = -(g_omega * spectral.omega).sum(axis=1)
    else:
        g_log_ls = np.array([-float((grads.pre * pre).sum())])
    return g_log_sigma, g_log_ls
