"""Dense array primitives with explicit forward/backward pairs.

Arrays are plain ``numpy.ndarray`` objects in float64. Every layer op returns
its output together with a :class:`LayerCache`; the matching backward function
checks that it received a cache from the right op and a gradient of the right
shape before doing any work.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are incompatible with an operation."""


class CacheError(RuntimeError):
    """Raised when a backward pass gets a cache it cannot use."""


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seeded counter-based generator (Philox) with deterministic splitting.

    Children derived through :meth:`child` depend only on the parent seed, the
    path of keys used to reach them and the key itself, never on how many
    numbers the parent has already produced.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, key: str | int) -> "Rng":
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return Rng(self.seed, self._path + (int(key),))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=DTYPE)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape, dtype=DTYPE)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        """0/1 float mask with ``P(1) = p``."""
        if p >= 1.0:
            return np.ones(shape, dtype=DTYPE)
        return (self._gen.random(shape, dtype=DTYPE) < p).astype(DTYPE)

    def signs(self, n: int) -> np.ndarray:
        return np.where(self._gen.random(n) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)


# ---------------------------------------------------------------------------
# Caches
# ---------------------------------------------------------------------------


@dataclass
class LayerCache:
    op: str
    out_shape: tuple[int, ...]
    saved: dict = field(default_factory=dict)

    def check(self, op: str, grad_out: np.ndarray) -> None:
        if self.op != op:
            raise CacheError(f"{op}_backward received a cache from {self.op}_forward")
        if tuple(grad_out.shape) != self.out_shape:
            raise CacheError(
                f"{op}_backward: grad_out shape {tuple(grad_out.shape)} does not match "
                f"forward output shape {self.out_shape}"
            )


def _require_ndim(name: str, arr: np.ndarray, ndim: int, layout: str) -> None:
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D {layout}, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_forward(x, weights, bias):
    """Valid, stride-1 cross-correlation.

    x: [batch, ch_in, h, w]; weights: [ch_out, ch_in, kh, kw]; bias: [ch_out].
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    _require_ndim("input", x, 4, "[batch, ch_in, h, w]")
    _require_ndim("weights", weights, 4, "[ch_out, ch_in, kh, kw]")
    _require_ndim("bias", bias, 1, "[ch_out]")
    b, c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if ci != c:
        raise ShapeError(f"ch_in mismatch: input has {c} channels, weights expect {ci}")
    if bias.shape[0] != o:
        raise ShapeError(f"ch_out mismatch: weights have {o} filters, bias has {bias.shape[0]}")
    if kh > h:
        raise ShapeError(f"kernel height {kh} exceeds input height {h}")
    if kw > w:
        raise ShapeError(f"kernel width {kw} exceeds input width {w}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # [b, c, oh, ow, kh, kw]
    out = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))  # [b, oh, ow, o]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias[None, :, None, None]
    cache = LayerCache("conv2d", out.shape, {"x": x, "weights": weights})
    return out, cache


def conv2d_backward(grad_out, cache: LayerCache, need_input_grad: bool = True):
    """Returns (grad_input, grad_weights, grad_bias); grad_input is None when not needed."""
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    cache.check("conv2d", grad_out)
    x = cache.saved["x"]
    weights = cache.saved["weights"]
    kh, kw = weights.shape[2:]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    grad_w = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))  # [o, c, kh, kw]
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        oh, ow = grad_out.shape[2:]
        grad_x = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(grad_out, weights[:, :, i, j], axes=([1], [0]))
                grad_x[:, :, i : i + oh, j : j + ow] += contrib.transpose(0, 3, 1, 2)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Pooling and activations
# ---------------------------------------------------------------------------


def maxpool2_forward(x):
    """2x2 max-pool, stride 2. Ties go to the lowest flat index in the window."""
    x = np.asarray(x, dtype=DTYPE)
    _require_ndim("input", x, 4, "[batch, ch, h, w]")
    b, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"maxpool2 needs an even height, got {h}")
    if w % 2:
        raise ShapeError(f"maxpool2 needs an even width, got {w}")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, LayerCache("maxpool2", out.shape, {"arg": arg, "in_shape": x.shape})


def maxpool2_backward(grad_out, cache: LayerCache):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    cache.check("maxpool2", grad_out)
    b, c, h, w = cache.saved["in_shape"]
    arg = cache.saved["arg"]
    blocks = np.zeros((b, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(blocks, arg[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(b, c, h, w)


def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.maximum(x, 0.0)
    return out, LayerCache("relu", out.shape, {"gate": x > 0})


def relu_backward(grad_out, cache: LayerCache):
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    cache.check("relu", grad_out)
    return grad_out * cache.saved["gate"]


# ---------------------------------------------------------------------------
# Dense layers and loss
# ---------------------------------------------------------------------------


def dense_forward(x, weights, bias=None):
    """x: [batch, d_in] @ weights: [d_in, d_out] (+ bias: [d_out])."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    _require_ndim("input", x, 2, "[batch, d_in]")
    _require_ndim("weights", weights, 2, "[d_in, d_out]")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"d_in mismatch: input has {x.shape[1]} columns, weights have {weights.shape[0]} rows")
    out = x @ weights
    if bias is not None:
        bias = np.asarray(bias, dtype=DTYPE)
        if bias.shape != (weights.shape[1],):
            raise ShapeError(f"d_out mismatch: weights give {weights.shape[1]} outputs, bias has shape {bias.shape}")
        out = out + bias
    return out, LayerCache("dense", out.shape, {"x": x, "weights": weights, "has_bias": bias is not None})


def dense_backward(grad_out, cache: LayerCache):
    """Returns (grad_input, grad_weights, grad_bias or None)."""
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    cache.check("dense", grad_out)
    x, weights = cache.saved["x"], cache.saved["weights"]
    grad_b = grad_out.sum(axis=0) if cache.saved["has_bias"] else None
    return grad_out @ weights.T, x.T @ grad_out, grad_b


def softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_onehot(onehot, name: str = "labels") -> None:
    onehot = np.asarray(onehot)
    ok = np.isin(onehot, (0.0, 1.0)).all(axis=-1) & (onehot.sum(axis=-1) == 1)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"{name} row {bad} is not one-hot: {onehot[bad].tolist()}")


def softmax_cross_entropy(logits, onehot):
    """Mean negative log-softmax of the true class and its gradient."""
    logits = np.asarray(logits, dtype=DTYPE)
    onehot = np.asarray(onehot, dtype=DTYPE)
    _require_ndim("logits", logits, 2, "[batch, Q]")
    if onehot.shape != logits.shape:
        raise ShapeError(f"logits shape {logits.shape} != labels shape {onehot.shape}")
    check_onehot(onehot)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float((logp * onehot).sum()) / n
    grad = (np.exp(logp) - onehot) / n
    return loss, grad


# ---------------------------------------------------------------------------
# Walsh-Hadamard transform
# ---------------------------------------------------------------------------

_RADIX_BITS = 4


def hadamard_matrix(d: int) -> np.ndarray:
    """Unnormalized Sylvester Hadamard matrix of order d (power of two)."""
    _check_pow2(d)
    h = np.ones((1, 1), dtype=DTYPE)
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h


def _check_pow2(d: int) -> None:
    if d < 1 or d & (d - 1):
        raise ShapeError(f"Hadamard transform length must be a power of 2, got {d}")


_SMALL_H = {1 << a: hadamard_matrix(1 << a) for a in range(1, _RADIX_BITS + 1)}


def fwht(v):
    """Unnormalized Walsh-Hadamard transform along the last axis.

    Uses H_d = H_{m1} x H_{m2} x ... (Kronecker factors of order <= 16), so the
    cost is O(d log d) with each factor applied as a small dense product.
    """
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 0:
        raise ShapeError("fwht needs at least a 1-D input")
    d = v.shape[-1]
    _check_pow2(d)
    lead = v.shape[:-1]
    y = v.reshape(-1, d)
    rows = y.shape[0]
    bits = d.bit_length() - 1
    left = 1
    while bits > 0:
        a = min(_RADIX_BITS, bits)
        m = 1 << a
        right = d // (left * m)
        hm = _SMALL_H[m]
        if right > 1:
            y = np.matmul(hm, y.reshape(rows * left, m, right))
        else:
            y = y.reshape(rows * left, m) @ hm
        left *= m
        bits -= a
    return y.reshape(*lead, d) if lead else y.reshape(d)
