"""CNN feature extractor followed by random-feature GP layers.

Dropout follows the weight reparameterization ``W = M diag(z)``: every weight
layer gets a Bernoulli keep-mask on its input units, drawn independently per
example on every forward call. No inverse-probability rescaling is applied, so
the deterministic diagnostic mode multiplies inputs by the keep-probability
instead of masking them. Biases are never dropped.

With ``depth > 1`` the extracted features are concatenated to the output of
each hidden GP layer before it enters the next layer's feature map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .kernels import KernelParams
from .random_features import (
    FeatureMap,
    SpectralMatrix,
    apply_feature_map,
    feature_map_backward,
    sample_spectral,
    sorf_spectral,
    theta_gradients,
)
from .tensor_core import DTYPE, CacheError, Rng, ShapeError

DEFAULT_EXTRACTOR = "conv:16:5,relu,pool,conv:32:5,relu,pool,flatten"
MODES = ("train", "mc_sample", "deterministic")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | dense | relu | pool | flatten
    size: int = 0
    kernel: int = 0
    keep_prob: float | None = None  # None -> model-wide keep_prob_psi


def parse_extractor(text: str) -> list[LayerSpec]:
    """Parse ``"conv:16:5,relu,pool,dense:64:0.9,flatten"``.

    ``conv:C:K[:P]`` is a KxK convolution with C filters, ``dense:D[:P]`` a
    fully connected layer; the optional P overrides the keep-probability.
    """
    layers = []
    for raw in text.split(","):
        tok = raw.strip()
        if not tok:
            continue
        parts = tok.split(":")
        name = parts[0]
        try:
            if name == "conv" and len(parts) in (3, 4):
                keep = float(parts[3]) if len(parts) == 4 else None
                layers.append(LayerSpec("conv", int(parts[1]), int(parts[2]), keep))
            elif name == "dense" and len(parts) in (2, 3):
                keep = float(parts[2]) if len(parts) == 3 else None
                layers.append(LayerSpec("dense", int(parts[1]), 0, keep))
            elif name in ("relu", "pool", "flatten") and len(parts) == 1:
                layers.append(LayerSpec(name))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"cannot parse extractor layer {tok!r}") from None
        last = layers[-1]
        if last.kind in ("conv", "dense") and (last.size < 1 or (last.kind == "conv" and last.kernel < 1)):
            raise ValueError(f"extractor layer {tok!r} needs positive sizes")
        if last.keep_prob is not None and not 0.0 < last.keep_prob <= 1.0:
            raise ValueError(f"keep-probability in {tok!r} must lie in (0, 1]")
    return layers


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    num_classes: int
    extractor: str = DEFAULT_EXTRACTOR
    kernel: str = "arc"
    n_rf: int = 1024
    spectral: str = "explicit"
    depth: int = 1
    hidden_width: int = 64
    sigma: float = 1.0
    lengthscale: float = 1.0
    keep_prob_w: float = 0.5
    keep_prob_psi: float = 0.5
    keep_prob_omega: float = 0.5
    learn_omega: bool = False
    learn_theta: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kernel not in ("arc", "rbf"):
            raise ValueError(f"kernel must be 'arc' or 'rbf', got {self.kernel!r}")
        if self.spectral not in ("explicit", "sorf"):
            raise ValueError(f"spectral must be 'explicit' or 'sorf', got {self.spectral!r}")
        for name in ("n_rf", "depth", "hidden_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sigma", "lengthscale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("keep_prob_w", "keep_prob_psi", "keep_prob_omega"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.learn_omega and self.spectral == "sorf":
            raise ValueError("learn_omega requires spectral = explicit")
        parse_extractor(self.extractor)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GpLayerInfo:
    in_width: int
    feature_width: int
    out_width: int


@dataclass
class ForwardResult:
    logits: np.ndarray
    mode: str
    version: int
    ext_caches: list = field(default_factory=list)
    gp_caches: list = field(default_factory=list)
    conv_shape: tuple = ()
    gp_input_shapes: list = field(default_factory=list)


class CnnGpModel:
    """Parameters live in ``self.params`` (name -> array), updated in place by optimizers."""

    def __init__(self, spec: ModelSpec, params: dict, spectral: list[SpectralMatrix]):
        self.spec = spec
        self.layers = parse_extractor(spec.extractor)
        self.params = params
        self.spectral = spectral
        self._version = 0
        self.nconv, self.gp_info = _layout(spec, self.layers)

    # -- bookkeeping --------------------------------------------------------

    def mark_updated(self) -> None:
        self._version += 1

    def trainable_names(self) -> list[str]:
        names = []
        for name in self.params:
            kind = name.rsplit(".", 1)[1]
            if kind in ("log_sigma", "log_ls"):
                if self.spec.learn_theta:
                    names.append(name)
            else:
                names.append(name)
        return names

    def weight_names(self) -> list[tuple[str, float]]:
        """(parameter name, keep-probability) for every Bernoulli-masked weight matrix."""
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "dense"):
                out.append((f"ext.{i}.w", self._keep(layer)))
        for l in range(len(self.gp_info)):
            out.append((f"gp.{l}.readout", self.spec.keep_prob_w))
        return out

    def _keep(self, layer: LayerSpec) -> float:
        return self.spec.keep_prob_psi if layer.keep_prob is None else layer.keep_prob

    def lengthscales(self, l: int) -> np.ndarray:
        if self.spec.learn_theta:
            return np.exp(self.params[f"gp.{l}.log_ls"])
        return np.full(self.params[f"gp.{l}.log_ls"].shape, self.spec.lengthscale)

    def sigma(self, l: int) -> float:
        if self.spec.learn_theta:
            return float(np.exp(self.params[f"gp.{l}.log_sigma"][0]))
        return self.spec.sigma

    def feature_map(self, l: int) -> FeatureMap:
        base = self.spectral[l]
        if self.spec.learn_omega:
            sm = base.with_omega(self.params[f"gp.{l}.omega"])
        elif self.spec.learn_theta:
            sm = base.with_lengthscales(self.lengthscales(l))
        else:
            sm = base
        return FeatureMap(sm, self.spec.kernel, self.sigma(l))

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    # -- forward / backward -------------------------------------------------

    def _mask(self, keep: float, shape, mode: str, rng: Rng | None):
        if mode == "deterministic" or keep >= 1.0:
            return keep
        return rng.bernoulli(keep, shape)

    def forward(self, images, mode: str = "train", rng: Rng | None = None) -> ForwardResult:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = np.asarray(images, dtype=DTYPE)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"images must have shape [batch, {', '.join(map(str, self.spec.input_shape))}], got {x.shape}"
            )
        if mode != "deterministic" and rng is None:
            raise ValueError(f"mode {mode!r} needs an Rng for mask sampling")
        res = ForwardResult(logits=None, mode=mode, version=self._version)
        h = x
        for i, layer in enumerate(self.layers):
            in_shape = h.shape
            if layer.kind == "conv":
                mask = self._mask(self._keep(layer), h.shape, mode, rng)
                h, cache = tc.conv2d_forward(h * mask, self.params[f"ext.{i}.w"], self.params[f"ext.{i}.b"])
            elif layer.kind == "dense":
                if h.ndim != 2:
                    h = h.reshape(h.shape[0], -1)
                mask = self._mask(self._keep(layer), h.shape, mode, rng)
                h, cache = tc.dense_forward(h * mask, self.params[f"ext.{i}.w"], self.params[f"ext.{i}.b"])
            elif layer.kind == "relu":
                mask = None
                h, cache = tc.relu_forward(h)
            elif layer.kind == "pool":
                mask = None
                h, cache = tc.maxpool2_forward(h)
            else:
                mask = None
                cache = tc.LayerCache("flatten", (h.shape[0], int(np.prod(h.shape[1:]))), {"shape": h.shape})
                h = h.reshape(h.shape[0], -1)
            res.ext_caches.append((layer.kind, cache, mask, in_shape))
        res.conv_shape = h.shape
        c = h.reshape(h.shape[0], -1)
        f = None
        for l, info in enumerate(self.gp_info):
            inp = c if l == 0 else np.concatenate([f, c], axis=1)
            if inp.shape[1] != info.in_width:
                raise ShapeError(f"GP layer {l} expects input width {info.in_width}, got {inp.shape[1]}")
            res.gp_input_shapes.append(inp.shape)
            mask_o = self._mask(self.spec.keep_prob_omega, inp.shape, mode, rng) if self.spec.learn_omega else 1.0
            phi, fcache = apply_feature_map(inp * mask_o, self.feature_map(l))
            mask_w = self._mask(self.spec.keep_prob_w, phi.shape, mode, rng)
            f, dcache = tc.dense_forward(phi * mask_w, self.params[f"gp.{l}.readout"])
            res.gp_caches.append((fcache, mask_o, dcache, mask_w))
        res.logits = f
        return res

    def backward(self, grad_logits, fwd: ForwardResult) -> dict:
        """Gradients of ``sum(grad_logits * logits)`` w.r.t. every trainable parameter."""
        if fwd.version != self._version:
            raise CacheError("forward result is stale: parameters changed since it was computed")
        g = np.asarray(grad_logits, dtype=DTYPE)
        if g.shape != fwd.logits.shape:
            raise ShapeError(f"grad_logits shape {g.shape} does not match logits shape {fwd.logits.shape}")
        grads: dict[str, np.ndarray] = {}
        batch = g.shape[0]
        g_c = np.zeros((batch, self.nconv), dtype=DTYPE)
        for l in reversed(range(len(self.gp_info))):
            fcache, mask_o, dcache, mask_w = fwd.gp_caches[l]
            g_phi, g_m, _ = tc.dense_backward(g, dcache)
            grads[f"gp.{l}.readout"] = g_m
            g_phi = g_phi * mask_w
            fg = feature_map_backward(g_phi, fcache, want_omega=self.spec.learn_omega)
            if self.spec.learn_omega:
                grads[f"gp.{l}.omega"] = fg.omega
            if self.spec.learn_theta:
                g_ls_sigma, g_ls = theta_gradients(g_phi, fg, fcache)
                grads[f"gp.{l}.log_sigma"] = np.array([g_ls_sigma])
                if self.spec.learn_omega:
                    grads[f"gp.{l}.log_ls"] = np.zeros_like(self.params[f"gp.{l}.log_ls"])
                else:
                    grads[f"gp.{l}.log_ls"] = g_ls
            g_in = fg.conv * mask_o
            if l > 0:
                prev = self.gp_info[l - 1].out_width
                g = g_in[:, :prev]
                g_c += g_in[:, prev:]
            else:
                g_c += g_in
        h = g_c.reshape(fwd.conv_shape)
        first_weighted = next((i for i, s in enumerate(self.layers) if s.kind in ("conv", "dense")), None)
        for i in reversed(range(len(self.layers))):
            kind, cache, mask, in_shape = fwd.ext_caches[i]
            if kind == "conv":
                need = i != first_weighted
                g_x, g_w, g_b = tc.conv2d_backward(h, cache, need_input_grad=need)
                grads[f"ext.{i}.w"], grads[f"ext.{i}.b"] = g_w, g_b
                if not need:
                    break
                h = g_x * mask
            elif kind == "dense":
                g_x, g_w, g_b = tc.dense_backward(h, cache)
                grads[f"ext.{i}.w"], grads[f"ext.{i}.b"] = g_w, g_b
                if i == first_weighted:
                    break
                h = (g_x * mask).reshape(in_shape)
            elif kind == "relu":
                h = tc.relu_backward(h, cache)
            elif kind == "pool":
                h = tc.maxpool2_backward(h, cache)
            else:
                h = h.reshape(cache.saved["shape"])
        return grads

    def logits(self, images, mode: str = "deterministic", rng: Rng | None = None) -> np.ndarray:
        return self.forward(images, mode, rng).logits


def _layout(spec: ModelSpec, layers: list[LayerSpec]):
    shape = spec.input_shape
    for layer in layers:
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ShapeError("conv layer after flatten/dense")
            c, h, w = shape
            if layer.kernel > h or layer.kernel > w:
                raise ShapeError(f"conv kernel {layer.kernel} larger than feature map {h}x{w}")
            shape = (layer.size, h - layer.kernel + 1, w - layer.kernel + 1)
        elif layer.kind == "pool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeError(f"pool needs even spatial dims, feature map is {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "dense":
            shape = (layer.size,)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
    nconv = int(np.prod(shape))
    infos = []
    in_width = nconv
    for l in range(spec.depth):
        out = spec.num_classes if l == spec.depth - 1 else spec.hidden_width
        fw = spec.n_rf if spec.kernel == "arc" else 2 * spec.n_rf
        infos.append(GpLayerInfo(in_width, fw, out))
        in_width = out + nconv
    return nconv, infos


def build_model(spec: ModelSpec, rng: Rng) -> CnnGpModel:
    """Fresh model: He-normal extractor weights, zero biases, small readouts, prior spectra."""
    layers = parse_extractor(spec.extractor)
    nconv, infos = _layout(spec, layers)
    params: dict[str, np.ndarray] = {}
    prng = rng.child("params")
    shape = spec.input_shape
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            fan_in = shape[0] * layer.kernel**2
            params[f"ext.{i}.w"] = prng.normal((layer.size, shape[0], layer.kernel, layer.kernel)) * math.sqrt(2.0 / fan_in)
            params[f"ext.{i}.b"] = np.zeros(layer.size)
            shape = (layer.size, shape[1] - layer.kernel + 1, shape[2] - layer.kernel + 1)
        elif layer.kind == "dense":
            fan_in = int(np.prod(shape))
            params[f"ext.{i}.w"] = prng.normal((fan_in, layer.size)) * math.sqrt(2.0 / fan_in)
            params[f"ext.{i}.b"] = np.zeros(layer.size)
            shape = (layer.size,)
        elif layer.kind == "pool":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
    spectral = []
    srng = rng.child("spectral")
    for l, info in enumerate(infos):
        lrng = srng.child(l)
        if spec.spectral == "sorf":
            sm = sorf_spectral(info.in_width, spec.n_rf, spec.lengthscale, lrng, kind=spec.kernel)
            n_ls = 1
        else:
            kp = KernelParams.isotropic(info.in_width, spec.sigma, spec.lengthscale)
            sm = sample_spectral(info.in_width, spec.n_rf, kp, lrng, kind=spec.kernel)
            n_ls = info.in_width
        spectral.append(sm)
        if spec.learn_omega:
            params[f"gp.{l}.omega"] = sm.omega.copy()
        params[f"gp.{l}.readout"] = prng.normal((info.feature_width, info.out_width)) / math.sqrt(info.feature_width)
        params[f"gp.{l}.log_sigma"] = np.array([math.log(spec.sigma)])
        params[f"gp.{l}.log_ls"] = np.full(n_ls, math.log(spec.lengthscale))
    return CnnGpModel(spec, params, spectral)


def predictive_distribution(model: CnnGpModel, images, S: int, rng: Rng, batch_size: int = 500) -> np.ndarray:
    """Monte Carlo predictive: average of softmax outputs over S mask draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    x = np.asarray(images, dtype=DTYPE)
    n = x.shape[0]
    out = np.empty((n, model.spec.num_classes), dtype=DTYPE)
    for start in range(0, n, batch_size):
        chunk = x[start : start + batch_size]
        acc = np.zeros((chunk.shape[0], model.spec.num_classes), dtype=DTYPE)
        crng = rng.child(start)
        for s in range(S):
            acc += tc.softmax(model.forward(chunk, "mc_sample", crng.child(s)).logits)
        out[start : start + batch_size] = acc / S
    return out
