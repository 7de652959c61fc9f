"""Stochastic variational training with Monte Carlo dropout.

The objective is the negative ELBO

    -ELBO ~= -(n/m) (1/N_MC) sum_i sum_{k in batch} log p(y_k | x_k, W_i, Psi_i) + KL

where KL is the squared-norm approximation weighted by keep-probabilities.
Training minimizes ``-ELBO / n`` (per-datum scale); Adam is invariant to that
rescaling and it keeps the gradient-norm clip meaningful across dataset sizes.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .data import minibatches
from .model import CnnGpModel
from .tensor_core import DTYPE, Rng

log = logging.getLogger(__name__)


class NumericalDivergence(RuntimeError):
    """Raised when the training objective becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    learning_rate: float = 0.001
    epochs: int = 30
    n_mc: int = 1
    seed: int = 0
    clip_norm: float = 100.0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0.0 <= self.learning_rate <= 1.0):
            raise ValueError("learning_rate must lie in [0, 1]")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


# ---------------------------------------------------------------------------
# KL terms
# ---------------------------------------------------------------------------


def kl_penalty(model: CnnGpModel) -> float:
    """``sum (pi/2) ||M||^2`` over every masked weight matrix (biases excluded)."""
    return float(sum(0.5 * keep * float(np.sum(model.params[name] ** 2)) for name, keep in model.weight_names()))


def _omega_terms(model: CnnGpModel, lengthscale=None):
    """Per GP layer: (ell^2 pi_Omega / 2)||M_Omega||^2 + N_RF nconv log(ell^-2)."""
    if model.spec.spectral == "sorf":
        raise ValueError("variational omega is not defined for sorf spectral operators")
    if not model.spec.learn_omega:
        raise ValueError("variational omega KL requires learn_omega")
    keep = model.spec.keep_prob_omega
    total = 0.0
    for l, info in enumerate(model.gp_info):
        ell = model.lengthscales(l) if lengthscale is None else np.full(info.in_width, float(lengthscale))
        m = model.params[f"gp.{l}.omega"]
        total += float(0.5 * keep * np.sum((ell[:, None] ** 2) * m**2))
        total += float(model.spec.n_rf * np.sum(np.log(ell**-2.0)))
    return total


def kl_penalty_variational_omega(model: CnnGpModel, lengthscale=None) -> float:
    """Squared-norm KL plus the variational-frequency terms involving the lengthscale."""
    return kl_penalty(model) + _omega_terms(model, lengthscale)


def total_kl(model: CnnGpModel) -> float:
    if model.spec.learn_omega:
        return kl_penalty_variational_omega(model)
    return kl_penalty(model)


def kl_gradients(model: CnnGpModel) -> dict:
    grads = {name: keep * model.params[name] for name, keep in model.weight_names()}
    if model.spec.learn_omega:
        keep = model.spec.keep_prob_omega
        for l in range(len(model.gp_info)):
            ell = model.lengthscales(l)
            m = model.params[f"gp.{l}.omega"]
            grads[f"gp.{l}.omega"] = keep * (ell[:, None] ** 2) * m
            if model.spec.learn_theta:
                # d/dlog(ell_k) of ell_k^2 pi/2 ||m_k||^2 - 2 N_RF log(ell_k)
                g = keep * ell**2 * np.sum(m**2, axis=1) - 2.0 * model.spec.n_rf
                grads[f"gp.{l}.log_ls"] = np.broadcast_to(g, model.params[f"gp.{l}.log_ls"].shape).copy()
    return grads


# ---------------------------------------------------------------------------
# Expected log-likelihood
# ---------------------------------------------------------------------------


def expected_ll_estimate(model: CnnGpModel, batch, n_total: int, n_mc: int, rng: Rng):
    """Doubly-stochastic estimate of the expected log-likelihood and its gradient.

    Returns (value, gradients, n_errors) where ``n_errors`` counts misclassified
    batch examples across the ``n_mc`` draws.
    """
    images, onehot = batch
    m = images.shape[0]
    if m == 0:
        raise ValueError("expected_ll_estimate needs a non-empty batch")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    factor = n_total / m
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    errors = 0
    labels = onehot.argmax(axis=1)
    for i in range(n_mc):
        fwd = model.forward(images, "train", rng.child(i))
        loss, g_logits = tc.softmax_cross_entropy(fwd.logits, onehot)
        errors += int(np.sum(fwd.logits.argmax(axis=1) != labels))
        # loss is the batch-mean NLL; the sum of log-likelihoods is -m * loss
        value += -factor * m * loss / n_mc
        g = model.backward(-factor * m * g_logits / n_mc, fwd)
        for k, v in g.items():
            if k in grads:
                grads[k] += v
            else:
                grads[k] = v
    return value, grads, errors


def neg_elbo_gradients(model: CnnGpModel, batch, n_total: int, n_mc: int, rng: Rng):
    """(-ELBO / n, gradient of -ELBO / n, n_errors) for one minibatch."""
    ell, g_ell, errors = expected_ll_estimate(model, batch, n_total, n_mc, rng)
    kl = total_kl(model)
    g_kl = kl_gradients(model)
    scale = 1.0 / n_total
    grads = {}
    for name in model.trainable_names():
        g = np.zeros_like(model.params[name])
        if name in g_ell:
            g -= g_ell[name]
        if name in g_kl:
            g += g_kl[name]
        grads[name] = g * scale
    return (kl - ell) * scale, grads, errors


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> None:
        self.step += 1
        b1t = 1.0 - self.beta1**self.step
        b2t = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            if m.shape != p.shape:
                raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    neg_elbo: float
    train_err: float
    wall_seconds: float


def train(model: CnnGpModel, dataset, config: TrainConfig, callback=None) -> list[EpochRecord]:
    """Adam on the per-datum negative ELBO; masks resampled every step.

    ``dataset`` needs ``images`` and ``labels_onehot`` arrays. Returns the
    per-epoch trace; the model is updated in place.
    """
    images, onehot = dataset.images, dataset.labels_onehot
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = Rng(config.seed).child("train")
    opt = AdamState(lr=config.learning_rate)
    trace = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        erng = rng.child(epoch)
        total_obj = 0.0
        total_err = 0
        for b, idx in enumerate(minibatches(n, min(config.batch_size, n), erng.child("perm"))):
            batch = (images[idx], onehot[idx])
            obj, grads, errs = neg_elbo_gradients(model, batch, n, config.n_mc, erng.child(b))
            if not math.isfinite(obj) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                norms = {k: float(np.linalg.norm(v)) for k, v in model.params.items()}
                raise NumericalDivergence(f"non-finite objective at step {step} (epoch {epoch}); parameter norms: {norms}")
            clip_global_norm(grads, config.clip_norm)
            opt.update(model.params, grads)
            model.mark_updated()
            # each step estimates -ELBO/n from its own batch; weight by batch share
            total_obj += obj * len(idx) / n
            total_err += errs
            step += 1
        wall = time.perf_counter() - t0 if config.record_wall_time else math.nan
        rec = EpochRecord(epoch, total_obj, total_err / (n * config.n_mc), wall)
        trace.append(rec)
        log.info("epoch %d  neg_elbo %.6f  train_err %.4f", epoch, rec.neg_elbo, rec.train_err)
        if callback is not None:
            callback(rec)
    return trace


def write_trace(trace: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "neg_elbo", "train_err", "wall_seconds"])
        for r in trace:
            w.writerow([r.epoch, f"{r.neg_elbo:.17g}", f"{r.train_err:.17g}", f"{r.wall_seconds:.17g}"])
