"""Quick built-in oracle checks (``calgp selftest``).

Each check compares a fast implementation against an independent slow or
closed-form reference and returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from . import calibration as cal
from . import kernels
from . import tensor_core as tc
from .data import synthetic_blobs
from .inference import neg_elbo_gradients
from .model import ModelSpec, build_model
from .random_features import FeatureMap, apply_feature_map, sample_spectral, sorf_dense_block, sorf_spectral
from .tensor_core import Rng


def check_fwht() -> tuple[str, bool, str]:
    rng = Rng(11)
    worst = 0.0
    for k in range(7):
        d = 1 << k
        v = rng.child(d).normal((3, d))
        worst = max(worst, float(np.max(np.abs(tc.fwht(v) - v @ tc.hadamard_matrix(d)))))
    return "fwht matches dense Hadamard", worst < 1e-10, f"max abs diff {worst:.2e}"


def check_sorf_orthogonal() -> tuple[str, bool, str]:
    worst = 0.0
    for d in (8, 64, 256):
        sm = sorf_spectral(d, d, 1.0, Rng(5).child(d))
        g = sorf_dense_block(sm.signs[0])
        worst = max(worst, float(np.max(np.abs(g @ g.T - d * np.eye(d)))))
    return "sorf block satisfies G G^T = d I", worst < 1e-10, f"max abs diff {worst:.2e}"


def check_kernel_features() -> tuple[str, bool, str]:
    rng = Rng(3)
    x = rng.child("x").normal((20, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    params = kernels.KernelParams.isotropic(8, 1.0, 1.0)
    out = []
    ok = True
    for kind in ("arc", "rbf"):
        k = kernels.gram_matrix(x, params, kind)
        fmap = FeatureMap(sample_spectral(8, 20000, params, rng.child(kind), kind=kind), kind, 1.0)
        phi, _ = apply_feature_map(x, fmap)
        rel = float(np.linalg.norm(phi @ phi.T - k) / np.linalg.norm(k))
        ok &= rel < 0.05
        out.append(f"{kind} {rel:.4f}")
    return "random features approximate kernels", ok, ", ".join(out)


def check_metrics() -> tuple[str, bool, str]:
    perfect = cal.EvalReport.from_class_indices(np.eye(3)[[0, 1, 2, 0]], [0, 1, 2, 0])
    three = cal.EvalReport.from_class_indices([[0.6, 0.4], [0.1, 0.9], [0.55, 0.45]], [0, 0, 0])
    uniform = cal.EvalReport.from_class_indices(np.full((4, 4), 0.25), [0, 1, 2, 3])
    got = (cal.ece(perfect, 10), cal.ece(three, 2), cal.brier(uniform))
    want = (1 / 20, 1 / 12, 3 / 16)
    ok = all(abs(a - b) < 1e-15 for a, b in zip(got, want))
    return "hand-enumerated ECE and Brier", ok, " ".join(f"{a:.6f}" for a in got)


def check_gradients(n_probe: int = 60) -> tuple[str, bool, str]:
    spec = ModelSpec(
        input_shape=(1, 6, 6),
        num_classes=3,
        extractor="conv:2:3,relu,pool,flatten,dense:4,relu",
        n_rf=16,
        depth=2,
        hidden_width=3,
    )
    rng = Rng(7)
    model = build_model(spec, rng.child("model"))
    images = rng.child("x").uniform((5, 1, 6, 6))
    onehot = np.eye(3)[[0, 1, 2, 1, 0]]
    frozen = rng.child("masks")

    def objective():
        model.mark_updated()
        return neg_elbo_gradients(model, (images, onehot), 20, 1, frozen)

    _, grads, _ = objective()
    h = 1e-5
    worst = 0.0
    prng = rng.child("probe")
    names = sorted(grads)
    for i in range(n_probe):
        name = names[i % len(names)]
        p = model.params[name]
        j = int(prng.child(i).choice(p.size, 1)[0])
        flat = p.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = objective()[0]
        flat[j] = orig - h
        dn = objective()[0]
        flat[j] = orig
        fd = (up - dn) / (2 * h)
        g = grads[name].reshape(-1)[j]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-7))
    return "model gradient matches finite differences", worst < 1e-4, f"max rel err {worst:.2e}"


def check_blobs() -> tuple[str, bool, str]:
    ds = synthetic_blobs(2000, 2, 2, 10.0, Rng(1))
    x = ds.images.reshape(ds.n, -1)
    pred = (x[:, 0] < 0).astype(int)
    err = float(np.mean(pred != ds.targets))
    return "blobs separable by nearest centroid", err < 0.01, f"err {err:.4f}"


CHECKS = (check_fwht, check_sorf_orthogonal, check_kernel_features, check_metrics, check_gradients, check_blobs)


def run(echo=print) -> bool:
    all_ok = True
    for check in CHECKS:
        name, ok, detail = check()
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok

