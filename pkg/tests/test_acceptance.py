"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary and, when
run as ``python tests/test_acceptance.py``, on stdout) and then asserts.
The MNIST runs (criteria 6 and 7) need the four MNIST IDX files under
``$CALGP_DATA_DIR/mnist`` (or ``data/mnist`` beside the checkout); they take about half an hour on one core and are
skipped when the data is missing or ``CALGP_SKIP_SLOW=1``.
"""

import io
import math
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from calgp import calibration as cal
from calgp import cli, kernels, selftest
from calgp import config as cfgmod
from calgp import tensor_core as tc
from calgp.data import synthetic_blobs
from calgp.inference import TrainConfig, train
from calgp.kernels import KernelParams
from calgp.model import ModelSpec, build_model
from calgp.random_features import FeatureMap, apply_feature_map, sample_spectral, sorf_dense_block, sorf_spectral
from calgp.tensor_core import Rng

try:
    from conftest import ACCEPTANCE
except ImportError:  # running as a script
    ACCEPTANCE = {}

ROOT = Path(__file__).resolve().parents[1]
CSV: dict[int, str] = {}  # first-run CSV text per criterion, for criterion 9


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    return ok


def csv_text(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(v if isinstance(v, str) else f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# 1. kernel approximation


def kernel_convergence():
    sizes = (100, 1000, 10_000)
    rows, slopes, final = [], {}, {}
    for kind in ("arc", "rbf"):
        errs = np.zeros((10, len(sizes)))
        for s in range(10):
            rng = Rng(100 + s)
            x = rng.child("x").normal((20, 8))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            params = KernelParams.isotropic(8)
            k = kernels.gram_matrix(x, params, kind)
            for j, n in enumerate(sizes):
                fmap = FeatureMap(sample_spectral(8, n, params, rng.child(kind).child(n), kind=kind), kind, 1.0)
                phi, _ = apply_feature_map(x, fmap)
                errs[s, j] = np.linalg.norm(phi @ phi.T - k) / np.linalg.norm(k)
                rows.append([kind, str(s), str(n), errs[s, j]])
        per_seed = [np.polyfit(np.log(sizes), np.log(e), 1)[0] for e in errs]
        slopes[kind] = float(np.mean(per_seed))
        final[kind] = float(errs[:, -1].max())
    return slopes, final, csv_text(["kind", "seed", "n_rf", "rel_err"], rows)


def test_criterion_1_kernel_convergence():
    slopes, final, CSV[1] = kernel_convergence()
    ok = all(final[k] < 0.05 and -0.7 <= slopes[k] <= -0.3 for k in slopes)
    detail = "; ".join(f"{k}: worst err at 1e4 {final[k]:.4f}, mean slope {slopes[k]:.3f}" for k in slopes)
    record(1, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 2. SORF exactness


def naive_hadamard(d):
    i = np.arange(d)
    bits = np.bitwise_and(i[:, None], i[None, :])
    parity = np.array([bin(b).count("1") & 1 for b in bits.ravel()]).reshape(d, d)
    return 1.0 - 2.0 * parity


def sorf_exactness():
    gram = impl = fw = 0.0
    rows = []
    for d in (8, 64, 256):
        sm = sorf_spectral(d, d, 1.0, Rng(200).child(d))
        g = sorf_dense_block(sm.signs[0])
        gram = max(gram, float(np.max(np.abs(g @ g.T - d * np.eye(d)))))
        x = Rng(201).child(d).normal((5, d))
        impl = max(impl, float(np.max(np.abs(sm.project(x) - x @ g.T))))
        rows.append([str(d), float(np.sum(g))])
    for k in range(7):
        d = 1 << k
        v = Rng(202).child(d).normal((4, d))
        fw = max(fw, float(np.max(np.abs(tc.fwht(v) - v @ naive_hadamard(d)))))
    return gram, impl, fw, csv_text(["d", "sum_G"], rows)


def test_criterion_2_sorf_exactness():
    gram, impl, fw, CSV[2] = sorf_exactness()
    ok = gram < 1e-10 and impl < 1e-10 and fw < 1e-10
    detail = f"|GG^T - dI| {gram:.2e}, implicit vs dense {impl:.2e}, fwht vs naive {fw:.2e}"
    record(2, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 3. SORF speed


def test_criterion_3_sorf_speed():
    d = 4096
    x = Rng(300).normal((256, d))
    dense = FeatureMap(sample_spectral(d, d, KernelParams.isotropic(d), Rng(301)), "arc", 1.0)
    sorf = FeatureMap(sorf_spectral(d, d, 1.0, Rng(302)), "arc", 1.0)
    times = {}
    for name, fmap in (("dense", dense), ("sorf", sorf)):
        apply_feature_map(x, fmap)  # warm-up
        ts = []
        for _ in range(20):
            t = time.perf_counter()
            apply_feature_map(x, fmap)
            ts.append(time.perf_counter() - t)
        times[name] = statistics.median(ts)
    speedup = times["dense"] / times["sorf"]
    # timings are not reproducible; the deterministic part is the output
    phi, _ = apply_feature_map(x[:2], sorf)
    CSV[3] = csv_text(["row", "sum_phi"], [[str(i), float(v)] for i, v in enumerate(phi.sum(axis=1))])
    ok = speedup >= 2.0
    detail = f"median dense {times['dense'] * 1e3:.1f} ms, sorf {times['sorf'] * 1e3:.1f} ms, speed-up {speedup:.2f}x"
    record(3, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 4. gradients


def test_criterion_4_gradients():
    name, ok, detail = selftest.check_gradients(n_probe=250)
    CSV[4] = detail + "\n"
    record(4, ok, f"250 probes, {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 5. metrics


def brute_ece(probs, targets, m_bins):
    n = len(probs)
    total = 0.0
    for m in range(1, m_bins + 1):
        members = [i for i in range(n) if (max(probs[i]) > (m - 1) / m_bins or m == 1) and max(probs[i]) <= m / m_bins]
        if members:
            hits = sum(1 for i in members if probs[i].index(max(probs[i])) == targets[i])
            total += len(members) / n * abs(hits / len(members) - (m - 0.5) / m_bins)
    return total


def brute_brier(probs, targets):
    q = len(probs[0])
    return sum((float(k == t) - p[k]) ** 2 / q for p, t in zip(probs, targets) for k in range(q)) / len(probs)


def metric_oracles():
    worst, rows = 0.0, []
    for i in range(1000):
        rng = Rng(500).child(i)
        n = int(rng.child("n").choice(50, 1)[0]) + 1
        q = int(rng.child("q").choice(9, 1)[0]) + 2
        m = int(rng.child("m").choice(20, 1)[0]) + 1
        logits = rng.normal((n, q)) * 3
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        t = (rng.child("t").uniform(n) * q).astype(int)
        report = cal.EvalReport.from_class_indices(p, t)
        e, b = cal.ece(report, m), cal.brier(report)
        worst = max(worst, abs(e - brute_ece(p.tolist(), t.tolist(), m)), abs(b - brute_brier(p.tolist(), t.tolist())))
        rows.append([str(i), e, b])
    # exact up to rounding: 1 - 0.95 is not bit-equal to 0.05
    exact = []
    for m in (1, 5, 10, 15):
        perfect = cal.EvalReport.from_class_indices(np.eye(3)[[0, 1, 2]], [0, 1, 2])
        exact.append(abs(cal.ece(perfect, m) - 1 / (2 * m)) <= 1e-15)
    three = cal.EvalReport.from_class_indices([[0.6, 0.4], [0.1, 0.9], [0.55, 0.45]], [0, 0, 0])
    exact.append(abs(cal.ece(three, 2) - 1 / 12) <= 1e-15)
    for q in (2, 4, 10):
        uniform = cal.EvalReport.from_class_indices(np.full((q, q), 1 / q), np.arange(q))
        exact.append(abs(cal.brier(uniform) - (q - 1) / q**2) <= 1e-15)
    return worst, exact, csv_text(["report", "ece", "brier"], rows)


def test_criterion_5_metric_oracles():
    worst, exact, CSV[5] = metric_oracles()
    ok = worst < 1e-12 and all(exact)
    detail = f"max |fast - brute| {worst:.2e} over 1000 reports; hand examples {sum(exact)}/{len(exact)} within 1e-15"
    record(5, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 8. DGP depth


def dgp_depths():
    ds = synthetic_blobs(400, 2, 2, 10.0, Rng(800))
    test = synthetic_blobs(400, 2, 2, 10.0, Rng(801))
    rows, shapes_ok = [], True
    for depth in (1, 2, 3):
        spec = ModelSpec((1, 1, 2), 2, extractor="flatten", n_rf=64, depth=depth, hidden_width=8, keep_prob_w=1.0, keep_prob_psi=1.0)
        model = build_model(spec, Rng(802).child(depth))
        trace = train(model, ds, TrainConfig(batch_size=50, learning_rate=0.01, epochs=150, seed=803))
        fwd = model.forward(test.images, "deterministic")
        want = [(test.n, model.nconv)] + [(test.n, 8 + model.nconv)] * (depth - 1)
        shapes_ok &= fwd.gp_input_shapes == want
        err = float(np.mean(np.argmax(fwd.logits, axis=1) != test.targets))
        rows.append([str(depth), trace[-1].train_err, err])
    return rows, shapes_ok, csv_text(["depth", "train_err", "test_err"], rows)


def test_criterion_8_dgp_depth():
    rows, shapes_ok, CSV[8] = dgp_depths()
    ok = shapes_ok and all(r[1] <= 0.02 and r[2] <= 0.02 for r in rows)
    detail = ", ".join(f"depth {r[0]}: train {r[1]:.4f} test {r[2]:.4f}" for r in rows) + f"; layer shapes {'ok' if shapes_ok else 'WRONG'}"
    record(8, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 6 and 7. desk-scale MNIST


def mnist_dir():
    # $CALGP_DATA_DIR, else a data/ directory next to the checkout
    for base in (os.environ.get(cfgmod.DATA_DIR_ENV), ROOT.parent / "data"):
        if base and (Path(base) / "mnist" / "train-images-idx3-ubyte").exists():
            return str(base)
    return None


SLOW = pytest.mark.skipif(
    os.environ.get("CALGP_SKIP_SLOW") == "1" or mnist_dir() is None,
    reason="MNIST not found under $CALGP_DATA_DIR/mnist, or CALGP_SKIP_SLOW=1",
)


def run_mnist(config_name, out):
    cfg = cfgmod.load(ROOT / "configs" / config_name).with_overrides(run__out=str(out))
    t0 = time.perf_counter()
    model = cli.cmd_train(cfg)["model"]
    t1 = time.perf_counter()
    ev = cli.cmd_eval(model, cfg)
    t2 = time.perf_counter()
    ood = cli.cmd_ood(model, cfg)
    t3 = time.perf_counter()
    return ev["metrics"], ood["summary"], (t2 - t0, t3 - t2)


@pytest.fixture(scope="module")
def mnist_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("mnist")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv(cfgmod.DATA_DIR_ENV, mnist_dir())
        return {v: run_mnist(f"{name}.ini", base / v) for v, name in (("rf", "mnist"), ("sorf", "mnist_sorf"))}


BOUNDS = {"err": 0.05, "ece": 0.05, "brier": 0.10, "mnll": 0.25}


@pytest.mark.slow
@SLOW
def test_criterion_6_mnist_calibration(mnist_runs):
    parts, ok = [], True
    for variant, (metrics, _, (secs, _)) in mnist_runs.items():
        ok &= all(metrics[k] <= b for k, b in BOUNDS.items())
        parts.append(f"{variant}: " + " ".join(f"{k} {metrics[k]:.4f}" for k in BOUNDS) + f" ({secs / 60:.1f} min)")
    detail = "; ".join(parts) + " (bounds err .05 ece .05 brier .10 mnll .25)"
    record(6, ok, detail)
    assert ok, detail


@pytest.mark.slow
@SLOW
def test_criterion_7_ood_entropy(mnist_runs):
    parts, ok = [], True
    for variant, (_, s, (_, secs)) in mnist_runs.items():
        ratio = s["mean_ood"] / s["mean_in"]
        ok &= ratio >= 3.0 and s["median_in"] < 0.2
        parts.append(
            f"{variant}: mean in {s['mean_in']:.4f} ood {s['mean_ood']:.4f} ratio {ratio:.2f}, "
            f"in-dist median {s['median_in']:.4f} ({secs / 60:.1f} min)"
        )
    detail = "; ".join(parts) + " (need ratio >= 3, median < 0.2)"
    record(7, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(tmp_path):
    reruns = {
        1: lambda: kernel_convergence()[2],
        2: lambda: sorf_exactness()[3],
        4: lambda: selftest.check_gradients(n_probe=250)[2] + "\n",
        5: lambda: metric_oracles()[2],
        8: lambda: dgp_depths()[2],
    }
    same = {}
    for n, fn in reruns.items():
        first = CSV.get(n) or fn()
        same[n] = fn() == first
    # criterion 3: the output of the timed operation, not the timing
    d = 4096
    x = Rng(300).normal((2, d))
    sorf = FeatureMap(sorf_spectral(d, d, 1.0, Rng(302)), "arc", 1.0)
    phi = apply_feature_map(x, sorf)[0]
    text = csv_text(["row", "sum_phi"], [[str(i), float(v)] for i, v in enumerate(phi.sum(axis=1))])
    same[3] = CSV.get(3, text) == text
    # criteria 6 and 7: a reduced end-to-end CLI run, twice
    blobs = ROOT / "configs" / "blobs.ini"
    names = ("trace.csv", "checkpoint.bin", "metrics.csv", "reliability.csv", "probs.csv", "entropy_in.csv", "entropy_ood.csv", "entropy_hist.csv")
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg = cfgmod.load(blobs).with_overrides(run__out=str(tmp_path / "run"), train__epochs=20, model__keep_prob_w=0.5)
        model = cli.cmd_train(cfg)["model"]
        cli.cmd_eval(model, cfg)
        cli.cmd_ood(model, cfg)
        (tmp_path / "run").rename(out)
        outputs.append({n: (out / n).read_bytes() for n in names})
    same["6/7"] = outputs[0] == outputs[1]
    ok = all(same.values())
    detail = "byte-identical reruns: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items())
    record(9, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", *sys.argv[1:]]))
