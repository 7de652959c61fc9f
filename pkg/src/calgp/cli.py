"""Command-line experiment runner.

Subcommands::

    calgp train    --config PATH [--seed N] [--out DIR] [--threads N]
    calgp eval     --checkpoint FILE [--config PATH] [--seed N] [--out DIR]
    calgp ood      --checkpoint FILE [--config PATH] [--seed N] [--out DIR]
    calgp selftest

Relative dataset paths resolve against ``$CALGP_DATA_DIR`` when set. IDX
datasets are expected as the four MNIST-style files named in ``[data]``; an
out-of-distribution set (e.g. notMNIST converted to IDX) goes in
``ood_images`` / ``ood_labels``. Without one, ``ood`` builds a
pixel-permuted copy of the test set and marks it as a substitute.

Exit codes: 0 success, 1 selftest failure, 2 configuration error,
3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import calibration as cal
from . import checkpoint as ckpt
from . import config as cfgmod
from . import plots, selftest
from .config import ConfigError
from .data import Dataset, IdxFormatError, balanced_subsample, load_idx_pair, one_hot, permuted_pixels, read_idx_images, synthetic_blobs
from .inference import NumericalDivergence, train, write_trace
from .model import build_model, predictive_distribution
from .tensor_core import DTYPE, Rng, ShapeError

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("calgp")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def _require(cfg: cfgmod.ExperimentConfig, key: str) -> Path:
    p = cfg.data_path(key)
    if p is None:
        raise ConfigError(f"data.{key}", "a path is required for source = idx")
    return p


def load_train(cfg: cfgmod.ExperimentConfig) -> Dataset:
    d = cfg["data"]
    rng = Rng(cfg.seed).child("data")
    if d["source"] == "synthetic":
        return synthetic_blobs(d["synthetic_n"], d["synthetic_classes"], d["synthetic_dim"], d["synthetic_separation"], rng.child("train"))
    ds = load_idx_pair(_require(cfg, "train_images"), _require(cfg, "train_labels"))
    if d["n_train"]:
        try:
            ds = balanced_subsample(ds, d["n_train"], rng.child("train"))
        except ValueError as exc:
            raise ConfigError("data.n_train", str(exc)) from None
    return ds


def load_test(cfg: cfgmod.ExperimentConfig, num_classes: int) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        rng = Rng(cfg.seed).child("data").child("test")
        return synthetic_blobs(d["synthetic_test_n"], d["synthetic_classes"], d["synthetic_dim"], d["synthetic_separation"], rng)
    ds = load_idx_pair(_require(cfg, "test_images"), _require(cfg, "test_labels"), num_classes=num_classes)
    if d["n_test"]:
        ds = ds.subset(np.arange(min(d["n_test"], ds.n)))
    return ds


def load_ood(cfg: cfgmod.ExperimentConfig, test: Dataset) -> Dataset:
    path = cfg.data_path("ood_images")
    if path is None:
        return permuted_pixels(test, Rng(cfg.seed).child("data").child("ood"))
    labels_path = cfg.data_path("ood_labels")
    if labels_path is not None:
        ds = load_idx_pair(path, labels_path, num_classes=test.num_classes)
    else:
        # labels play no role in entropy; class 0 fills the slot
        pixels = read_idx_images(path)
        images = (pixels.astype(DTYPE) / 255.0)[:, None, :, :]
        ds = Dataset(images, one_hot(np.zeros(images.shape[0], dtype=int), test.num_classes), list(test.class_names), {"source": str(path)})
    return ds


def check_compatible(model, ds: Dataset, what: str) -> None:
    if ds.image_shape != model.spec.input_shape or ds.num_classes != model.spec.num_classes:
        raise ShapeError(
            f"{what} images have shape {ds.image_shape} with {ds.num_classes} classes, "
            f"but the model expects {model.spec.input_shape} with {model.spec.num_classes} classes"
        )


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _g(v: float) -> str:
    return f"{float(v):.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics(path: Path, metrics: dict) -> None:
    keys = ["err", "mnll", "ece", "brier"]
    _write_csv(path, keys, [[_g(metrics[k]) for k in keys]])


def write_reliability(path: Path, bins: cal.ReliabilityBins) -> None:
    rows = [
        [_g(lo), _g(hi), _g(c), _g(a), int(n)]
        for lo, hi, c, a, n in zip(bins.lower, bins.upper, bins.confidence, bins.accuracy, bins.counts)
    ]
    _write_csv(path, ["bin_lo", "bin_hi", "confidence", "accuracy", "count"], rows)


def write_probs(path: Path, probs: np.ndarray, targets: np.ndarray) -> None:
    header = [f"p{k}" for k in range(probs.shape[1])] + ["label"]
    _write_csv(path, header, ([*map(_g, row), int(t)] for row, t in zip(probs, targets)))


def read_probs(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_probs`."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return raw[:, :-1], raw[:, -1].astype(int)


def write_entropy(path: Path, entropy: np.ndarray) -> None:
    _write_csv(path, ["entropy"], ([_g(e)] for e in entropy))


def write_histograms(path: Path, hists: dict[str, cal.EntropyHistogram]) -> None:
    names = list(hists)
    first = hists[names[0]]
    header = ["bin_lo", "bin_hi"] + [f"density_{n}" for n in names] + [f"count_{n}" for n in names]
    rows = []
    for i in range(first.density.shape[0]):
        row = [_g(first.edges[i]), _g(first.edges[i + 1])]
        row += [_g(hists[n].density[i]) for n in names]
        row += [int(hists[n].counts[i]) for n in names]
        rows.append(row)
    _write_csv(path, header, rows)


def _prepare_out(cfg: cfgmod.ExperimentConfig) -> Path:
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.ini").write_text(cfgmod.render(cfg))
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: cfgmod.ExperimentConfig) -> dict:
    train_cfg = cfg.train_config()
    ds = load_train(cfg)
    spec = cfg.model_spec(ds.image_shape, ds.num_classes)
    model = build_model(spec, Rng(cfg.seed).child("model"))
    out = _prepare_out(cfg)
    trace = train(model, ds, train_cfg)
    write_trace(trace, out / "trace.csv")
    ckpt.save(model, out / "checkpoint.bin", cfg)
    final = trace[-1] if trace else None
    if final is not None:
        print(f"trained {len(trace)} epochs: neg_elbo {final.neg_elbo:.6f}, train_err {final.train_err:.4f}")
    return {"out": out, "trace": trace, "model": model}


def _predict(model, ds: Dataset, cfg: cfgmod.ExperimentConfig, stream: str) -> np.ndarray:
    return predictive_distribution(model, ds.images, cfg["eval"]["samples"], Rng(cfg.seed).child(stream))


def cmd_eval(model, cfg: cfgmod.ExperimentConfig) -> dict:
    test = load_test(cfg, model.spec.num_classes)
    check_compatible(model, test, "test")
    out = _prepare_out(cfg)
    probs = _predict(model, test, cfg, "eval")
    report = cal.EvalReport(probs, test.labels_onehot)
    e = cfg["eval"]
    err, mnll = cal.err_and_mnll(report)
    metrics = {"err": err, "mnll": mnll, "ece": cal.ece(report, e["bins"], e["confidence"]), "brier": cal.brier(report)}
    bins = cal.bin_predictions(report, e["bins"])
    write_metrics(out / "metrics.csv", metrics)
    write_reliability(out / "reliability.csv", bins)
    write_probs(out / "probs.csv", probs, test.targets)
    if e["svg"]:
        plots.reliability_svg(bins, out / "reliability.svg")
    print("  ".join(f"{k} {v:.6f}" for k, v in metrics.items()))
    return {"out": out, "metrics": metrics, "bins": bins, "probs": probs}


def cmd_ood(model, cfg: cfgmod.ExperimentConfig) -> dict:
    test = load_test(cfg, model.spec.num_classes)
    check_compatible(model, test, "in-distribution")
    ood = load_ood(cfg, test)
    check_compatible(model, ood, "out-of-distribution")
    out = _prepare_out(cfg)
    # one stream for both sets, so the same data gives the same entropies
    h_in = cal.predictive_entropy(_predict(model, test, cfg, "ood"))
    h_out = cal.predictive_entropy(_predict(model, ood, cfg, "ood"))
    q, nb = model.spec.num_classes, cfg["eval"]["entropy_bins"]
    hists = {"in": cal.entropy_histogram(h_in, nb, q), "ood": cal.entropy_histogram(h_out, nb, q)}
    write_entropy(out / "entropy_in.csv", h_in)
    write_entropy(out / "entropy_ood.csv", h_out)
    write_histograms(out / "entropy_hist.csv", hists)
    substitute = "substitute" in ood.meta
    summary = {
        "mean_in": float(np.mean(h_in)),
        "mean_ood": float(np.mean(h_out)),
        "median_in": float(np.median(h_in)),
        "median_ood": float(np.median(h_out)),
    }
    _write_csv(
        out / "ood_summary.csv",
        [*summary, "ood_substitute"],
        [[*map(_g, summary.values()), "true" if substitute else "false"]],
    )
    if cfg["eval"]["svg"]:
        plots.entropy_density_svg(hists, out / "entropy_density.svg")
    tag = " (pixel-permuted substitute)" if substitute else ""
    print(f"mean entropy: in-distribution {summary['mean_in']:.6f}, out-of-distribution{tag} {summary['mean_ood']:.6f}")
    return {"out": out, "summary": summary, "entropy_in": h_in, "entropy_ood": h_out}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calgp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ood"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name == "train")
        if name != "train":
            p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--threads", type=int, default=1)
    sub.add_parser("selftest")
    return parser


def _resolve(args) -> tuple[cfgmod.ExperimentConfig, object]:
    model = None
    if getattr(args, "checkpoint", None) is not None:
        model, embedded = ckpt.load(args.checkpoint)
        cfg = cfgmod.load(args.config) if args.config is not None else embedded
    else:
        cfg = cfgmod.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["run__seed"] = args.seed
    if args.out is not None:
        overrides["run__out"] = args.out
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    if model is not None and cfg["model"] != {k: getattr(model.spec, k) for k in cfg["model"]}:
        raise ConfigError("model", "the [model] section disagrees with the checkpoint")
    return cfg, model


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return EXIT_OK if selftest.run() else EXIT_SELFTEST
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            cfg, model = _resolve(args)
            if args.command == "train":
                cmd_train(cfg)
            elif args.command == "eval":
                cmd_eval(model, cfg)
            else:
                cmd_ood(model, cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError, ckpt.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
