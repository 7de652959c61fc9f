"""Binary model checkpoints.

Layout, all integers little-endian::

    magic        8 bytes  b"CALGP001"
    config_len   u64
    config       config_len bytes of UTF-8 INI text
    n_arrays     u64
    n_arrays times:
        name_len u32, name (UTF-8)
        ndim     u32, ndim x u64 dims
        data     prod(dims) x f64

The INI text is the resolved experiment configuration plus a ``[shape]``
section with the model's input shape and class count. Arrays cover every
parameter (``param/<name>``) and the sampled spectral randomness
(``spectral/<layer>/<field>``), so loading reproduces predictions bit for bit.
"""

from __future__ import annotations

import configparser
import struct
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .model import CnnGpModel, ModelSpec, _layout, parse_extractor
from .random_features import KIND_SCALE, SpectralMatrix
from .tensor_core import DTYPE

MAGIC = b"CALGP001"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def _header_text(model: CnnGpModel, experiment: cfgmod.ExperimentConfig | None) -> str:
    spec = model.spec
    fields = {k: v for k, v in spec.to_dict().items() if k not in ("input_shape", "num_classes")}
    base = experiment if experiment is not None else cfgmod.default()
    merged = base.with_overrides(**{f"model__{k}": v for k, v in fields.items()})
    if merged["model"] != fields:
        raise ValueError("experiment config disagrees with the model spec")
    shape = ",".join(str(v) for v in spec.input_shape)
    return cfgmod.render(merged) + f"[shape]\ninput_shape = {shape}\nnum_classes = {spec.num_classes}\n"


def _arrays(model: CnnGpModel) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in model.params.items()]
    for l, sm in enumerate(model.spectral):
        if sm.mode == "explicit":
            out += [(f"spectral/{l}/eps", sm.eps), (f"spectral/{l}/omega", sm.omega), (f"spectral/{l}/lengthscales", sm.lengthscales)]
        else:
            out += [(f"spectral/{l}/signs", sm.signs), (f"spectral/{l}/lengthscale", np.array([sm.lengthscale]))]
    return out


def save(model: CnnGpModel, path, experiment: cfgmod.ExperimentConfig | None = None) -> None:
    text = _header_text(model, experiment).encode("utf-8")
    arrays = _arrays(model)
    parts = [MAGIC, struct.pack("<Q", len(text)), text, struct.pack("<Q", len(arrays))]
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_raw(path) -> tuple[str, dict[str, np.ndarray]]:
    """(header text, name -> array) without interpreting either."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (clen,) = r.unpack("<Q")
    text = r.take(clen).decode("utf-8")
    (count,) = r.unpack("<Q")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(DTYPE)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return text, arrays


def _split_header(text: str):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_section("shape"):
        raise CheckpointError("checkpoint header lacks a [shape] section")
    shape = tuple(int(v) for v in cp.get("shape", "input_shape").split(","))
    q = cp.getint("shape", "num_classes")
    raw = {s: dict(cp.items(s)) for s in cp.sections() if s != "shape"}
    return cfgmod.from_mapping(raw), shape, q


def load(path) -> tuple[CnnGpModel, cfgmod.ExperimentConfig]:
    text, arrays = read_raw(path)
    experiment, shape, q = _split_header(text)
    spec = ModelSpec(input_shape=shape, num_classes=q, **experiment["model"])
    _, infos = _layout(spec, parse_extractor(spec.extractor))
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    scale = KIND_SCALE[spec.kernel]
    spectral = []
    try:
        for l, info in enumerate(infos):
            key = f"spectral/{l}/"
            if spec.spectral == "explicit":
                eps = arrays[key + "eps"]
                sm = SpectralMatrix(
                    mode="explicit",
                    nconv=info.in_width,
                    n_rf=spec.n_rf,
                    scale=scale,
                    omega=arrays[key + "omega"],
                    eps=eps,
                    lengthscales=arrays[key + "lengthscales"],
                )
            else:
                sm = SpectralMatrix(
                    mode="sorf",
                    nconv=info.in_width,
                    n_rf=spec.n_rf,
                    scale=scale,
                    signs=arrays[key + "signs"],
                    lengthscale=float(arrays[key + "lengthscale"][0]),
                )
            spectral.append(sm)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc.args[0]}") from None
    return CnnGpModel(spec, params, spectral), experiment
