"""Versioned binary checkpoint container for deployable models.

Layout (all integers little-endian):

    8 bytes   magic b"SPKMETA1"
    u32       format version (1)
    u32       section flags (1 = optimizer state, 2 = best-validation weights)
    u64       JSON header length, then the UTF-8 header
    arrays    raw little-endian buffers in a fixed order:
                per layer: shadow float64, quantized int16
                if flag 1: adam m float64, adam v float64 per layer
                if flag 2: per layer best shadow float64, best quantized int16

The header carries the topology, every config, and the seeds, so a loaded
model is usable without any other file.  Round trips are bit-exact: float64
and int16 buffers are written verbatim.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .dynamics import NetworkTopology, NeuronConfig
from .meta import AdamState, InnerLoopConfig, MetaModel
from .plasticity import SoelConfig
from .quantize import QuantizationScheme, WeightMatrix
from .surrogate import SurrogateConfig

__all__ = ["CheckpointError", "save_model", "load_model", "LoadedCheckpoint"]

MAGIC = b"SPKMETA1"
VERSION = 1
FLAG_OPTIMIZER = 1
FLAG_BEST = 2


class CheckpointError(ValueError):
    """Checkpoint file missing, truncated, or malformed."""


@dataclasses.dataclass
class LoadedCheckpoint:
    model: MetaModel
    adam: AdamState | None
    best_model: MetaModel | None
    best_val_accuracy: float | None
    best_iteration: int | None
    experiment: dict | None


def _cfg_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    if isinstance(obj, InnerLoopConfig) and d.get("plastic_layers") is not None:
        d["plastic_layers"] = sorted(d["plastic_layers"])
    return d


def _write_array(fh, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(fh, shape: tuple[int, ...], dtype: str) -> np.ndarray:
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_model(
    path: str,
    model: MetaModel,
    adam: AdamState | None = None,
    best_model: MetaModel | None = None,
    best_val_accuracy: float | None = None,
    best_iteration: int | None = None,
    experiment: dict | None = None,
) -> None:
    flags = (FLAG_OPTIMIZER if adam is not None else 0) | (
        FLAG_BEST if best_model is not None else 0
    )
    header = {
        "layer_sizes": list(model.topology.layer_sizes),
        "plastic": list(model.topology.plastic),
        "neuron_configs": [_cfg_dict(c) for c in model.topology.neuron_configs],
        "soel": _cfg_dict(model.soel),
        "surrogate": _cfg_dict(model.surrogate),
        "inner": _cfg_dict(model.inner),
        "scheme": _cfg_dict(model.scheme),
        "quantized": model.quantized,
        "seed": model.seed,
        "iteration": model.iteration,
        "adam_t": adam.t if adam is not None else 0,
        "best_val_accuracy": best_val_accuracy,
        "best_iteration": best_iteration,
        "experiment": experiment,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, flags))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for w in model.topology.weights:
            _write_array(fh, w.shadow, "<f8")
            _write_array(fh, w.quantized, "<i2")
        if adam is not None:
            for m, v in zip(adam.m, adam.v):
                _write_array(fh, m, "<f8")
                _write_array(fh, v, "<f8")
        if best_model is not None:
            for w in best_model.topology.weights:
                _write_array(fh, w.shadow, "<f8")
                _write_array(fh, w.quantized, "<i2")


def _model_from_header(header: dict, weights: list[WeightMatrix]) -> MetaModel:
    inner_raw = dict(header["inner"])
    if inner_raw.get("plastic_layers") is not None:
        inner_raw["plastic_layers"] = frozenset(inner_raw["plastic_layers"])
    topo = NetworkTopology(
        layer_sizes=tuple(header["layer_sizes"]),
        neuron_configs=[NeuronConfig(**c) for c in header["neuron_configs"]],
        weights=weights,
        plastic=list(header["plastic"]),
    )
    return MetaModel(
        topology=topo,
        soel=SoelConfig(**header["soel"]),
        surrogate=SurrogateConfig(**header["surrogate"]),
        inner=InnerLoopConfig(**inner_raw),
        scheme=QuantizationScheme(**header["scheme"]),
        quantized=header["quantized"],
        seed=header["seed"],
        iteration=header["iteration"],
    )


def load_model(path: str) -> LoadedCheckpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint: {exc}") from exc
    with fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, flags = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: bad header: {exc}") from exc
        sizes = header["layer_sizes"]
        shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

        def read_weights() -> list[WeightMatrix]:
            out = []
            for shape in shapes:
                shadow = _read_array(fh, shape, "<f8")
                quant = _read_array(fh, shape, "<i2")
                out.append(WeightMatrix(shadow=shadow, quantized=quant))
            return out

        model = _model_from_header(header, read_weights())
        adam = None
        if flags & FLAG_OPTIMIZER:
            m, v = [], []
            for shape in shapes:
                m.append(_read_array(fh, shape, "<f8"))
                v.append(_read_array(fh, shape, "<f8"))
            adam = AdamState(m=m, v=v, t=header.get("adam_t", 0))
        best = None
        if flags & FLAG_BEST:
            best = _model_from_header(header, read_weights())
            best.iteration = header.get("best_iteration") or best.iteration
    return LoadedCheckpoint(
        model=model,
        adam=adam,
        best_model=best,
        best_val_accuracy=header.get("best_val_accuracy"),
        best_iteration=header.get("best_iteration"),
        experiment=header.get("experiment"),
    )
