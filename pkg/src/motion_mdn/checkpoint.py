"""Single-file binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MMDNCKPT"
    8       4     format version (u32)
    12      8     header length H in bytes (u64)
    20      H     UTF-8 JSON header, keys sorted, no whitespace
    20+H    ...   tensor data: float64 little-endian, C order, packed back to back

The header lists every tensor as ``{"name", "shape", "offset"}`` with offsets
counted in bytes from the start of the tensor data. Besides the model config it
carries the channel statistics, the optimizer scalars (moment tensors are stored
as ``adam.m.<name>`` / ``adam.u.<name>``), the training RNG state, the step
counter, the train config and the deterministic part of the training report.
Everything is written in a canonical order, so save -> load -> save reproduces
the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ChannelStats
from .errors import CheckpointError, MotionError
from .seq2seq import Model, ModelConfig, model_init
from .training import AdamState, TrainConfig, Trainer, TrainReport

MAGIC = b"MMDNCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_F8 = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: Model
    stats: ChannelStats | None = None
    adam: AdamState | None = None
    rng_state: dict | None = None
    step: int = 0
    train_config: TrainConfig | None = None
    report: TrainReport | None = None
    extra: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    tensors = dict(sorted(ck.model.params.items()))
    adam = None
    if ck.adam is not None:
        a = ck.adam
        adam = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t}
        for name in sorted(a.m):
            tensors[f"adam.m.{name}"] = a.m[name]
            tensors[f"adam.u.{name}"] = a.u[name]
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=_F8).tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": ck.model.config.to_json(),
        "tensors": index,
        "stats": ck.stats.to_json() if ck.stats is not None else None,
        "adam": adam,
        "rng_state": ck.rng_state,
        "step": int(ck.step),
        "train_config": ck.train_config.to_json() if ck.train_config is not None else None,
        "report": ck.report.to_json() if ck.report is not None else None,
        "extra": ck.extra,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a motion-mdn checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(buf) < start:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    data = memoryview(buf)[start:]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _F8.itemsize
        lo = entry["offset"]
        if lo + n > len(data):
            raise CheckpointError(f"tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = (np.frombuffer(data[lo:lo + n], dtype=_F8)
                                  .astype(np.float64).reshape(shape))
    try:
        cfg = ModelConfig(**header["model_config"])
    except TypeError as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from None
    expected = {k: v.shape for k, v in model_init(cfg).params.items()}
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    if params.keys() != expected.keys():
        raise CheckpointError("checkpoint tensors do not match the model config")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise CheckpointError(f"tensor {k} has shape {params[k].shape}, config implies {shape}")
    adam = None
    if header["adam"] is not None:
        adam = AdamState(**header["adam"])
        adam.m = {k: tensors[f"adam.m.{k}"] for k in params}
        adam.u = {k: tensors[f"adam.u.{k}"] for k in params}
    tc = header["train_config"]
    return Checkpoint(
        model=Model(cfg, dict(sorted(params.items()))),
        stats=ChannelStats.from_json(header["stats"]) if header["stats"] is not None else None,
        adam=adam,
        rng_state=header["rng_state"],
        step=header["step"],
        train_config=TrainConfig(**tc) if tc is not None else None,
        report=TrainReport.from_json(header["report"]) if header["report"] is not None else None,
        extra=header.get("extra", {}),
    )


def save(path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ck))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        return from_bytes(path.read_bytes())
    except MotionError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None


# ---------------------------------------------------------------- training

def from_trainer(tr: Trainer, stats: ChannelStats | None = None, extra=None) -> Checkpoint:
    """Snapshot of everything needed to continue ``tr`` exactly where it is."""
    return Checkpoint(model=tr.model.copy(), stats=stats,
                      adam=AdamState(tr.adam.lr, tr.adam.beta1, tr.adam.beta2, tr.adam.eps,
                                     tr.adam.t, {k: v.copy() for k, v in tr.adam.m.items()},
                                     {k: v.copy() for k, v in tr.adam.u.items()}),
                      rng_state=tr.rng.bit_generator.state, step=tr.step,
                      train_config=tr.cfg, report=TrainReport.from_json(tr.report.to_json()),
                      extra=dict(extra or {}))


def resume_trainer(ck: Checkpoint, corpus, cfg: TrainConfig | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` from a checkpoint written by :func:`from_trainer`.

    ``cfg`` may extend ``steps``; every other field must match the stored config.
    """
    stored = ck.train_config
    if stored is None or ck.adam is None or ck.rng_state is None:
        raise CheckpointError("checkpoint lacks optimizer/RNG state; cannot resume")
    cfg = cfg or stored
    if {**cfg.to_json(), "steps": 0} != {**stored.to_json(), "steps": 0}:
        raise CheckpointError("resume config differs from the checkpoint's train config")
    tr = Trainer(ck.model.copy(), corpus, cfg)
    tr.adam = ck.adam
    tr.rng.bit_generator.state = ck.rng_state
    tr.step = ck.step
    tr.report = ck.report if ck.report is not None else TrainReport()
    if cfg.steps != stored.steps:
        # the shorter run's closing evaluation is not part of the extended schedule
        tr.report.heldout = {s: v for s, v in tr.report.heldout.items()
                             if s % cfg.eval_every == 0 or s == cfg.steps}
    return tr
