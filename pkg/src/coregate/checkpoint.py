"""Binary checkpoints for resumable runs.

Layout: magic ``CGCK`` | u16 version | u32 header length | JSON header |
raw array payload. The header records every array's name, dtype, and shape
in payload order plus a free-form ``meta`` dict; arrays are stored as
little-endian bytes so a save/load cycle is bit-exact on any host.

Writes go to a temp file in the target directory followed by ``os.replace``,
so a crash mid-write never leaves a truncated checkpoint behind.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import TRAINABLE_FIELDS, AdamState, AdapterParams, ScaleParams
from .errors import DataError, FormatError
from .gating import GateCalibration
from .memory import MemoryBank
from .swag import SwagState

__all__ = ["CheckpointState", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"CGCK"
CHECKPOINT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8"}
_SCALE_FIELDS = ("weight", "bias", "norm_scale", "norm_shift",
                 "running_mean", "running_var")


@dataclass
class CheckpointState:
    adapter: AdapterParams
    optimizer: AdamState | None = None
    swag: SwagState | None = None
    bank: MemoryBank | None = None
    calibration: GateCalibration | None = None
    meta: dict = field(default_factory=dict)


def _collect(state: CheckpointState):
    """Flatten a state into (scalar header dict, ordered name->array dict)."""
    arrays: dict[str, np.ndarray] = {}
    head: dict = {"meta": state.meta}

    head["adapter"] = {"out_dim": state.adapter.out_dim,
                       "n_scales": len(state.adapter.scales)}
    for i, sp in enumerate(state.adapter.scales):
        for name in _SCALE_FIELDS:
            arrays[f"adapter/{i}/{name}"] = getattr(sp, name)

    if state.optimizer is not None:
        opt = state.optimizer
        head["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1,
                             "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}
        for i, per_scale in enumerate(opt.m):
            for name in TRAINABLE_FIELDS:
                arrays[f"adam/m/{i}/{name}"] = per_scale[name]
        for i, per_scale in enumerate(opt.v):
            for name in TRAINABLE_FIELDS:
                arrays[f"adam/v/{i}/{name}"] = per_scale[name]

    if state.swag is not None:
        head["swag"] = {"snapshot_count": state.swag.snapshot_count,
                        "noise_scale": state.swag.noise_scale}
        arrays["swag/mean"] = state.swag.mean
        arrays["swag/sq_mean"] = state.swag.sq_mean

    if state.bank is not None:
        head["bank"] = {"built_from": state.bank.built_from,
                        "coreset_ratio": state.bank.coreset_ratio}
        arrays["bank/vectors"] = state.bank.vectors
        arrays["bank/source_ids"] = state.bank.source_ids

    if state.calibration is not None:
        head["calibration"] = state.calibration.to_dict()

    return head, arrays


def _le_dtype(arr: np.ndarray) -> str:
    kind = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}.get(str(arr.dtype))
    if kind is None:
        raise FormatError(f"unsupported checkpoint dtype {arr.dtype}")
    return kind


def save_checkpoint(path, state: CheckpointState) -> None:
    head, arrays = _collect(state)
    head["arrays"] = [[name, _le_dtype(a), list(a.shape)] for name, a in arrays.items()]
    header = json.dumps(head, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype=_le_dtype(arr)).tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _take(buf: bytes, offset: int, size: int):
    if offset + size > len(buf):
        raise FormatError("truncated checkpoint")
    return buf[offset:offset + size], offset + size


def load_checkpoint(path) -> CheckpointState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    chunk, off = _take(buf, 0, 4)
    if chunk != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    chunk, off = _take(buf, off, 6)
    version, header_len = struct.unpack("<HI", chunk)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    chunk, off = _take(buf, off, header_len)
    head = json.loads(chunk.decode("utf-8"))

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape in head["arrays"]:
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"unsupported checkpoint dtype {dtype}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        size = count * np.dtype(dtype).itemsize
        chunk, off = _take(buf, off, size)
        arrays[name] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")

    n_scales = head["adapter"]["n_scales"]
    scales = [ScaleParams(**{f: arrays[f"adapter/{i}/{f}"] for f in _SCALE_FIELDS})
              for i in range(n_scales)]
    adapter = AdapterParams(scales=scales, out_dim=head["adapter"]["out_dim"])

    optimizer = None
    if "optimizer" in head:
        o = head["optimizer"]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"],
                              eps=o["eps"], t=o["t"])
        optimizer.m = [{f: arrays[f"adam/m/{i}/{f}"] for f in TRAINABLE_FIELDS}
                       for i in range(n_scales)]
        optimizer.v = [{f: arrays[f"adam/v/{i}/{f}"] for f in TRAINABLE_FIELDS}
                       for i in range(n_scales)]

    swag = None
    if "swag" in head:
        swag = SwagState(mean=arrays["swag/mean"], sq_mean=arrays["swag/sq_mean"],
                         snapshot_count=head["swag"]["snapshot_count"],
                         noise_scale=head["swag"]["noise_scale"])

    bank = None
    if "bank" in head:
        bank = MemoryBank(vectors=arrays["bank/vectors"],
                          source_ids=arrays["bank/source_ids"],
                          built_from=head["bank"]["built_from"],
                          coreset_ratio=head["bank"]["coreset_ratio"])

    calibration = None
    if "calibration" in head:
        calibration = GateCalibration.from_dict(head["calibration"])

    return CheckpointState(adapter=adapter, optimizer=optimizer, swag=swag,
                           bank=bank, calibration=calibration,
                           meta=head.get("meta", {}))
