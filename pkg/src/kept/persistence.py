"""Checkpoint files, metrics CSV and run configuration.

Checkpoint layout (all integers little-endian)::

    b"KEPT" | u32 version=1 | u64 meta_len | meta (UTF-8 JSON) | u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype_code | u8 rank | rank * u64 dims | payload

dtype_code 0 is float32; 1 (float64) is accepted as an extension.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .distill import TrainConfig
from .models import PRESETS, ModelConfig, ParameterStore
from .tensor import Tensor

MAGIC = b"KEPT"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

METRICS_HEADER = ("step", "tokens_seen", "loss", "lr", "eval_loss", "top1_agreement", "mean_kl", "wall_ms")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


def save_checkpoint(store: ParameterStore, meta: dict, path: str | Path) -> None:
    names = list(store)
    if len(set(names)) != len(names):
        raise DuplicateNameError("duplicate tensor name")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = store[name].data
        code = CODE_FOR.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path} is not a KEPT checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dtype = DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(n * dtype.itemsize)
        if name in store:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        store[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return store, meta


def checkpoint_config(meta: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(meta["config"])
    except KeyError as exc:
        raise CheckpointError("checkpoint metadata has no model config") from exc


# ---------------------------------------------------------------------------
# metrics


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    # repr of a Python float is locale-independent and round-trips
    return repr(float(value))


class MetricsWriter:
    """Appends rows with the fixed header; the header is written before the first row."""

    def __init__(self, sink):
        self._owned = isinstance(sink, (str, Path))
        self.sink = open(sink, "w", newline="") if self._owned else sink
        self._writer = csv.writer(self.sink, lineterminator="\n")
        self._started = False

    def write_row(self, row: dict) -> None:
        unknown = set(row) - set(METRICS_HEADER)
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        if not self._started:
            self._writer.writerow(METRICS_HEADER)
            self._started = True
        self._writer.writerow([_fmt(row.get(k)) for k in METRICS_HEADER])
        self.sink.flush()

    def close(self) -> None:
        if self._owned:
            self.sink.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics_row(sink: MetricsWriter, row: dict) -> None:
    sink.write_row(row)


# ---------------------------------------------------------------------------
# run configuration


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    train: TrainConfig
    corpus_paths: list[str]
    output_dir: str
    eval_paths: list[str] = field(default_factory=list)
    teacher: str | None = None
    student: str | None = None
    init: str | None = None
    record_wall_time: bool = False

    REQUIRED = ("seed", "model", "train", "corpus_paths", "output_dir")

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: str | Path | None = None) -> "RunConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise RunConfigError(f"unknown run config keys: {sorted(unknown)}")
        missing = [k for k in cls.REQUIRED if k not in d]
        if missing:
            raise RunConfigError(f"missing run config keys: {missing}")
        model = d["model"]
        try:
            if isinstance(model, str):
                if model not in PRESETS:
                    raise RunConfigError(f"unknown model preset {model!r}; choose from {sorted(PRESETS)}")
                model_cfg = PRESETS[model]
            else:
                model_cfg = ModelConfig.from_dict(model)
            train_cfg = TrainConfig.from_dict(d["train"])
        except (TypeError, ValueError) as exc:
            raise RunConfigError(str(exc)) from exc

        def resolve(p):
            if p is None or base_dir is None:
                return p
            p = Path(p)
            return str(p if p.is_absolute() else Path(base_dir) / p)

        return cls(
            seed=int(d["seed"]),
            model=model_cfg,
            train=train_cfg,
            corpus_paths=[resolve(p) for p in d["corpus_paths"]],
            output_dir=resolve(d["output_dir"]),
            eval_paths=[resolve(p) for p in d.get("eval_paths", [])],
            teacher=resolve(d.get("teacher")),
            student=resolve(d.get("student")),
            init=resolve(d.get("init")),
            record_wall_time=bool(d.get("record_wall_time", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RunConfigError(f"cannot read run config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise RunConfigError("run config must be a JSON object")
        return cls.from_dict(d, base_dir=Path(path).parent)
