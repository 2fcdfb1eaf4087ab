"""BMPR1 named-tensor container.

Layout: the 5 magic bytes ``BMPR1``, then records of

    u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f64 values

all little-endian, values row-major.  Records are written in sorted name
order so equal contents give equal bytes.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import ModelBundle, ModelConfig, MODALITIES
from .stats import SourceStatsBank

MAGIC = b"BMPR1"


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a BMPR1 file")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated record name")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 8 * count
            if end > len(blob):
                raise CheckpointError(f"truncated values for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def bundle_to_tensors(bundle: ModelBundle, bank: SourceStatsBank | None = None,
                      extra: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    named: dict[str, np.ndarray] = {f"config/{f.name}": np.array(float(getattr(bundle.config, f.name)))
                                    for f in fields(ModelConfig)}
    named.update({f"model/{k}": v for k, v in bundle.weights.items()})
    for u in MODALITIES:
        for i, p in enumerate(bundle.prompts[u]):
            named[f"prompt/{u}/layer{i}"] = p
    if bank is not None:
        named.update(bank.to_named())
    if extra:
        named.update(extra)
    return named


def bundle_from_tensors(named: dict[str, np.ndarray]) -> tuple[ModelBundle, SourceStatsBank | None, dict]:
    try:
        config = ModelConfig(**{f.name: int(named[f"config/{f.name}"]) for f in fields(ModelConfig)})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks model config entry {exc}") from exc
    weights = {k[len("model/"):]: v for k, v in named.items() if k.startswith("model/")}
    prompts = {u: [] for u in MODALITIES}
    for u in MODALITIES:
        i = 0
        while f"prompt/{u}/layer{i}" in named:
            prompts[u].append(named[f"prompt/{u}/layer{i}"].copy())
            i += 1
    bank = SourceStatsBank.from_named(named) if any(k.startswith("stats/") for k in named) else None
    rest = {k: v for k, v in named.items() if k.split("/")[0] not in ("config", "model", "prompt", "stats")}
    return ModelBundle(config, weights, prompts), bank, rest


def save_checkpoint(path, bundle: ModelBundle, bank: SourceStatsBank | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    save_tensors(path, bundle_to_tensors(bundle, bank, extra))


def load_checkpoint(path):
    return bundle_from_tensors(load_tensors(path))
