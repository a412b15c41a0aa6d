"""Versioned self-describing binary checkpoints.

Layout: magic ``RCKP``, u32 format version, u64 header length, a UTF-8
JSON header carrying the topology descriptor, run metadata, and the array
count, then each named array as (u32 name length, name, u32 rank, u64
dims..., float64 little-endian data).  Arrays are written in sorted name
order so identical states produce identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import new_rng
from .errors import CheckpointError
from .models import CaptionDecoder, ConvEncoder, DecoderSpec, EncoderSpec, LinearHead

MAGIC = b"RCKP"
VERSION = 1
_MAX_RANK = 8


@dataclass
class Checkpoint:
    topology: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def kind(self) -> str:
        return self.topology.get("kind", "unknown")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.arrays)
    header = json.dumps(
        {"topology": ckpt.topology, "meta": ckpt.meta, "array_count": len(names)},
        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def _take(data: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise CheckpointError(
            f"corrupt checkpoint: truncated while reading {what} at offset {pos} "
            f"(need {n} bytes, have {len(data) - pos})")
    return data[pos : pos + n], pos + n


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    magic, pos = _take(data, 0, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    raw, pos = _take(data, pos, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    raw, pos = _take(data, pos, 8, "header length")
    header_len = struct.unpack("<Q", raw)[0]
    raw, pos = _take(data, pos, header_len, "header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header at offset 16: {exc}") from None
    arrays: dict[str, np.ndarray] = {}
    for _ in range(int(header.get("array_count", 0))):
        raw, pos = _take(data, pos, 4, "array name length")
        name_len = struct.unpack("<I", raw)[0]
        raw, pos = _take(data, pos, name_len, "array name")
        name = raw.decode("utf-8")
        raw, pos = _take(data, pos, 4, f"rank of {name!r}")
        rank = struct.unpack("<I", raw)[0]
        if rank > _MAX_RANK:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r} at offset {pos}")
        dims = []
        for _ in range(rank):
            raw, pos = _take(data, pos, 8, f"dims of {name!r}")
            dims.append(struct.unpack("<Q", raw)[0])
        count = 1
        for d in dims:
            count *= d
        raw, pos = _take(data, pos, 8 * count, f"data of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after offset {pos}")
    return Checkpoint(topology=header.get("topology", {}), arrays=arrays,
                      meta=header.get("meta", {}), version=version)


def _model_arrays(prefix: str, model) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": arr for name, arr in model.params().items()}


def pretext_checkpoint(encoder: ConvEncoder, head: LinearHead, meta: dict | None = None,
                       extra_arrays: dict | None = None) -> Checkpoint:
    arrays = {**_model_arrays("encoder", encoder), **_model_arrays("head", head)}
    if extra_arrays:
        arrays.update(extra_arrays)
    return Checkpoint(topology={"kind": "pretext", "encoder": encoder.spec.to_dict()},
                      arrays=arrays, meta=meta or {})


def captioner_checkpoint(encoder: ConvEncoder, decoder: CaptionDecoder,
                         vocab_hash: str, meta: dict | None = None,
                         extra_arrays: dict | None = None) -> Checkpoint:
    arrays = {**_model_arrays("encoder", encoder), **_model_arrays("decoder", decoder)}
    if extra_arrays:
        arrays.update(extra_arrays)
    meta = dict(meta or {})
    meta["vocab_hash"] = vocab_hash
    return Checkpoint(
        topology={"kind": "captioner", "encoder": encoder.spec.to_dict(),
                  "decoder": decoder.spec.to_dict()},
        arrays=arrays, meta=meta)


def _load_into(model, ckpt: Checkpoint, prefix: str) -> None:
    params = model.params()
    for name, arr in params.items():
        key = f"{prefix}.{name}"
        if key not in ckpt.arrays:
            raise CheckpointError(f"topology mismatch: checkpoint lacks array {key!r}")
        stored = ckpt.arrays[key]
        if stored.shape != arr.shape:
            raise CheckpointError(
                f"topology mismatch: {key!r} has shape {stored.shape}, model needs {arr.shape}")
        arr[...] = stored


def restore_encoder(ckpt: Checkpoint) -> ConvEncoder:
    if "encoder" not in ckpt.topology:
        raise CheckpointError(
            f"topology mismatch: {ckpt.kind!r} checkpoint carries no encoder")
    encoder = ConvEncoder(EncoderSpec.from_dict(ckpt.topology["encoder"]), new_rng(0))
    _load_into(encoder, ckpt, "encoder")
    return encoder


def restore_pretext(ckpt: Checkpoint) -> tuple[ConvEncoder, LinearHead]:
    if ckpt.kind != "pretext":
        raise CheckpointError(
            f"topology mismatch: expected a pretext checkpoint, found {ckpt.kind!r}")
    encoder = restore_encoder(ckpt)
    head = LinearHead(encoder.embed_size, 4, new_rng(0))
    _load_into(head, ckpt, "head")
    return encoder, head


def restore_captioner(ckpt: Checkpoint) -> tuple[ConvEncoder, CaptionDecoder]:
    if ckpt.kind != "captioner":
        raise CheckpointError(
            f"topology mismatch: expected a captioner checkpoint, found {ckpt.kind!r}")
    encoder = restore_encoder(ckpt)
    decoder = CaptionDecoder(DecoderSpec.from_dict(ckpt.topology["decoder"]), new_rng(0))
    _load_into(decoder, ckpt, "decoder")
    return encoder, decoder
