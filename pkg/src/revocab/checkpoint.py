"""Binary tensor checkpoint format.

Layout, all little-endian regardless of host:

    magic "VADT" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | name UTF-8 | u8 rank | rank * u64 dims
                | row-major payload (f32 unless listed in the trailer)
    JSON trailer | u64 trailer length  (the final 8 bytes of the file)

Tensor payloads are float32; integer tensors (e.g. overlap ids) are stored
as u32 and declared in the trailer's "tensor_dtypes" map so the stream stays
self-describing. The trailer also carries the model config and the hash of
the vocabulary file the model was trained against.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tinylm import Model, ModelConfig, param_shapes

MAGIC = b"VADT"
FORMAT_VERSION = 1

_PAYLOAD_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


def _payload_kind(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f32"
    if arr.dtype.kind in ("i", "u"):
        return "u32"
    raise ValidationError(f"cannot store arrays of dtype {arr.dtype}")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], trailer: dict) -> None:
    """Write tensors in insertion order plus a JSON trailer."""
    dtype_map: dict[str, str] = {}
    chunks: list[bytes] = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        kind = _payload_kind(arr)
        if kind != "f32":
            dtype_map[name] = kind
        if kind == "f32" and arr.dtype != np.float32:
            raise ValidationError(
                f"tensor {name!r} is {arr.dtype}; the checkpoint format stores f32 "
                "(cast explicitly if the loss of precision is acceptable)"
            )
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype(_PAYLOAD_DTYPES[kind]).tobytes())

    full_trailer = dict(trailer)
    if dtype_map:
        full_trailer["tensor_dtypes"] = dtype_map
    trailer_bytes = json.dumps(full_trailer, sort_keys=True).encode("utf-8")
    chunks.append(trailer_bytes)
    chunks.append(struct.pack("<Q", len(trailer_bytes)))
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; raises ValidationError on any structural problem."""
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {path}")
    if len(data) < 20 or data[:4] != MAGIC:
        raise ValidationError(f"not a checkpoint file (bad magic): {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version} in {path}")

    (trailer_len,) = struct.unpack_from("<Q", data, len(data) - 8)
    trailer_start = len(data) - 8 - trailer_len
    if trailer_len <= 0 or trailer_start < 12:
        raise ValidationError(f"corrupt trailer length in {path}")
    try:
        trailer = json.loads(data[trailer_start : len(data) - 8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"corrupt checkpoint trailer in {path}: {exc}")
    dtype_map = trailer.get("tensor_dtypes", {})

    tensors: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            kind = dtype_map.get(name, "f32")
            dtype = _PAYLOAD_DTYPES[kind]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            payload = data[offset : offset + n_bytes]
            if len(payload) != n_bytes or offset + n_bytes > trailer_start:
                raise ValidationError(f"truncated tensor {name!r} in {path}")
            offset += n_bytes
        except (struct.error, KeyError) as exc:
            raise ValidationError(f"truncated or corrupt checkpoint {path}: {exc}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(np.float32) if kind == "f32" else arr.astype(np.uint32)
    if offset != trailer_start:
        raise ValidationError(f"checkpoint has {trailer_start - offset} unaccounted bytes: {path}")
    return tensors, trailer


def save_model(path: str | Path, model: Model, vocab_hash: str, extra: dict | None = None) -> None:
    if model.config.dtype != "f32":
        raise ValidationError(
            "checkpoints store f32; convert the model with Model.astype('f32') first"
        )
    trailer = {
        "kind": "model",
        "config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
    }
    if extra:
        trailer.update(extra)
    ordered = {name: model.params[name] for name in param_shapes(model.config)}
    save_tensors(path, ordered, trailer)


def load_model(path: str | Path) -> tuple[Model, dict]:
    tensors, trailer = load_tensors(path)
    if trailer.get("kind") != "model":
        raise ValidationError(f"checkpoint {path} is not a model (kind={trailer.get('kind')!r})")
    cfg = ModelConfig.from_dict(trailer["config"])
    expected = param_shapes(cfg)
    if set(tensors) != set(expected):
        raise ValidationError(f"checkpoint {path} tensor names do not match its config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValidationError(
                f"checkpoint {path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"config requires {shape}"
            )
    return Model(cfg, tensors), trailer
