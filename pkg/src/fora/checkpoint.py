"""Binary tensor checkpoints with a JSON sidecar manifest.

File layout, all integers little-endian::

    magic      8 bytes   b"FORACKP1"
    hlen       uint32    length of the header in bytes
    header     hlen bytes of UTF-8 JSON: {"kind", "config", "tensors": [[name, rows, cols], ...], "meta"}
    payload    for each tensor in header order, rows*cols float64 values, row-major ('<f8')

The sidecar ``<file>.json`` repeats kind, config, tensor names and shapes
plus the SHA-256 of the binary file so a reader can check integrity without
parsing the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .adapter import AdapterPair, AdapterSet
from .exceptions import ConfigError, ShapeError
from .model import BLOCK_TENSORS, BaseWeights, ModelConfig

MAGIC = b"FORACKP1"


def _pack(kind: str, config: ModelConfig, tensors: list[tuple[str, np.ndarray]], meta: dict) -> bytes:
    table = []
    for name, arr in tensors:
        if arr.ndim != 2:
            raise ShapeError(f"tensor {name!r} must be 2-D, got {arr.shape}")
        table.append([name, int(arr.shape[0]), int(arr.shape[1])])
    header = json.dumps(
        {"kind": kind, "config": asdict(config), "tensors": table, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    parts.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    return b"".join(parts)


def _unpack(blob: bytes):
    if blob[:8] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise ConfigError("checkpoint truncated before the header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise ConfigError("checkpoint truncated inside the header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"checkpoint header is not valid JSON: {exc}") from exc
    offset = 12 + hlen
    tensors = {}
    for name, rows, cols in header["tensors"]:
        n = rows * cols * 8
        chunk = blob[offset : offset + n]
        if len(chunk) != n:
            raise ConfigError(f"checkpoint truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(rows, cols).astype(np.float64)
        offset += n
    if offset != len(blob):
        raise ConfigError("trailing bytes after the last tensor")
    return header, tensors


def serialize_weights(weights: BaseWeights) -> bytes:
    return _pack("base", weights.config, list(weights.named_tensors()), {})


def weights_digest(weights: BaseWeights) -> str:
    """SHA-256 of the serialized weights; the base-freeze fingerprint."""
    return hashlib.sha256(serialize_weights(weights)).hexdigest()


def _write(path, blob: bytes, header_extra: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    header, _ = _unpack(blob)
    manifest = {
        "file": path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "kind": header["kind"],
        "config": header["config"],
        "tensors": [{"name": n, "shape": [r, c]} for n, r, c in header["tensors"]],
        **header_extra,
    }
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def save_weights(path, weights: BaseWeights) -> Path:
    return _write(path, serialize_weights(weights), {})


def load_weights(path) -> BaseWeights:
    header, tensors = _unpack(Path(path).read_bytes())
    if header["kind"] != "base":
        raise ConfigError(f"{path} holds {header['kind']!r} tensors, not base weights")
    config = ModelConfig(**header["config"])
    layers = [{m: tensors[f"layers.{i}.{m}"] for m in BLOCK_TENSORS} for i in range(config.n_layers)]
    return BaseWeights(config, tensors["embed"], layers, tensors["head"])


def save_adapters(path, config: ModelConfig, adapters: AdapterSet, selection=None, hyper: dict | None = None) -> Path:
    """Adapter factors plus selection and training hyperparameters."""
    tensors, slots = [], []
    for slot in sorted(adapters):
        p = adapters[slot]
        layer, module = slot
        tensors.append((f"layers.{layer}.{module}.a", p.a))
        tensors.append((f"layers.{layer}.{module}.b", p.b))
        slots.append({"layer": layer, "module": module, "scaling": p.scaling, "constrained": p.constrained})
    sel = None
    if selection is not None:
        sel = {
            "layers": list(getattr(selection, "layers", selection)),
            "k": getattr(selection, "k", len(list(getattr(selection, "layers", selection)))),
            "n_batches": getattr(selection, "n_batches", 0),
            "seed": getattr(selection, "seed", 0),
            "variant": getattr(selection, "variant", "empirical"),
        }
    meta = {"slots": slots, "selection": sel, "hyper": hyper or {}}
    return _write(path, _pack("adapters", config, tensors, meta), {"selection": sel, "hyper": hyper or {}})


def load_adapters(path) -> tuple[AdapterSet, dict]:
    header, tensors = _unpack(Path(path).read_bytes())
    if header["kind"] != "adapters":
        raise ConfigError(f"{path} holds {header['kind']!r} tensors, not adapters")
    pairs = {}
    for s in header["meta"]["slots"]:
        slot = (int(s["layer"]), s["module"])
        a = tensors[f"layers.{slot[0]}.{slot[1]}.a"]
        b = tensors[f"layers.{slot[0]}.{slot[1]}.b"]
        pairs[slot] = AdapterPair(a, b, float(s["scaling"]), slot, bool(s["constrained"]))
    layers = tuple(sorted({s[0] for s in pairs}))
    return AdapterSet(pairs, layers), header["meta"]
