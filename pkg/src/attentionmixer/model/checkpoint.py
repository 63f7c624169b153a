"""Parameter checkpoints.

Layout: ``b"AMCK"`` | header length (u32 LE) | JSON header | float32 LE payload.
The header holds ``kind``, ``config`` and a ``params`` registry of
``{name, shape, offset}`` with offsets relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes

MAGIC = b"AMCK"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(state: dict[str, np.ndarray], config: dict, kind: str) -> bytes:
    registry, chunks, offset = [], [], 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        registry.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": 1, "kind": kind, "config": config, "params": registry, "payload_bytes": offset},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} at byte offset 0")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header at byte offset 4")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header at byte offset 8: {exc}") from exc
    base = 8 + n
    if len(buf) - base != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(buf) - base} bytes, header declares {header['payload_bytes']} "
            f"(byte offset {base})"
        )
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=base + entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return header, state


def save_state(path, state: dict[str, np.ndarray], config: dict, kind: str) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(state, config, kind))


def load_state(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def save_checkpoint(model, path) -> None:
    save_state(path, model.state_dict(), model.cfg.to_json(), "classifier")


def load_checkpoint(path, rng_seed: int = 0):
    """Rebuild a classifier from its checkpoint."""
    from .network import ModelVariantConfig, build_model

    header, state = load_state(path)
    if header.get("kind") != "classifier":
        raise CheckpointError(f"{path}: expected a classifier checkpoint, got {header.get('kind')!r}")
    model = build_model(ModelVariantConfig.from_json(header["config"]), rng_seed)
    model.load_state_dict(state, strict=True)
    return model


def load_into(model, path) -> None:
    """Strictly load a classifier checkpoint into an existing model."""
    _, state = load_state(path)
    model.load_state_dict(state, strict=True)


def save_encoder(encoder, path) -> None:
    save_state(path, encoder.state_dict(), encoder.cfg.to_json(), "encoder")


def load_encoder_state(path, cfg=None) -> dict[str, np.ndarray]:
    header, state = load_state(path)
    if header.get("kind") != "encoder":
        raise CheckpointError(f"{path}: expected an encoder checkpoint, got {header.get('kind')!r}")
    if cfg is not None and header["config"] != cfg.to_json():
        raise CheckpointError(
            f"{path}: encoder config {header['config']} does not match requested {cfg.to_json()}"
        )
    return state
