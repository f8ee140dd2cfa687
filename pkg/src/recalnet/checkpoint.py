"""Binary checkpoints.

Layout (little-endian)::

    magic      8 bytes  b"RECALCKP"
    version    u32
    digest     32 bytes sha256 of the canonical ModelConfig JSON
    cfg_len    u32, then cfg_len bytes of that JSON
    n_arrays   u32
    per array: name_len u32, name utf-8, ndim u32, ndim x u64 dims, f64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from recalnet.model import ModelConfig, SegNet, build_model

MAGIC = b"RECALCKP"
VERSION = 1


class DigestMismatch(ValueError):
    """Checkpoint config does not match what the caller expects."""


class CheckpointError(ValueError):
    pass


def state_arrays(model: SegNet) -> dict[str, np.ndarray]:
    arrays = {f"param:{n}": p.data for n, p in model.named_parameters()}
    arrays.update({f"buffer:{n}": b for n, b in model.named_buffers()})
    return arrays


def snapshot(model: SegNet) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in state_arrays(model).items()}


def restore(model: SegNet, arrays: dict[str, np.ndarray]) -> None:
    target = state_arrays(model)
    missing = set(target) - set(arrays)
    extra = set(arrays) - set(target)
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for k, dst in target.items():
        src = arrays[k]
        if src.shape != dst.shape:
            raise CheckpointError(f"{k}: shape {src.shape} != {dst.shape}")
        dst[...] = src


def save(path, config: ModelConfig, arrays: dict[str, np.ndarray]) -> None:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(config.digest()),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def save_model(path, model: SegNet) -> None:
    save(path, model.config, state_arrays(model))


def read(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = take(32).hex()
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(cfg_len)))
    if config.digest() != digest:
        raise CheckpointError(f"{path}: stored config does not match its digest")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return config, arrays


def load_model(path, expected: ModelConfig | None = None) -> SegNet:
    """Rebuild the stored network; refuse if ``expected`` has a different digest."""
    config, arrays = read(path)
    if expected is not None and expected.digest() != config.digest():
        raise DigestMismatch(f"{path}: config digest {config.digest()[:12]} does not match "
                              f"expected {expected.digest()[:12]}")
    model = build_model(config, init=False)
    restore(model, arrays)
    model.eval()
    return model
