"""Byte-stable checkpoint files with integrity checking.

Layout: magic, little-endian uint32 header length, canonical-JSON header
(config, vocabulary hash, parameter names and shapes in saved order), raw
float64 parameter payload, sha256 digest of everything before it.  Saving
the same state twice yields identical bytes; any flipped byte fails the
digest check.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, IntegrityError
from .tensor import Tensor

MAGIC = b"RGTCKPT1"


def save_checkpoint(path, params: dict[str, Tensor], config: dict, vocab_hash: str) -> None:
    names = sorted(params)
    header = {
        "config": config,
        "vocab_sha256": vocab_hash,
        "params": [[name, list(params[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(params[name].data, dtype="<f8").tobytes() for name in names
    )
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload
    digest = hashlib.sha256(body).digest()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body + digest)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, name -> array); raises IntegrityError on corruption."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path} failed its integrity check (corrupt or tampered)")
    (header_len,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(body[header_start:header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from exc
    offset = header_start + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise IntegrityError(f"{path}: truncated payload at parameter {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise IntegrityError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    return header, arrays


def _diff_configs(saved: dict, expected: dict, prefix: str = "") -> str | None:
    for key in sorted(set(saved) | set(expected)):
        name = f"{prefix}{key}"
        if key not in saved or key not in expected:
            return name
        a, b = saved[key], expected[key]
        if isinstance(a, dict) and isinstance(b, dict):
            hit = _diff_configs(a, b, prefix=f"{name}.")
            if hit:
                return hit
        elif isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
            if list(a) != list(b):
                return name
        elif a != b:
            return name
    return None


def restore_params(
    params: dict[str, Tensor],
    header: dict,
    arrays: dict[str, np.ndarray],
    expected_config: dict,
    expected_vocab_hash: str,
) -> None:
    """Copy saved arrays into live parameters after config/vocab checks."""
    if header.get("vocab_sha256") != expected_vocab_hash:
        raise IntegrityError(
            f"vocabulary hash mismatch: checkpoint has {header.get('vocab_sha256')}, "
            f"current vocabulary is {expected_vocab_hash}"
        )
    differing = _diff_configs(header.get("config", {}), expected_config)
    if differing is not None:
        raise ConfigError(f"checkpoint config differs at field '{differing}'")
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise ConfigError(f"parameter name mismatch: missing {missing}, unexpected {extra}")
    for name, tensor in params.items():
        if tuple(tensor.shape) != arrays[name].shape:
            raise ConfigError(
                f"parameter {name} has shape {tuple(tensor.shape)}, checkpoint {arrays[name].shape}"
            )
        tensor.data[...] = arrays[name]
