"""Checkpoint container: magic, format version, a torch-serialized payload and
a CRC32 trailer.

The payload holds one weight blob per module role (``f_s``, ``g_d``,
``g_a``, ``h_a``, ``g_s``, ``h_s``, ``prior``, ``scaling_factors``), the
SA/RA gate weights pulled out of those blobs under ``sa_ra``, the config
snapshot, the step counter, RNG state and the 16-bit coding tables of the
hyper-latent prior, so a checkpoint loads without any external config.
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import CheckpointVersionError, CorruptedStreamError
from .layers import ChannelGate

MAGIC = b"HDJCKPT\0"
FORMAT_VERSION = 1
_HEAD = struct.Struct(">8sH")
_CRC = struct.Struct(">I")


def _roles(model) -> dict:
    c = model.compressor
    return {"f_s": model.f_s, "g_d": model.g_d, "g_a": c.g_a, "h_a": c.h_a, "g_s": c.g_s,
            "h_s": c.h_s, "prior": c.prior, "scaling_factors": c.scaling}


def _gate_prefixes(module) -> list[str]:
    return [name + "." for name, m in module.named_modules() if isinstance(m, ChannelGate)]


def split_state(model) -> dict:
    blobs = {"sa_ra": {}}
    for role, m in _roles(model).items():
        prefixes = _gate_prefixes(m)
        blob = {}
        for name, t in m.state_dict().items():
            if any(name.startswith(p) for p in prefixes):
                blobs["sa_ra"][f"{role}.{name}"] = t.clone()
            else:
                blob[name] = t.clone()
        blobs[role] = blob
    return blobs


def merge_state(model, blobs: dict) -> None:
    gates = {}
    for key, t in blobs["sa_ra"].items():
        role, name = key.split(".", 1)
        gates.setdefault(role, {})[name] = t
    for role, m in _roles(model).items():
        m.load_state_dict({**blobs[role], **gates.get(role, {})}, strict=True)


def encode_checkpoint(model, step: int = 0, rng_state=None, extra: dict | None = None) -> bytes:
    payload = {
        "kind": "hdjscc",
        "config": model.cfg.to_dict(),
        "weights": split_state(model),
        "step": int(step),
        "rng_state": rng_state,
        "cdf_tables": np.asarray(model.tables(), dtype=np.int32),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = _HEAD.pack(MAGIC, FORMAT_VERSION) + buf.getvalue()
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> dict:
    if len(data) < _HEAD.size + _CRC.size:
        raise CorruptedStreamError("checkpoint too short")
    magic, version = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CorruptedStreamError("not an h-DJSCC checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise CorruptedStreamError("checkpoint CRC mismatch")
    return torch.load(io.BytesIO(data[_HEAD.size:-_CRC.size]), weights_only=False)


def save_checkpoint(path, model, step: int = 0, rng_state=None, extra: dict | None = None) -> int:
    data = encode_checkpoint(model, step, rng_state, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return len(data)


def load_checkpoint(path):
    """Return ``(model, payload)``; the model is rebuilt from the stored config."""
    from .pipeline import HDJSCC

    payload = decode_checkpoint(Path(path).read_bytes())
    model = HDJSCC(ExperimentConfig.from_dict(payload["config"]))
    merge_state(model, payload["weights"])
    model.set_tables(payload["cdf_tables"])
    model.eval()
    return model, payload
