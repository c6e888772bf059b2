"""Binary file formats: mel-spectrogram files and the checkpoint container.

Mel file layout (all little-endian)::

    b"MELSPEC1" | u32 n_frames | u32 n_bands | f64 frame_shift | f32[n_frames * n_bands]

Checkpoint layout::

    b"PSCKPT01" | u32 header_len | header (UTF-8 JSON) | f32 payload

The header records ``format_version``, ``component``, ``config`` (verbatim
echo), ``config_hash``, ``epoch``, ``rng`` state, free-form ``extra`` data and
a ``groups`` table mapping each named parameter group to its tensors
(``name``, ``shape``, ``offset`` and ``count`` in f32 elements of the payload).
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import MelSpectrogram
from .errors import ValidationError

MEL_MAGIC = b"MELSPEC1"
CKPT_MAGIC = b"PSCKPT01"
CKPT_VERSION = 1


def mel_to_bytes(mel: MelSpectrogram) -> bytes:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    head = MEL_MAGIC + struct.pack("<IId", frames.shape[0], frames.shape[1], float(mel.frame_shift))
    return head + frames.tobytes()


def mel_from_bytes(blob: bytes) -> MelSpectrogram:
    if blob[:8] != MEL_MAGIC:
        raise ValidationError("not a mel file (bad magic)")
    n, bands, shift = struct.unpack_from("<IId", blob, 8)
    body = blob[24:]
    if len(body) != 4 * n * bands:
        raise ValidationError(f"mel file truncated: expected {4 * n * bands} payload bytes, got {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(n, bands).astype(np.float32)
    return MelSpectrogram(frames, shift)


def save_mel(path, mel: MelSpectrogram):
    Path(path).write_bytes(mel_to_bytes(mel))


def load_mel(path) -> MelSpectrogram:
    return mel_from_bytes(Path(path).read_bytes())


@dataclass
class Checkpoint:
    component: str
    groups: dict
    config: dict = field(default_factory=dict)
    epoch: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    config_hash: str = ""


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return the sha256 of the file contents."""
    table: dict[str, list] = {}
    chunks = []
    offset = 0
    for gname, tensors in ckpt.groups.items():
        entries = []
        for tname, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            entries.append({"name": tname, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            chunks.append(arr.tobytes())
            offset += arr.size
        table[gname] = entries
    header = {
        "format_version": CKPT_VERSION,
        "component": ckpt.component,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "groups": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    if header.get("format_version") != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = np.frombuffer(blob[12 + hlen:], dtype="<f4")
    groups = {}
    for gname, entries in header["groups"].items():
        groups[gname] = {
            e["name"]: payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float32)
            for e in entries
        }
    return Checkpoint(header["component"], groups, header["config"], header["epoch"], header["rng"],
                      header["extra"], header.get("config_hash", ""))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_torch_rng(state) -> str:
    return base64.b64encode(bytes(state.numpy().tobytes())).decode()


def decode_torch_rng(text: str):
    import torch
    return torch.frombuffer(bytearray(base64.b64decode(text)), dtype=torch.uint8).clone()


def jsonable(obj: Any):
    return json.loads(json.dumps(obj))
