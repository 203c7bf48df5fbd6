"""Model checkpoint container.

Layout: 4-byte magic b"AFC1", little-endian uint32 JSON length, UTF-8
JSON metadata (model kind, config, seed, ordered parameter manifest),
then each parameter's raw float32 little-endian payload concatenated in
manifest order.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import BadHeaderError, BadPayloadError

MAGIC = b"AFC1"


def save_checkpoint(path, kind: str, config: dict, seed: int, state_dict):
    params = []
    payload = b""
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        params.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    meta = {"kind": kind, "config": config, "seed": seed, "params": params}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_checkpoint(path):
    """Returns (meta dict, {param name: float32 array})."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadHeaderError(f"{path}: not a checkpoint file")
    blob_len = struct.unpack("<I", raw[4:8])[0]
    if len(raw) < 8 + blob_len:
        raise BadPayloadError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[8 : 8 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadHeaderError(f"{path}: unreadable metadata: {exc}") from exc
    offset = 8 + blob_len
    arrays = {}
    for entry in meta["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise BadPayloadError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += nbytes
    return meta, arrays


def load_into_module(module: torch.nn.Module, arrays: dict):
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    module.load_state_dict(state)
    return module


def write_trace_csv(path, trace, column: str = "loss"):
    lines = [f"step,{column}"]
    lines += [f"{i},{v:.8g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")
