"""Checkpoint envelope: magic, JSON header, packed little-endian float32 payload.

Layout::

    b"CLCK" | u32 header_len | header (UTF-8 JSON) | payload

The header lists tensor names, shapes and payload offsets plus free-form
metadata; ``digest`` is the SHA-256 of the payload bytes.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ._validation import CheckpointError

MAGIC = b"CLCK"
VERSION = 1


def pack(tensors, meta):
    """Serialize ``{name: array}`` and ``meta`` to bytes. Arrays are cast to float32."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {
        "version": VERSION,
        "dtype": "float32-le",
        "tensors": entries,
        "meta": meta,
        "digest": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def unpack(blob):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (head_len,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    payload = blob[8 + head_len :]
    if hashlib.sha256(payload).hexdigest() != header["digest"]:
        raise CheckpointError("payload digest mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + size > flat.size:
            raise CheckpointError(f"tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = flat[start : start + size].reshape(entry["shape"]).copy()
    return tensors, header["meta"], header["digest"]


def save(path, tensors, meta):
    """Write a checkpoint file and return the SHA-256 of the whole file."""
    blob = pack(tensors, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    return unpack(Path(path).read_bytes())


def state_dict_to_numpy(module):
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_numpy_state(module, tensors):
    import torch

    own = module.state_dict()
    missing = set(own) - set(tensors)
    extra = set(tensors) - set(own)
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, arr in tensors.items():
        if tuple(own[name].shape) != tuple(arr.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} != model {tuple(own[name].shape)}")
    module.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in tensors.items()})


def weights_digest(module):
    h = hashlib.sha256()
    for name, arr in sorted(state_dict_to_numpy(module).items()):
        h.update(name.encode())
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()
