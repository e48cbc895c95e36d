"""Binary tensor files and the checkpoint container.

Tensor file layout, little-endian throughout::

    b"CC3D" | u32 version | u32 dtype code | u32 ndim | u64 dims[ndim] | row-major payload
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import TensorFormatError

MAGIC = b"CC3D"
VERSION = 1
DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
CODE_OF = {v: k for k, v in DTYPE_CODES.items()}
_HEAD = struct.Struct("<4sIII")


def _as_numpy(arr) -> np.ndarray:
    if isinstance(arr, torch.Tensor):
        arr = arr.detach().cpu().numpy()
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    return arr


def encode_tensor(arr) -> bytes:
    arr = _as_numpy(arr)
    code = CODE_OF.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise TensorFormatError("truncated header")
    magic, version, code, ndim = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - off != count * dtype.itemsize:
        raise TensorFormatError(f"payload is {len(buf) - off} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).copy()


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"CC3DCKPT"


def save_checkpoint(path, modules: dict[str, dict[str, torch.Tensor]], meta: dict) -> str:
    """Write named tensor groups plus JSON metadata; returns the payload sha256."""
    payload = io.BytesIO()
    manifest = {}
    for group, tensors in modules.items():
        entries = []
        for name, t in tensors.items():
            blob = encode_tensor(t)
            entries.append({"name": name, "offset": payload.tell(), "length": len(blob),
                            "torch_dtype": str(t.dtype).removeprefix("torch.")})
            payload.write(blob)
        manifest[group] = entries
    body = payload.getvalue()
    digest = hashlib.sha256(body).hexdigest()
    header = json.dumps({"meta": meta, "manifest": manifest, "sha256": digest}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header + body)
    tmp.replace(path)
    return digest


def load_checkpoint(path) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise TensorFormatError("not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    if hashlib.sha256(body).hexdigest() != header["sha256"]:
        raise TensorFormatError("checkpoint content hash mismatch")
    modules = {}
    for group, entries in header["manifest"].items():
        tensors = {}
        for e in entries:
            arr = decode_tensor(body[e["offset"]:e["offset"] + e["length"]])
            tensors[e["name"]] = torch.from_numpy(arr).to(getattr(torch, e["torch_dtype"]))
        modules[group] = tensors
    return modules, header["meta"]


def flatten_optimizer(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    """Split an optimizer ``state_dict`` into tensors and JSON-able groups."""
    tensors = {}
    for idx, st in state["state"].items():
        for k, v in st.items():
            tensors[f"{idx}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    return tensors, {"param_groups": state["param_groups"]}


def unflatten_optimizer(tensors: dict[str, torch.Tensor], extra: dict) -> dict:
    state: dict = {}
    for key, v in tensors.items():
        idx, k = key.split(".", 1)
        state.setdefault(int(idx), {})[k] = v
    return {"state": state, "param_groups": extra["param_groups"]}
