"""Single-file checkpoints: magic, JSON header, raw little-endian tensor payload.

Layout::

    b"VXFCKPT\\0" | uint64 header length | header JSON (utf-8) | payload

The header carries ``format_version``, ``kind``, a free-form ``config`` dict,
``meta`` and a tensor table ``[{name, dtype, shape, offset, nbytes}]`` whose
offsets are relative to the payload start.
"""
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VXFCKPT\0"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


def save(path, tensors, *, kind, config=None, meta=None):
    """Write ``tensors`` (name -> tensor) with a JSON header to ``path``."""
    table = []
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        t = torch.as_tensor(tensor).detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "kind": kind, "config": config or {},
              "meta": meta or {}, "tensors": table}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)
    return path


def read_header(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, len(MAGIC) + 8 + n


def load(path, kind=None):
    """Return ``(tensors, header)``."""
    header, start = read_header(path)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path} holds a {header['kind']!r} checkpoint, expected {kind!r}")
    data = Path(path).read_bytes()[start:]
    tensors = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[entry["dtype"]])
    return tensors, header


def module_tensors(prefix, module):
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module, tensors, prefix):
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sub)
    return module


def optimizer_tensors(prefix, optimizer):
    """Flatten an optimizer state into tensors plus JSON-serializable groups."""
    sd = optimizer.state_dict()
    tensors = {}
    scalars = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if torch.is_tensor(value):
                tensors[f"{prefix}/{idx}/{key}"] = value
            else:
                scalars[f"{idx}/{key}"] = value
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def load_optimizer(optimizer, tensors, prefix, info):
    state = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        idx, key = name[len(prefix) + 1:].split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    for name, value in info.get("scalars", {}).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    optimizer.load_state_dict({"state": state, "param_groups": info["param_groups"]})
    return optimizer
