"""Named-array checkpoint archive.

Everything (parameters, optimizer state, RNG streams, metadata) is stored as
named numpy arrays in one .npz file so that values round-trip exactly. JSON
metadata rides along as a uint8 byte array.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def _encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def _decode_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


def save_archive(
    path: str | Path,
    tensors: dict[str, torch.Tensor],
    metadata: dict | None = None,
) -> Path:
    """Write a name -> array archive; tensor values round-trip bitwise."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        "__format_version__": np.array(FORMAT_VERSION, dtype=np.int64),
    }
    if metadata is not None:
        arrays["__metadata__"] = _encode_json(metadata)
    for name, tensor in tensors.items():
        if name.startswith("__"):
            raise ValueError(f"reserved name {name!r}")
        arrays[name] = tensor.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with np.load(Path(path)) as data:
        if "__format_version__" not in data:
            raise ValueError(f"{path}: not a checkpoint archive (missing format version)")
        version = int(data["__format_version__"])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        metadata = _decode_json(data["__metadata__"]) if "__metadata__" in data else {}
        tensors = {
            name: torch.from_numpy(np.array(data[name]))
            for name in data.files
            if not name.startswith("__")
        }
    return tensors, metadata


def state_dict_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_state_dict_tensors(
    module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str
) -> None:
    state = {
        k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")
    }
    module.load_state_dict(state)
