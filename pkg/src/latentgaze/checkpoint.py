"""Versioned checkpoint archives.

A checkpoint is a single ``.npz`` file holding named float arrays plus one
JSON structure entry, so it can be inspected with numpy and ``json`` alone,
without this package or torch.  Nested dicts/lists/tuples of tensors,
arrays, and plain scalars round-trip exactly; torch tensors come back as
numpy arrays.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_STRUCTURE_KEY = "__structure__"


class CheckpointError(ValueError):
    """Raised for unreadable or version-incompatible archives."""


def _encode(obj, arrays: dict):
    try:
        import torch

        if isinstance(obj, torch.Tensor):
            obj = obj.detach().cpu().numpy()
    except ImportError:  # pragma: no cover - torch is a hard dependency
        pass
    if isinstance(obj, np.ndarray):
        key = f"a{len(arrays)}"
        arrays[key] = obj
        return {"k": "array", "id": key}
    if isinstance(obj, np.generic):
        return {"k": "npscalar", "dtype": str(obj.dtype), "value": obj.item()}
    if isinstance(obj, dict):
        return {"k": "map", "items": [[_encode(k, arrays), _encode(v, arrays)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"k": "list" if isinstance(obj, list) else "tuple",
                "items": [_encode(v, arrays) for v in obj]}
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return {"k": "value", "value": obj}
    raise CheckpointError(f"cannot serialize object of type {type(obj).__name__}")


def _decode(node, arrays):
    kind = node["k"]
    if kind == "array":
        return arrays[node["id"]]
    if kind == "npscalar":
        return np.dtype(node["dtype"]).type(node["value"])
    if kind == "map":
        return {_decode(k, arrays): _decode(v, arrays) for k, v in node["items"]}
    if kind == "list":
        return [_decode(v, arrays) for v in node["items"]]
    if kind == "tuple":
        return tuple(_decode(v, arrays) for v in node["items"])
    if kind == "value":
        return node["value"]
    raise CheckpointError(f"unknown node kind {kind!r}")


def save_archive(path: Path | str, tree: dict) -> None:
    """Write a nested tree of arrays/tensors/scalars as one npz archive."""
    arrays: dict[str, np.ndarray] = {}
    structure = _encode({"format_version": FORMAT_VERSION, "tree": tree}, arrays)
    blob = np.frombuffer(json.dumps(structure).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Write through a handle so numpy keeps the exact filename.
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{_STRUCTURE_KEY: blob})


def load_archive(path: Path | str) -> dict:
    """Read an archive written by :func:`save_archive`."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as npz:
        if _STRUCTURE_KEY not in npz:
            raise CheckpointError(f"{path} is not a checkpoint archive (no structure entry)")
        structure = json.loads(bytes(npz[_STRUCTURE_KEY]).decode("utf-8"))
        arrays = {k: npz[k] for k in npz.files if k != _STRUCTURE_KEY}
    decoded = _decode(structure, arrays)
    version = decoded.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    return decoded["tree"]


def state_dict_to_tree(state_dict) -> dict:
    """Flatten a module state dict (named tensors) for archiving."""
    return {name: tensor for name, tensor in state_dict.items()}


def tree_to_state_dict(tree: dict):
    """Rebuild a torch-loadable state dict from decoded numpy arrays."""
    import torch

    return {name: torch.as_tensor(np.array(value)) for name, value in tree.items()}


def tree_to_tensors(obj):
    """Recursively convert decoded numpy arrays back to torch tensors."""
    import torch

    if isinstance(obj, np.ndarray):
        return torch.as_tensor(obj)
    if isinstance(obj, dict):
        return {k: tree_to_tensors(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [tree_to_tensors(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(tree_to_tensors(v) for v in obj)
    return obj
