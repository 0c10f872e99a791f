"""Checkpoint archive: raw little-endian tensor payloads plus a JSON manifest.

A checkpoint is a ZIP (stored, not compressed) containing ``manifest.json``
and one ``<index>.bin`` per parameter. The manifest records the format
version, model spec, fusion spec, dtype and the path/shape/file of every
tensor, so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["FORMAT_VERSION", "IncompatibleCheckpointError", "save_checkpoint",
           "load_checkpoint", "checkpoint_fingerprint"]

FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class IncompatibleCheckpointError(RuntimeError):
    """Checkpoint cannot serve the requested model/fusion configuration."""


def save_checkpoint(path, params: dict[str, Tensor], model_spec,
                    fusion_spec=None, extra: dict | None = None) -> None:
    """Write parameters + specs to ``path``.

    ``model_spec``/``fusion_spec`` may be plain dicts or objects with a
    ``to_dict`` method.
    """
    if hasattr(model_spec, "to_dict"):
        model_spec = model_spec.to_dict()
    if fusion_spec is not None and hasattr(fusion_spec, "to_dict"):
        fusion_spec = fusion_spec.to_dict()
    entries = []
    payloads = []
    for i, (name, tensor) in enumerate(sorted(params.items())):
        dtype_name = _DTYPE_NAMES[np.dtype(tensor.data.dtype)]
        fname = f"{i}.bin"
        entries.append({"path": name, "shape": list(tensor.shape),
                        "dtype": dtype_name, "file": fname})
        payloads.append((fname, tensor.data.astype(_DTYPES[dtype_name]).tobytes()))
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_spec": model_spec,
        "fusion_spec": fusion_spec,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for fname, blob in payloads:
            zf.writestr(fname, blob)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint; returns (params, manifest)."""
    path = Path(path)
    if not path.exists():
        raise IncompatibleCheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise IncompatibleCheckpointError(
                    f"unsupported checkpoint format {manifest.get('format_version')}")
            params: dict[str, Tensor] = {}
            for entry in manifest["tensors"]:
                raw = zf.read(entry["file"])
                arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
                arr = arr.reshape(entry["shape"]).astype(
                    np.float32 if entry["dtype"] == "f32" else np.float64)
                params[entry["path"]] = Tensor(arr, requires_grad=True)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise IncompatibleCheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return params, manifest


def checkpoint_fingerprint(path) -> str:
    """SHA-256 of the checkpoint file, used to key feature caches."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
