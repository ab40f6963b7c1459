"""
Checkpoint Archives

A checkpoint is a flat `.npz` archive of named float64 arrays. Parameter names
follow the `module.layer.param` convention produced by `Module.named_parameters`
(e.g. `detector.encoder_layers.0.self_attn.w_q.weight`). One extra entry,
`__header__`, holds a UTF-8 JSON document with the format version and any
run metadata (resolved config, training state scalars, metrics history).
"""

from __future__ import annotations

import json
import logging
import os
import zipfile
from pathlib import Path

import numpy as np

from src.errors import CheckpointError
from src.models.layers import Module

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def module_state(module: Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Copy every parameter of `module` into a name -> array mapping."""
    return {f"{prefix}{name}": p.data.copy() for name, p in module.named_parameters().items()}


def load_module_state(module: Module, arrays: dict[str, np.ndarray], prefix: str = "",
                      strict: bool = True) -> None:
    """
    Overwrite the parameters of `module` in place.

    Raises
    ------
    CheckpointError
        If `strict` and a parameter is missing, or if a shape differs.
    """
    for name, param in module.named_parameters().items():
        key = f"{prefix}{name}"
        if key not in arrays:
            if strict:
                raise CheckpointError(f"checkpoint has no parameter {key!r}")
            continue
        value = np.asarray(arrays[key], dtype=np.float64)
        if value.shape != param.shape:
            raise CheckpointError(f"{key}: checkpoint shape {value.shape} != model shape {param.shape}")
        param.data[...] = value


def save_checkpoint(path: Path | str, arrays: dict[str, np.ndarray], header: dict) -> Path:
    """
    Write arrays plus a JSON header atomically (temporary file, then rename).

    Returns
    -------
    Path
        The written checkpoint path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.asarray(value, dtype=np.float64) for name, value in arrays.items()}
    document = json.dumps({"format_version": FORMAT_VERSION, **header}, sort_keys=True)
    payload[HEADER_KEY] = np.frombuffer(document.encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d arrays)", path, len(arrays))
    return path


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """
    Read a checkpoint written by `save_checkpoint`.

    Returns
    -------
    arrays : dict
        Name -> float64 array.
    header : dict
        The decoded JSON header.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    if HEADER_KEY not in arrays:
        raise CheckpointError(f"{path}: missing {HEADER_KEY} entry")
    header = json.loads(arrays.pop(HEADER_KEY).tobytes().decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version!r}")
    return arrays, header


__all__ = [
    "FORMAT_VERSION",
    "module_state",
    "load_module_state",
    "save_checkpoint",
    "load_checkpoint",
]
