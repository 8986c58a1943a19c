"""Versioned checkpoint archives: config JSON plus named weight arrays.

A checkpoint is a zip holding `meta.json` (format version, kind, config, array
manifest) and `arrays.npz`. Weights round-trip bit-exactly, so loading a
checkpoint reproduces synthesis outputs exactly on the same platform.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "save_module",
    "load_module_arrays",
]

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict,
                    arrays: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "arrays": {name: {"dtype": str(a.dtype), "shape": list(a.shape)} for name, a in arrays.items()},
    }
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        zf.writestr("arrays.npz", buf.getvalue())
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None
                    ) -> tuple[str, dict, dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')}")
        with np.load(io.BytesIO(zf.read("arrays.npz"))) as npz:
            arrays = {name: npz[name] for name in npz.files}
    kind = meta["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"expected {expect_kind!r} checkpoint, found {kind!r}")
    for name, info in meta["arrays"].items():
        if name not in arrays:
            raise CheckpointError(f"missing array {name!r} in {path}")
        if list(arrays[name].shape) != info["shape"]:
            raise CheckpointError(f"array {name!r} shape mismatch in {path}")
    return kind, meta["config"], arrays, meta.get("extra", {})


def save_module(path: str | Path, kind: str, config: dict, module: nn.Module,
                extra: dict | None = None) -> Path:
    arrays = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    return save_checkpoint(path, kind, config, arrays, extra=extra)


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.array(a)) for name, a in arrays.items()}
    module.load_state_dict(state)
