"""Checkpoint archive: an ``.npz`` mapping parameter path to a little-endian array,
plus a JSON header (format version, config digest, full run config, extras).

Optimizer moments are stored under ``optim/<m|v>/<param path>``.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .config import ArchitectureConfig, config_digest, model_config_from_dict, to_dict
from .errors import ConfigError

FORMAT_VERSION = 1
_HEADER = "__header__"


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, model, extra: dict | None = None, optimizer_state: dict | None = None) -> Path:
    """Write ``model`` state (parameters and buffers) to ``path``; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: _le(arr) for name, arr in model.state_dict().items()}
    if optimizer_state:
        arrays["optim/step"] = np.array(optimizer_state["step"], dtype="<i8")
        for kind in ("m", "v"):
            for name, arr in optimizer_state[kind].items():
                arrays[f"optim/{kind}/{name}"] = _le(arr)
    header = {"format_version": FORMAT_VERSION, "config_digest": config_digest(model.config),
              "model": to_dict(model.config), "extra": extra or {}}
    arrays[_HEADER] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    # write through a buffer so a failed save never leaves a truncated file behind
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            with zf.open(name + ".npy", "w") as fh:
                np.lib.format.write_array(fh, arrays[name], allow_pickle=False)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict | None]:
    """Return ``(header, model_state, optimizer_state_or_None)``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if _HEADER not in arrays:
        raise ConfigError(f"{path}: not a checkpoint (missing header)")
    header = json.loads(arrays.pop(_HEADER).tobytes().decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format_version')}")
    state = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
    optim = None
    if "optim/step" in arrays:
        optim = {"step": int(arrays["optim/step"]), "m": {}, "v": {}}
        for k, v in arrays.items():
            for kind in ("m", "v"):
                if k.startswith(f"optim/{kind}/"):
                    optim[kind][k[len(f"optim/{kind}/"):]] = v
    return header, state, optim


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model stored at ``path``; returns ``(model, header, optimizer_state)``."""
    from .model import build

    header, state, optim = read_checkpoint(path)
    cfg: ArchitectureConfig = model_config_from_dict(header["model"])
    if config_digest(cfg) != header["config_digest"]:
        raise ConfigError(f"{path}: config digest mismatch")
    model = build(cfg, seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model, header, optim
