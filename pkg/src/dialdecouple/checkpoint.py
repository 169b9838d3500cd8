"""Model archive: JSON header plus raw little-endian float32 parameter buffers.

Layout (a zip file)::

    header.json   {"format", "model_config", "vocab", "params": [{name, shape, offset, nbytes}], ...}
    tensors.bin   concatenated '<f4' buffers in header order
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .data import Vocabulary
from .layers import ModelConfig
from .model import DecouplingModel

FORMAT = "dialdecouple-checkpoint-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: DecouplingModel, vocab: Vocabulary,
                    extra: Optional[dict[str, Any]] = None) -> None:
    params, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        buf = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        params.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format": FORMAT,
        "model_config": model.config.to_dict(),
        "vocab": vocab.to_list(),
        "params": params,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1))
        zf.writestr("tensors.bin", b"".join(chunks))


def read_header(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_checkpoint(path: str | Path, expect: Optional[dict] = None):
    """Return ``(model, vocab, header)``.

    ``expect`` maps model-config fields to required values; a mismatch raises.
    """
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        header = json.loads(zf.read("header.json"))
        blob = zf.read("tensors.bin")
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")
    config = ModelConfig.from_dict(header["model_config"])
    for key, value in (expect or {}).items():
        if getattr(config, key) != value:
            raise CheckpointError(f"config mismatch on {key}: checkpoint has "
                                  f"{getattr(config, key)!r}, expected {value!r}")
    model = DecouplingModel(config)
    state = {}
    for p in header["params"]:
        arr = np.frombuffer(blob, dtype="<f4", count=p["nbytes"] // 4, offset=p["offset"])
        state[p["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(p["shape"]))
    model.load_state_dict(state)
    model.eval()
    return model, Vocabulary(header["vocab"]), header
