"""Model checkpoints: a flat float32 blob plus a JSON manifest of tensor slots."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .network import RefineModel


def save_checkpoint(model: RefineModel, path) -> None:
    """Write ``path`` (raw little-endian float32) and ``path.json`` (layout)."""
    path = Path(path)
    slots, chunks, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4").ravel()
        slots.append({"name": name, "shape": list(p.shape), "offset": offset, "size": int(arr.size)})
        chunks.append(arr)
        offset += int(arr.size)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    path.write_bytes(blob.tobytes())
    meta = {"format": "shaperefine-checkpoint", "version": 1, "dtype": "float32",
            "seed": model.seed, "encoder_size": list(model.encoder_size), "tensors": slots}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_checkpoint(path) -> RefineModel:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("format") != "shaperefine-checkpoint":
        raise ValueError("%s is not a checkpoint manifest" % (str(path) + ".json"))
    blob = np.frombuffer(path.read_bytes(), dtype="<f4")
    model = RefineModel(seed=meta["seed"], encoder_size=tuple(meta["encoder_size"]))
    state = {}
    for slot in meta["tensors"]:
        arr = blob[slot["offset"]:slot["offset"] + slot["size"]]
        if arr.size != slot["size"]:
            raise ValueError("checkpoint blob is truncated at %s" % slot["name"])
        state[slot["name"]] = torch.from_numpy(arr.reshape(slot["shape"]).copy())
    model.load_state_dict(state)
    return model
