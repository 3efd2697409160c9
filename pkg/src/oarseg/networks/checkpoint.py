"""Parameter checkpoint container.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
into the blob; floating tensors are stored as little-endian float32 and
integer tensors as little-endian int64.  Everything else (network specs,
optimizer hyper-parameters, counters, RNG state) lives in the manifest's
``meta`` object.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT_VERSION = 1

_DTYPES = {"float32": ("<f4", torch.float32), "int64": ("<i8", torch.int64)}


def _encode(t: torch.Tensor) -> tuple[str, np.ndarray]:
    t = t.detach().cpu()
    if t.is_floating_point():
        return "float32", t.to(torch.float32).numpy().astype("<f4")
    if t.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8, torch.bool):
        return "int64", t.to(torch.int64).numpy().astype("<i8")
    raise TypeError(f"cannot store tensor of dtype {t.dtype}")


def save_tensors(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, t in tensors.items():
            dtype, arr = _encode(t)
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return path


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob = (path / BLOB).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        np_dtype, torch_dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np_dtype[1:])).to(torch_dtype)
    return out, manifest["meta"]


def _split_optimizer(opt_state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors, scalars = {}, {}
    for idx, slots in opt_state["state"].items():
        for k, v in slots.items():
            if torch.is_tensor(v):
                tensors[f"{idx}/{k}"] = v
            else:
                scalars[f"{idx}/{k}"] = v
    return tensors, {"param_groups": opt_state["param_groups"], "scalars": scalars}


def _join_optimizer(tensors: dict[str, torch.Tensor], info: dict, like: dict) -> dict:
    state: dict = {}
    for key, v in tensors.items():
        idx, k = key.split("/", 1)
        state.setdefault(int(idx), {})[k] = v
    for key, v in info["scalars"].items():
        idx, k = key.split("/", 1)
        state.setdefault(int(idx), {})[k] = v
    # restore original slot dtypes (Adam's ``step`` is a float32 scalar tensor already)
    for idx, slots in like.get("state", {}).items():
        for k, v in slots.items():
            if torch.is_tensor(v) and int(idx) in state and k in state[int(idx)]:
                state[int(idx)][k] = state[int(idx)][k].to(v.dtype)
    return {"state": state, "param_groups": info["param_groups"]}


def encode_rng_state(state: torch.Tensor) -> str:
    return base64.b64encode(state.numpy().tobytes()).decode("ascii")


def decode_rng_state(text: str) -> torch.Tensor:
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def save_checkpoint(path, modules: dict[str, nn.Module], optimizers: dict | None = None, meta: dict | None = None) -> Path:
    """Write module parameters, optimizer slots and the torch RNG state."""
    tensors: dict[str, torch.Tensor] = {}
    for name, m in modules.items():
        for k, v in m.state_dict().items():
            tensors[f"model/{name}/{k}"] = v
    opt_info = {}
    for name, opt in (optimizers or {}).items():
        t, info = _split_optimizer(opt.state_dict())
        tensors.update({f"optim/{name}/{k}": v for k, v in t.items()})
        opt_info[name] = info
    full_meta = dict(meta or {})
    full_meta["optimizers"] = opt_info
    full_meta["torch_rng"] = encode_rng_state(torch.get_rng_state())
    return save_tensors(path, tensors, full_meta)


def load_checkpoint(path, modules: dict[str, nn.Module], optimizers: dict | None = None, restore_rng: bool = True) -> dict:
    """Load into existing modules/optimizers in place; returns the manifest meta."""
    tensors, meta = load_tensors(path)
    for name, m in modules.items():
        prefix = f"model/{name}/"
        sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        if not sd:
            raise KeyError(f"checkpoint {path} has no parameters for module {name!r}")
        m.load_state_dict(sd)
    for name, opt in (optimizers or {}).items():
        prefix = f"optim/{name}/"
        t = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        opt.load_state_dict(_join_optimizer(t, meta["optimizers"][name], opt.state_dict()))
    if restore_rng and "torch_rng" in meta:
        torch.set_rng_state(decode_rng_state(meta["torch_rng"]))
    return meta
