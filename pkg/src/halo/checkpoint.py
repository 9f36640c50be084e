"""Versioned checkpoint container.

Layout: 8-byte magic, u32 version, u64 header length, a JSON header with
sorted keys, then the raw little-endian array payloads in header order. No
timestamps or pickles are involved, so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

MAGIC = b"HALOCKPT"
VERSION = 1


def _to_array(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(np.asarray(t))


def write_container(path, header: dict, arrays: dict[str, Any]) -> None:
    entries, payload, offset = [], [], 0
    for name in sorted(arrays):
        arr = _to_array(arrays[name])
        data = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        payload.append(data)
        offset += len(data)
    head = json.dumps({"meta": header, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for data in payload:
            f.write(data)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    head = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in head["arrays"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return head["meta"], arrays


@dataclass
class Checkpoint:
    """Everything needed to rebuild a field and resume its optimiser."""

    kind: str  # "point" or "ray"
    arch: dict
    params: dict[str, np.ndarray]
    iteration: int = 0
    bounds: Optional[dict] = None
    encoding: Optional[dict] = None
    optimizer: Optional[dict] = None  # {"meta": ..., "arrays": {...}}
    rng_state: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        opt_meta = None
        if self.optimizer is not None:
            opt_meta = self.optimizer["meta"]
            arrays.update({f"optim/{k}": v for k, v in self.optimizer["arrays"].items()})
        if self.rng_state is not None:
            arrays["rng_state"] = self.rng_state
        header = dict(kind=self.kind, arch=self.arch, iteration=self.iteration, bounds=self.bounds,
                      encoding=self.encoding, optimizer=opt_meta, extra=self.extra)
        write_container(path, header, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, arrays = read_container(path)
        params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
        optim = None
        if meta.get("optimizer") is not None:
            optim = {"meta": meta["optimizer"],
                     "arrays": {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}}
        return cls(kind=meta["kind"], arch=meta["arch"], params=params, iteration=meta["iteration"],
                   bounds=meta.get("bounds"), encoding=meta.get("encoding"), optimizer=optim,
                   rng_state=arrays.get("rng_state"), extra=meta.get("extra") or {})


def module_params(net: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: _to_array(v) for k, v in net.state_dict().items()}


def load_module_params(net: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})


def adam_state(opt: torch.optim.Optimizer, net: torch.nn.Module) -> dict:
    """Serialise Adam moments keyed by parameter name."""
    names = {id(p): n for n, p in net.named_parameters()}
    arrays, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            arrays[f"{n}/exp_avg"] = _to_array(st["exp_avg"])
            arrays[f"{n}/exp_avg_sq"] = _to_array(st["exp_avg_sq"])
            steps[n] = float(st["step"])
    lrs = [g["lr"] for g in opt.param_groups]
    return {"meta": {"steps": steps, "lrs": lrs}, "arrays": arrays}


def restore_adam_state(opt: torch.optim.Optimizer, net: torch.nn.Module, state: dict) -> None:
    params = dict(net.named_parameters())
    for n, step in state["meta"]["steps"].items():
        p = params[n]
        opt.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(np.array(state["arrays"][f"{n}/exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(state["arrays"][f"{n}/exp_avg_sq"])),
        }
    for g, lr in zip(opt.param_groups, state["meta"]["lrs"]):
        g["lr"] = lr
