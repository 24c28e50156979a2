"""Single-file checkpoints.

Layout (a safetensors file):

* an 8-byte little-endian header length, then a JSON header listing every
  tensor blob (dtype, shape, byte offsets) plus a ``__metadata__`` map;
* the raw tensor blobs.

``__metadata__`` holds a single key, ``ncl_iml``, whose value is a JSON
object with ``format`` (``ncl-iml-checkpoint``), ``version``, ``config``
(the training config) and ``state`` (step, epoch, best record, RNG state).
One key keeps the file byte-reproducible: safetensors writes multi-key
metadata in hash-map order, which varies between processes. Tensor names
are ``model/<state_dict key>`` and ``optim/<param name>/momentum_buffer``.
"""
from __future__ import annotations

import base64
import json

import torch
from safetensors import safe_open
from safetensors.torch import save_file

FORMAT = "ncl-iml-checkpoint"
VERSION = 1
META_KEY = "ncl_iml"


def save_checkpoint(path, model, optimizer=None, config: dict | None = None, state: dict | None = None) -> None:
    tensors = {f"model/{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    tensors[f"optim/{names[id(p)]}/momentum_buffer"] = buf.detach().contiguous().clone()
    state = dict(state or {})
    state["torch_rng"] = base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")
    meta = {"format": FORMAT, "version": VERSION, "config": config or {}, "state": state}
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def read_checkpoint(path) -> tuple[dict, dict, dict[str, torch.Tensor]]:
    """Return (config, state, tensors) from a checkpoint file."""
    with safe_open(str(path), framework="pt") as fh:
        raw = (fh.metadata() or {}).get(META_KEY)
        meta = json.loads(raw) if raw else {}
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path} is not an NCL-IML checkpoint")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    return meta["config"], meta["state"], tensors


def restore(model, tensors: dict[str, torch.Tensor], optimizer=None) -> None:
    sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd)
    if optimizer is not None:
        params = dict(model.named_parameters())
        for key, v in tensors.items():
            if key.startswith("optim/"):
                name = key[len("optim/"): -len("/momentum_buffer")]
                optimizer.state[params[name]]["momentum_buffer"] = v.clone()


def restore_rng(state: dict) -> None:
    raw = state.get("torch_rng")
    if raw:
        torch.set_rng_state(torch.frombuffer(bytearray(base64.b64decode(raw)), dtype=torch.uint8))
