"""Checkpoint directory IO.

Layout of a checkpoint directory::

    model.bin         parameters
    train_state.bin   step, optimizer moments, RNG states
    config.yaml       the run configuration

Both ``.bin`` files are an 8-byte little-endian header length, a JSON header
(sorted keys) naming every array with its shape, then the arrays back to back
in header order as little-endian floats (float32 for the model, float64 for
the training state).
"""
from __future__ import annotations

import json
import os
import shutil
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def write_blob(path, header: dict, arrays: "OrderedDict[str, np.ndarray]", dtype: str = "<f4") -> None:
    header = dict(header)
    header["dtype"] = dtype
    header["params"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())


def read_blob(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    dtype = np.dtype(header.get("dtype", "<f4"))
    out = OrderedDict()
    off = 8 + n
    for rec in header["params"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        end = off + count * dtype.itemsize
        if end > len(data):
            raise CheckpointError(f"{path}: blob ends before parameter {rec['name']}")
        out[rec["name"]] = np.frombuffer(data[off:end], dtype=dtype).reshape(rec["shape"]).copy()
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header, out


def _flatten_opt(prefix: str, state: dict, arrays: OrderedDict, scalars: dict):
    for key, val in state.items():
        if isinstance(val, dict):
            for name, arr in val.items():
                arrays[f"{prefix}.{key}.{name}"] = arr
        else:
            scalars[f"{prefix}.{key}"] = val


def _unflatten_opt(prefix: str, arrays: dict, scalars: dict) -> dict:
    state: dict = {}
    for k, v in scalars.items():
        if k.startswith(prefix + "."):
            state[k[len(prefix) + 1:]] = v
    for k, v in arrays.items():
        if k.startswith(prefix + "."):
            slot, name = k[len(prefix) + 1:].split(".", 1)
            state.setdefault(slot, {})[name] = v
    return state


def save_checkpoint(out_dir, model, cfg, step: int = 0, optimizers: dict | None = None,
                    rng_states: dict | None = None) -> Path:
    """Write a checkpoint atomically: a temp sibling directory is renamed into place."""
    out = Path(out_dir)
    tmp = out.with_name(out.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write_blob(tmp / "model.bin", {"version": FORMAT_VERSION, "variant": cfg.backbone.variant},
               model.state_dict(), "<f4")
    arrays, scalars = OrderedDict(), {"step": int(step)}
    for name, opt in (optimizers or {}).items():
        _flatten_opt(name, opt.state_dict(), arrays, scalars)
    write_blob(tmp / "train_state.bin",
               {"version": FORMAT_VERSION, "scalars": scalars, "rng": rng_states or {}}, arrays, "<f8")
    cfg.dump(tmp / "config.yaml")
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)
    return out


def load_model_state(ckpt_dir) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(ckpt_dir) / "model.bin"
    if not path.exists():
        raise CheckpointError(f"{ckpt_dir}: no model.bin (not a checkpoint directory)")
    header, state = read_blob(path)
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('version')}")
    return header, state


def load_train_state(ckpt_dir) -> tuple[int, dict, dict]:
    """Returns ``(step, {optimizer name: state}, rng states)``."""
    header, arrays = read_blob(Path(ckpt_dir) / "train_state.bin")
    scalars = header["scalars"]
    names = {k.split(".", 1)[0] for k in list(scalars) + list(arrays) if "." in k}
    opts = {n: _unflatten_opt(n, arrays, scalars) for n in sorted(names)}
    return int(scalars["step"]), opts, header.get("rng", {})
