"""Versioned checkpoint container.

A checkpoint is a single binary file: a magic string, an 8-byte header
length, a JSON header carrying the format version, run metadata, and a shape
manifest, then the raw little-endian float64 payload. The writer is fully
deterministic (no timestamps), so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .encoder import ModelDims, ParamSet, init_params

MAGIC = b"ODINCKPT\x01\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(arrays)
    manifest = {}
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "arrays": manifest},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())


def load_arrays(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    n = int.from_bytes(raw[len(MAGIC): len(MAGIC) + 8], "little")
    header = json.loads(raw[len(MAGIC) + 8: len(MAGIC) + 8 + n])
    if header["version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header['version']}")
    payload = raw[len(MAGIC) + 8 + n:]
    arrays = {}
    for name, info in header["arrays"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arrays[name] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=start
        ).reshape(shape).copy()
    return arrays, header["meta"]


def params_to_arrays(params: ParamSet) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.named_parameters()}


def save_model(path, params: ParamSet, meta: dict, optimizer=None) -> None:
    arrays = dict(params_to_arrays(params))
    meta = dict(meta)
    meta["model"] = {
        "vocab_size": params.vocab_size,
        "depth": params.depth,
        "num_stages": len(params.stages),
        "d": params.dims.d,
        "heads": params.dims.heads,
        "max_len": params.dims.max_len,
        "mlp_ratio": params.dims.mlp_ratio,
        "tie_mlm": params.mlm_head is None,
        "head_names": sorted(params.heads),
    }
    if optimizer is not None:
        meta["optimizer"] = {"kind": optimizer.kind}
        state = optimizer.state_dict()
        if state:
            meta["optimizer"]["t"] = state["t"]
            for key in ("m", "v"):
                for name, arr in state[key].items():
                    arrays[f"opt.{key}.{name}"] = arr
    save_arrays(path, arrays, meta)


def load_model(path):
    """Returns (params, meta, optimizer_state_or_None)."""
    arrays, meta = load_arrays(path)
    spec = meta["model"]
    dims = ModelDims(d=spec["d"], heads=spec["heads"], max_len=spec["max_len"],
                     mlp_ratio=spec["mlp_ratio"])
    params = init_params(spec["vocab_size"], dims, spec["depth"], spec["num_stages"],
                         seed=0, tie_mlm=spec["tie_mlm"])
    from .autodiff import Tensor
    for name in spec.get("head_names", []):
        params.heads[name] = Tensor(arrays[f"heads.{name}"], requires_grad=True)
    for name, p in params.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing array {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arrays[name].shape}, "
                f"model {p.data.shape}"
            )
        p.data = arrays[name]
    opt_state = None
    if "optimizer" in meta and meta["optimizer"].get("kind") == "adam":
        opt_state = {
            "t": meta["optimizer"]["t"],
            "m": {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")},
        }
    return params, meta, opt_state
