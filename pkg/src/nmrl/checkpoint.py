"""Checkpoint directories: ``manifest.json`` plus ``tensors.bin``.

``tensors.bin`` is a concatenation of little-endian float32 arrays; the
manifest lists every tensor's name, shape and byte offset together with the
network layout, N:M pattern, seed and step. Masks are stored as 0.0/1.0.
Output is byte-stable: same state in, same bytes out.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import AdamState, Linear, Mlp, SparseLinear
from .sparsity import NmMask, NmPattern, check_mask

FORMAT = "nmrl-checkpoint/1"
LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _network_layout(net: Mlp) -> dict:
    return {
        "output": net.output,
        "scale": net.scale,
        "layers": [
            {"fan_in": layer.fan_in, "fan_out": layer.fan_out, "sparse": layer.sparse}
            for layer in net.layers
        ],
    }


def save_checkpoint(
    path,
    networks: dict[str, Mlp],
    optimizers: dict[str, AdamState] | None = None,
    pattern: NmPattern | None = None,
    seed: int = 0,
    step: int = 0,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []

    def add(name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype=LE_F32).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    for net_name, net in networks.items():
        for i, layer in enumerate(net.layers):
            add(f"{net_name}/{i}/W", layer.weight)
            if layer.sparse:
                add(f"{net_name}/{i}/E", layer.mask.bits)
            add(f"{net_name}/{i}/b", layer.bias)
    opt_meta = {}
    for opt_name, opt in (optimizers or {}).items():
        opt_meta[opt_name] = {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
        }
        for j, (m, v) in enumerate(zip(opt.m, opt.v)):
            add(f"{opt_name}.opt/{j}/m", m)
            add(f"{opt_name}.opt/{j}/v", v)
    manifest = {
        "format": FORMAT,
        "pattern": str(pattern) if pattern is not None else None,
        "seed": seed,
        "step": step,
        "networks": {name: _network_layout(net) for name, net in networks.items()},
        "optimizers": opt_meta,
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(path / "tensors.bin", "wb") as fh:
        for data in chunks:
            fh.write(data)
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read manifest in {path}: {err}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def _read_tensors(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    raw = (path / "tensors.bin").read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * LE_F32.itemsize
        if end > len(raw):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of tensors.bin")
        arr = np.frombuffer(raw[start:end], dtype=LE_F32).reshape(entry["shape"])
        out[entry["name"]] = arr.astype(np.float32)
    return out


def load_networks(path, names=None, validate: bool = True) -> tuple[dict[str, Mlp], dict]:
    """Rebuild networks; with ``validate`` every mask must be binary and satisfy its pattern."""
    path = Path(path)
    manifest = read_manifest(path)
    tensors = _read_tensors(path, manifest)
    pattern = NmPattern.parse(manifest["pattern"]) if manifest.get("pattern") else None
    networks = {}
    for net_name, layout in manifest["networks"].items():
        if names is not None and net_name not in names:
            continue
        layers = []
        for i, spec in enumerate(layout["layers"]):
            w = tensors[f"{net_name}/{i}/W"].copy()
            b = tensors[f"{net_name}/{i}/b"].copy()
            if spec["sparse"]:
                e = tensors[f"{net_name}/{i}/E"]
                if validate and not np.all((e == 0) | (e == 1)):
                    raise CheckpointError(f"{net_name} layer {i}: mask is not binary")
                mask = NmMask(e.astype(np.uint8), pattern)
                if validate:
                    try:
                        check_mask(mask)
                    except ValueError as err:
                        raise CheckpointError(f"{net_name} layer {i}: {err}") from None
                layers.append(SparseLinear(w, b, mask))
            else:
                layers.append(Linear(w, b))
        networks[net_name] = Mlp(layers, output=layout["output"], scale=layout["scale"])
    return networks, manifest


def load_optimizers(path) -> dict[str, AdamState]:
    path = Path(path)
    manifest = read_manifest(path)
    tensors = _read_tensors(path, manifest)
    out = {}
    for name, meta in manifest["optimizers"].items():
        m, v = [], []
        j = 0
        while f"{name}.opt/{j}/m" in tensors:
            m.append(tensors[f"{name}.opt/{j}/m"].copy())
            v.append(tensors[f"{name}.opt/{j}/v"].copy())
            j += 1
        out[name] = AdamState(
            lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
            m=m, v=v, step=meta["step"],
        )
    return out

