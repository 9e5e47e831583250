"""Checkpoint format EEGCKPT1.

Layout: b"EEGCKPT1" | u32le manifest length | JSON manifest | payload blocks in
layer order. Real tensors are stored as in-stream NTF blocks; packed binary
weights as PKB1 blocks (u32le header length, JSON header, raw little-endian
uint64 words). Binary layers always store packed words + channel scales;
latent weights are included unless the checkpoint is exported for deployment.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from . import __version__
from .binary import ChannelScales, PackedTensor, unpack
from .models import (
    BatchNorm3d,
    BinaryConv3d,
    Conv3d,
    LayerGraph,
    Linear,
    ModelConfig,
    build_model,
)
from .tensor import read_ntf, write_ntf

MAGIC = b"EEGCKPT1"
PKB_MAGIC = b"PKB1"


def _write_packed(f, p: PackedTensor) -> None:
    header = json.dumps(
        {
            "dtype": "u64",
            "shape": list(p.words.shape),
            "logical_shape": list(p.logical_shape),
            "groups": p.groups,
            "role": p.role,
            "byte_order": "little",
        },
        sort_keys=True,
    ).encode("utf-8")
    f.write(PKB_MAGIC)
    f.write(struct.pack("<I", len(header)))
    f.write(header)
    f.write(p.words.astype("<u8", copy=False).tobytes())


def _read_packed(f) -> PackedTensor:
    magic = f.read(4)
    if magic != PKB_MAGIC:
        raise ValueError(f"expected PKB1 block, got {magic!r}")
    (hlen,) = struct.unpack("<I", f.read(4))
    header = json.loads(f.read(hlen).decode("utf-8"))
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    raw = f.read(count * 8)
    words = np.frombuffer(raw, dtype="<u8").reshape(shape).astype(np.uint64, copy=False)
    return PackedTensor(
        np.ascontiguousarray(words), tuple(header["logical_shape"]), header["groups"], header["role"]
    )


def _layer_payload_names(layer, deploy: bool) -> list[str]:
    if isinstance(layer, Conv3d):
        return ["weight"]
    if isinstance(layer, BinaryConv3d):
        names = ["packed", "alpha"]
        if not deploy:
            names.append("latent")
        return names
    if isinstance(layer, BatchNorm3d):
        return ["gamma", "beta", "running_mean", "running_var"]
    if isinstance(layer, Linear):
        return ["weight", "bias"]
    return []


def _layer_spec(layer) -> dict | None:
    if isinstance(layer, (Conv3d, BinaryConv3d)):
        s = layer.spec
        return {
            "in_channels": s.in_channels,
            "out_channels": s.out_channels,
            "kernel": list(s.kernel),
            "stride": list(s.stride),
            "padding": list(s.padding),
            "groups": s.groups,
        }
    if isinstance(layer, BatchNorm3d):
        return {"channels": layer.state.channels}
    if isinstance(layer, Linear):
        return {"in_features": layer.weight.shape[1], "out_features": layer.weight.shape[0]}
    return None


def save_checkpoint(graph: LayerGraph, path: str, deploy: bool = False,
                    extra: dict | None = None) -> None:
    cfg: ModelConfig = graph.meta["config"]
    manifest = {
        "format": "EEGCKPT1",
        "version": __version__,
        "model_config": asdict(cfg),
        "seed": graph.meta.get("seed", 0),
        "bn_eps": cfg.bn_eps,
        "bn_momentum": cfg.bn_momentum,
        "deploy": deploy,
        "channels": list(graph.meta.get("channels", ())),
        "stem_base": graph.meta.get("stem_base"),
        "layers": [
            {
                "name": layer.name,
                "kind": layer.kind,
                "inputs": list(layer.inputs),
                "spec": _layer_spec(layer),
                "precision": layer.param_precision() if layer.params() else None,
                "payloads": _layer_payload_names(layer, deploy),
            }
            for layer in graph.layers
        ],
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for layer in graph.layers:
            for pname in _layer_payload_names(layer, deploy):
                if pname == "packed":
                    _write_packed(f, layer.packed_weight()[0])
                elif pname == "alpha":
                    write_ntf(f, layer.packed_weight()[1].alpha)
                elif pname == "latent":
                    write_ntf(f, layer.latent)
                elif isinstance(layer, BatchNorm3d):
                    write_ntf(f, getattr(layer.state, pname))
                else:
                    write_ntf(f, getattr(layer, pname))


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not an EEGCKPT1 checkpoint (magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(mlen).decode("utf-8"))


def load_checkpoint(path: str) -> LayerGraph:
    """Rebuild the graph from its config and restore every payload."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not an EEGCKPT1 checkpoint (magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        cfg = ModelConfig(**manifest["model_config"])
        graph = build_model(cfg, seed=manifest.get("seed", 0))
        graph.meta["deploy"] = manifest.get("deploy", False)
        deploy = manifest.get("deploy", False)
        for entry in manifest["layers"]:
            layer = graph[entry["name"]]
            for pname in entry["payloads"]:
                if pname == "packed":
                    packed = _read_packed(f)
                elif pname == "alpha":
                    scales = ChannelScales(read_ntf(f))
                    if deploy:
                        layer.latent = unpack(packed)
                        layer.fixed_scales = scales
                        layer._packed = (packed, scales)
                elif pname == "latent":
                    layer.latent[...] = read_ntf(f)
                    layer.refresh()
                elif isinstance(layer, BatchNorm3d):
                    setattr(layer.state, pname, read_ntf(f))
                else:
                    getattr(layer, pname)[...] = read_ntf(f)
    return graph
