"""Checkpoints: ``<path>.json`` manifest plus ``<path>.bin`` tensor blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import tensorio
from ..backbone import BackboneConfig, BackboneParams
from ..numerics import Tensor
from ..processor import ProcessorConfig, ProcessorParams

FORMAT = "bottlenecked-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, backbone: BackboneParams | None = None,
                    processor: ProcessorParams | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    manifest = {"format": FORMAT, "extra": extra or {}}
    if backbone is not None:
        manifest["backbone_config"] = backbone.config.to_dict()
        tensors.update({f"backbone/{k}": v.data for k, v in backbone.tensors.items()})
    if processor is not None:
        manifest["processor_config"] = processor.config.to_dict()
        manifest.setdefault("backbone_config", processor.backbone.to_dict())
        tensors.update({f"processor/{k}": v.data for k, v in processor.tensors.items()})
    blob = path.with_suffix(".bin")
    manifest["blob"] = blob.name
    manifest["tensors"] = tensorio.write_blob(blob, tensors)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[BackboneParams | None, ProcessorParams | None, dict]:
    path = Path(path)
    mpath = path if path.suffix == ".json" else path.with_suffix(".json")
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{mpath}: unknown format {manifest.get('format')!r}")
    arrays = tensorio.read_blob(mpath.with_name(manifest["blob"]), manifest["tensors"])
    bcfg = BackboneConfig(**manifest["backbone_config"])
    backbone = processor = None
    bt = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("backbone/")}
    if bt:
        backbone = BackboneParams(bcfg, {k: Tensor(v, requires_grad=True) for k, v in bt.items()})
    pt = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("processor/")}
    if pt:
        pcfg = ProcessorConfig(**manifest["processor_config"])
        processor = ProcessorParams(pcfg, bcfg, {k: Tensor(v, requires_grad=True) for k, v in pt.items()})
    return backbone, processor, manifest


def check_compatible(backbone: BackboneParams, processor: ProcessorParams) -> None:
    """Fail before decoding if the Processor was built for a different backbone."""
    a, b = backbone.config, processor.backbone
    for name in ("n_layers", "n_heads", "d_model"):
        if getattr(a, name) != getattr(b, name):
            raise CheckpointError(
                f"processor/backbone mismatch: {name} {getattr(b, name)} vs {getattr(a, name)}"
            )
    w = processor[f"p0.w_in"].shape[0]
    if w != 2 * a.n_heads * a.d_head:
        raise CheckpointError(f"processor input width {w} != 2*H*d_k = {2 * a.n_heads * a.d_head}")


def params_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params.tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params.tensors[k].data).tobytes())
    return h.hexdigest()
