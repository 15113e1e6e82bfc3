"""JSON checkpoints for FlowModel.

Floats are written with ``repr`` (shortest round-trip form), so a
save/load cycle reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .distributions import DiagonalGaussian
from .flows import (
    ActNorm,
    AutoregressiveRQSpline,
    FlowModel,
    MaskedAffineCoupling,
    Permutation,
    Transform,
)

FORMAT = "tsnf-flow-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarray(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: FlowModel) -> dict:
    layers = []
    for t in model.transforms:
        layers.append(
            {
                "kind": t.kind,
                "dim": t.dim,
                "initialized": t.initialized,
                "config": t.config(),
                "params": {k: _array(p.data) for k, p in t.named_parameters().items()},
            }
        )
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "dim": model.dim,
        "base": {"mean": _array(model.base.mean), "stddev": _array(model.base.stddev)},
        "layers": layers,
    }


def _build_layer(spec: dict) -> Transform:
    kind, dim, cfg = spec["kind"], int(spec["dim"]), spec.get("config", {})
    if kind == "actnorm":
        layer = ActNorm(dim)
        if spec.get("initialized", True):
            layer.mark_initialized()
        return layer
    if kind == "permutation":
        return Permutation(dim, cfg["perm"])
    if kind == "affine_coupling":
        return MaskedAffineCoupling(dim, cfg["mask"], hidden=cfg["hidden"], clamp=cfg["clamp"])
    if kind == "ar_rq_spline":
        return AutoregressiveRQSpline(
            dim, bins=cfg["bins"], bound=cfg["bound"], hidden=cfg["hidden"], conditioning=cfg.get("conditioning", "data")
        )
    raise CheckpointError(f"unknown layer kind {kind!r}")


def model_from_dict(doc: dict) -> FlowModel:
    if doc.get("format") != FORMAT:
        raise CheckpointError("not a flow checkpoint")
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {doc.get('format_version')!r} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        dim = int(doc["dim"])
        base = DiagonalGaussian(_unarray(doc["base"]["mean"]), _unarray(doc["base"]["stddev"]))
        transforms = []
        for i, spec in enumerate(doc["layers"]):
            layer = _build_layer(spec)
            params = layer.named_parameters()
            if set(params) != set(spec["params"]):
                raise CheckpointError(f"layer {i}: parameter names {sorted(spec['params'])} do not match {sorted(params)}")
            for name, p in params.items():
                value = _unarray(spec["params"][name])
                if value.shape != p.shape:
                    raise CheckpointError(f"layer {i}: parameter {name} has shape {value.shape}, expected {p.shape}")
                p.data = value
            transforms.append(layer)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return FlowModel(dim, transforms, base)


def save_checkpoint(model: FlowModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_checkpoint(path) -> FlowModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    return model_from_dict(doc)
