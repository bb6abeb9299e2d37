"""Checkpoint persistence: a JSON manifest plus one binary parameter blob.

The manifest records the schema version, the structural model description,
the training step, optimizer accumulators, and an index of named tensors
(shape, byte offset, byte length). The blob holds every tensor's little-
endian float64 bytes concatenated in manifest order, so a round trip is
bitwise exact by construction.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import pipeline as pl
from . import synthesis as syn
from .training import TrainState, named_parameters

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"


class CheckpointError(ValueError):
    """Manifest or blob failed validation."""


def _layer_to_dict(layer: bb.LayerSpec) -> dict:
    return {
        "in": layer.in_channels, "out": layer.out_channels, "k": layer.kernel_size,
        "stride": layer.stride, "pad": layer.padding, "act": layer.activation,
    }


def _layer_from_dict(d: dict) -> bb.LayerSpec:
    return bb.LayerSpec(d["in"], d["out"], d["k"], d["stride"], d["pad"], d["act"])


def backbone_spec_to_dict(spec: bb.BackboneSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "layers": [_layer_to_dict(l) for l in spec.layers],
        "num_classes": spec.num_classes,
    }


def backbone_spec_from_dict(d: dict) -> bb.BackboneSpec:
    return bb.BackboneSpec(
        input_shape=tuple(d["input_shape"]),
        layers=tuple(_layer_from_dict(l) for l in d["layers"]),
        num_classes=d["num_classes"],
    )


def _structure_dict(state: TrainState) -> dict:
    return {
        "lm": {
            "trunk": backbone_spec_to_dict(state.lm.trunk),
            "n_bases": state.lm.n_bases,
            "coeff_rows": state.lm.coeff_rows,
            "downsample": state.lm.downsample,
        },
        "bank": {
            "spec": backbone_spec_to_dict(state.bank.spec),
            "n_bases": state.bank.n_bases,
            "share_mask": list(state.bank.share_mask),
        },
        "synthesis": {
            "activation": state.synth_cfg.activation,
            "mode": state.synth_cfg.mode,
            "epsilon": state.synth_cfg.epsilon,
            "bmd_rate": state.synth_cfg.bmd_rate,
            "bmd_renormalize": state.synth_cfg.bmd_renormalize,
            "stabilizer_order": state.synth_cfg.stabilizer_order,
        },
    }


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def save_checkpoint(state: TrainState, path, config: dict | None = None) -> None:
    """Write manifest.json and tensors.bin under ``path`` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, tensor in named_parameters(state):
        raw = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dtype": "<f8",
        "step": state.step,
        "structure": _structure_dict(state),
        "config": config,
        "config_sha256": config_digest(config) if config is not None else None,
        "opt_state": {k: v.tolist() for k, v in state.opt_state.items()},
        "opt_shapes": {k: list(v.shape) for k, v in state.opt_state.items()},
        "tensors": entries,
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    (path / BLOB_NAME).write_bytes(b"".join(chunks))


def load_checkpoint(path, expect_config: dict | None = None, force: bool = False):
    """Rebuild a TrainState from disk; returns (state, stored config dict).

    A config hash mismatch against ``expect_config`` is an error unless
    ``force`` is set.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} under {path}")
    manifest = json.loads(manifest_path.read_text())

    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {manifest.get('schema_version')} != supported {SCHEMA_VERSION}")
    if manifest.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {manifest.get('dtype')!r}")
    if expect_config is not None and not force:
        if manifest.get("config_sha256") != config_digest(expect_config):
            raise CheckpointError(
                "checkpoint was produced by a different config (pass force to override)")

    structure = manifest["structure"]
    lm_d = structure["lm"]
    lm = pl.LightweightModel(
        trunk=backbone_spec_from_dict(lm_d["trunk"]),
        n_bases=lm_d["n_bases"],
        coeff_rows=lm_d["coeff_rows"],
        downsample=lm_d["downsample"],
    )
    bank_d = structure["bank"]
    bank = syn.build_bank(
        backbone_spec_from_dict(bank_d["spec"]),
        bank_d["n_bases"],
        [k for k, shared in enumerate(bank_d["share_mask"]) if shared],
        seed=0,
    )
    cfg_d = structure["synthesis"]
    synth_cfg = syn.SynthesisConfig(**cfg_d)
    lm_params = pl.build_lm(lm, seed=0)

    state = TrainState(lm=lm, lm_params=lm_params, bank=bank, synth_cfg=synth_cfg,
                       step=manifest["step"])
    state.opt_state = {
        k: np.array(v, dtype=np.float64).reshape(manifest["opt_shapes"][k])
        for k, v in manifest.get("opt_state", {}).items()
    }

    blob = (path / BLOB_NAME).read_bytes()
    total = sum(e["nbytes"] for e in manifest["tensors"])
    if len(blob) != total:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest expects {total}")

    by_name = dict(named_parameters(state))
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        tensor = by_name.get(name)
        if tensor is None:
            raise CheckpointError(f"manifest names unknown tensor {name!r}")
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {list(tensor.shape)} but manifest says {entry['shape']}")
        count = int(np.prod(shape)) if shape else 1
        if entry["nbytes"] != count * 8:
            raise CheckpointError(f"tensor {name!r}: {entry['nbytes']} bytes for shape {entry['shape']}")
        values = np.frombuffer(
            blob, dtype="<f8", count=count, offset=entry["offset"]).reshape(shape)
        tensor.apply_update(values.astype(np.float64))
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")

    return state, manifest.get("config")
