"""
Early-Exit Engine - Checkpoints

A checkpoint is two files sharing a prefix:

    <prefix>.bin   every tensor as little-endian float64, back to back
    <prefix>.json  manifest: format_version, kind, norm_epsilon, config
                   echo, and per tensor its name, shape and byte offset

Loading checks the manifest against the shapes the echoed config implies.
"""

import json
import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np

from config.settings import CHECKPOINT_FORMAT_VERSION, NORM_EPSILON
from models.backbone import BackboneModel, build_backbone
from models.errors import ArtifactIOError, CheckpointError
from models.exits import ExitBank, ExitCellConfig, ExitPlacement, exit_parameter_shapes
from models.mamba import MambaConfig, mamba_parameter_shapes
from models.numkernel import Tensor, parameter
from models.transformer import TransformerConfig, transformer_parameter_shapes

logger = logging.getLogger(__name__)

ITEM_BYTES = 8
BACKBONE_PREFIX = "backbone"
EXITS_PREFIX = "exits"

CONFIG_TYPES = {"transformer": TransformerConfig, "mamba": MambaConfig}
SHAPE_FUNCTIONS = {"transformer": transformer_parameter_shapes, "mamba": mamba_parameter_shapes}


def save_params(params: Dict[str, Tensor], prefix: str, kind: str, config_echo: dict) -> str:
    """Write a tensor archive plus manifest; returns the manifest path."""
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)

    entries = []
    offset = 0
    try:
        with open(prefix + ".bin", "wb") as f:
            for name, tensor in params.items():
                array = np.ascontiguousarray(tensor.data, dtype="<f8")
                f.write(array.tobytes())
                entries.append({"name": name, "shape": list(array.shape), "offset": offset})
                offset += array.nbytes
        manifest = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": kind,
            "norm_epsilon": NORM_EPSILON,
            "config": config_echo,
            "tensors": entries,
            "total_bytes": offset,
        }
        with open(prefix + ".json", "w") as f:
            json.dump(manifest, f, indent=2)
    except OSError as e:
        raise ArtifactIOError(f"cannot write checkpoint {prefix}: {e}")

    logger.info(f"Saved {len(entries)} tensors ({offset} bytes) to {prefix}.bin")
    return prefix + ".json"


def read_manifest(prefix: str) -> dict:
    path = prefix + ".json"
    if not os.path.exists(path):
        raise ArtifactIOError(f"missing checkpoint manifest {path}")
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest {path}: {e}")
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"format version {version}, expected {CHECKPOINT_FORMAT_VERSION}")
    epsilon = manifest.get("norm_epsilon")
    if epsilon != NORM_EPSILON:
        raise CheckpointError(f"saved with norm epsilon {epsilon}, this build uses {NORM_EPSILON}")
    return manifest


def load_params(prefix: str, manifest: dict,
                expected_shapes: Optional[Dict[str, Tuple[int, ...]]] = None) -> Dict[str, Tensor]:
    """
    Read every tensor the manifest lists.

    Raises:
        ArtifactIOError: the archive file is missing
        CheckpointError: offsets, sizes or shapes disagree (names the tensor)
    """
    path = prefix + ".bin"
    if not os.path.exists(path):
        raise ArtifactIOError(f"missing checkpoint archive {path}")
    with open(path, "rb") as f:
        raw = f.read()

    params: Dict[str, Tensor] = {}
    running = 0
    for entry in manifest.get("tensors", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        if entry["offset"] != running:
            raise CheckpointError(f"offset {entry['offset']}, expected {running}", tensor=name)
        if expected_shapes is not None:
            if name not in expected_shapes:
                raise CheckpointError("not part of this configuration", tensor=name)
            if shape != tuple(expected_shapes[name]):
                raise CheckpointError(f"shape {shape}, expected {tuple(expected_shapes[name])}",
                                      tensor=name)
        count = int(np.prod(shape, dtype=np.int64))
        end = running + count * ITEM_BYTES
        if end > len(raw):
            raise CheckpointError(f"archive ends at byte {len(raw)}, tensor needs {end}", tensor=name)
        array = np.frombuffer(raw, dtype="<f8", count=count, offset=running).reshape(shape)
        params[name] = parameter(array.astype(np.float64), name=name)
        running = end

    if expected_shapes is not None:
        missing = [name for name in expected_shapes if name not in params]
        if missing:
            raise CheckpointError("missing from archive", tensor=missing[0])
    if running != len(raw):
        raise CheckpointError(f"{len(raw) - running} trailing bytes after the last tensor")
    return params


# =============================================================================
# Backbones & exit banks
# =============================================================================

def save_backbone(model: BackboneModel, directory: str) -> str:
    return save_params(model.params, os.path.join(directory, BACKBONE_PREFIX),
                       model.kind, model.config.model_dump())


def load_backbone(directory: str) -> BackboneModel:
    prefix = os.path.join(directory, BACKBONE_PREFIX)
    manifest = read_manifest(prefix)
    kind = manifest.get("kind")
    if kind not in CONFIG_TYPES:
        raise CheckpointError(f"unknown backbone kind '{kind}'")
    config = CONFIG_TYPES[kind](**manifest["config"])
    shapes = SHAPE_FUNCTIONS[kind](config)
    model = build_backbone(config, params=load_params(prefix, manifest, shapes))
    logger.info(f"Loaded {kind} backbone ({config.n_blocks} blocks, d_model {config.d_model})")
    return model


def save_exit_bank(bank: ExitBank, directory: str) -> str:
    echo = {
        "variant": bank.variant,
        "placement": bank.placement.model_dump(),
        "cell": bank.cell.model_dump(),
    }
    return save_params(bank.params, os.path.join(directory, EXITS_PREFIX), "exits", echo)


def load_exit_bank(directory: str) -> ExitBank:
    prefix = os.path.join(directory, EXITS_PREFIX)
    manifest = read_manifest(prefix)
    if manifest.get("kind") != "exits":
        raise CheckpointError(f"expected an exit checkpoint, found kind '{manifest.get('kind')}'")
    echo = manifest["config"]
    placement = ExitPlacement(**echo["placement"])
    cell = ExitCellConfig(**echo["cell"])
    params = load_params(prefix, manifest, exit_parameter_shapes(echo["variant"], placement, cell))
    logger.info(f"Loaded {echo['variant']} exits at blocks {placement.blocks}")
    return ExitBank(echo["variant"], placement, cell, params=params)
