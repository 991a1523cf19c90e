"""Model checkpoints: one binary tensor file per parameter plus a JSON manifest"""
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict

import numpy as np

from src.config import StbConfig, parse_section
from src.constants import FROZEN_AFTER_PRETRAIN, MANIFEST_FILENAME, STAGE_FINETUNE, TENSOR_SUFFIX
from src.errors import CheckpointError, ConfigError
from src.stbModel import StbModel
from src.tensorFile import read_tensor, write_tensor

logger = logging.getLogger(__name__)

PARAMS_DIRNAME = 'params'


def save_checkpoint(model: StbModel, directory: Path) -> Path:
    directory = Path(directory)
    files = {}
    for name, tensor in model.named_parameters():
        relative = f"{PARAMS_DIRNAME}/{name}{TENSOR_SUFFIX}"
        write_tensor(directory / relative, tensor)
        files[name] = relative

    manifest = {
        'config': asdict(model.config),
        'parameters': files,
        'frozen': dict(model.frozen),
        'stage': model.stage,
    }
    with open(directory / MANIFEST_FILENAME, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=4, sort_keys=True)
        f.write('\n')
    logger.info(f"Saved {len(files)} parameter tensors ({model.stage}) to {directory}")
    return directory


def read_checkpoint_manifest(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_FILENAME
    try:
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint manifest {path} is not valid JSON: {e}")
    for key in ('config', 'parameters', 'frozen', 'stage'):
        if key not in manifest:
            raise CheckpointError(f"checkpoint manifest {path} lacks '{key}'")
    return manifest


def _config_from_manifest(manifest: Dict[str, Any]) -> StbConfig:
    try:
        return parse_section(StbConfig, manifest['config'], 'checkpoint.config')
    except ConfigError as e:
        raise CheckpointError(str(e))


def _load_into(model: StbModel, directory: Path, manifest: Dict[str, Any], groups=None):
    params = model.parameters()
    for name, tensor in params.items():
        if groups is not None and name.split('.')[0] not in groups:
            continue
        relative = manifest['parameters'].get(name)
        if relative is None:
            raise CheckpointError(f"checkpoint {directory} has no tensor for '{name}'")
        array = read_tensor(Path(directory) / relative)
        if array.shape != tensor.shape:
            raise CheckpointError(f"'{name}' has shape {list(array.shape)} in {directory}, "
                                  f"model expects {list(tensor.shape)}")
        tensor.assign(array)


def load_checkpoint(directory: Path) -> StbModel:
    """Rebuild a model exactly as saved, freeze flags and stage included"""
    manifest = read_checkpoint_manifest(directory)
    config = _config_from_manifest(manifest)
    model = StbModel.initialize(config, np.random.default_rng(0), stage=manifest['stage'])
    _load_into(model, directory, manifest)
    model.freeze(group for group, frozen in manifest['frozen'].items() if frozen)
    return model


def load_pretrained_freeze(directory: Path, config: StbConfig, rng: np.random.Generator) -> StbModel:
    """Start a fine-tune model from a single-channel checkpoint.

    Front-end and pooling weights are copied and frozen; the blocks and the
    classifier are freshly initialized for ``config``.
    """
    manifest = read_checkpoint_manifest(directory)
    source = _config_from_manifest(manifest)
    for key in ('input_dim', 'feature_dim', 'sap_dim'):
        if getattr(source, key) != getattr(config, key):
            raise CheckpointError(f"checkpoint {key}={getattr(source, key)} does not match "
                                  f"config {key}={getattr(config, key)}")

    model = StbModel.initialize(config, rng, stage=STAGE_FINETUNE)
    _load_into(model, directory, manifest, groups=FROZEN_AFTER_PRETRAIN)
    model.freeze(FROZEN_AFTER_PRETRAIN)
    logger.info(f"Initialized fine-tune model from {directory}; frozen groups: {', '.join(FROZEN_AFTER_PRETRAIN)}")
    return model
