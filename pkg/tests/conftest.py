import json
from dataclasses import replace

import numpy as np
import pytest

from src.config import SimConfig, StbConfig, parse_section
from src.dataset import build_dataset, load_split
from src.stbModel import StbModel

TINY_CONFIG = {
    'seed': 3,
    'sim': {'train_speakers': 3, 'test_speakers': 2, 'scenes_per_speaker': 2, 'utterances_per_scene': 2,
            'channels': 4, 'frames': 8, 'feature_dim': 6},
    'model': {'input_dim': 6, 'feature_dim': 8, 'num_blocks': 1, 'heads': 2, 'frames': 8, 'channels_train': 2,
              'sap_dim': 4, 'ffn_dim': 8},
    'train': {'pretrain': {'epochs': 2, 'batch_size': 4},
              'finetune': {'epochs': 1, 'batch_size': 4, 'channels_per_epoch': 2}},
    'eval': {'channel_subset_sizes': [2, 4], 'ranks': 3, 'batch_size': 4},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / 'config.json'
    path.write_text(json.dumps(TINY_CONFIG), encoding='utf-8')
    return path


@pytest.fixture(scope='session')
def sim_config() -> SimConfig:
    return parse_section(SimConfig, TINY_CONFIG['sim'], 'sim')


@pytest.fixture(scope='session')
def model_config() -> StbConfig:
    return parse_section(StbConfig, TINY_CONFIG['model'], 'model')


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory, sim_config):
    directory = tmp_path_factory.mktemp('dataset')
    build_dataset(sim_config, seed=3, out_dir=directory, workers=2)
    return directory


@pytest.fixture(scope='session')
def train_split(tiny_dataset):
    return load_split(tiny_dataset, 'train')


@pytest.fixture(scope='session')
def test_split(tiny_dataset):
    return load_split(tiny_dataset, 'test')


@pytest.fixture
def make_model(model_config):
    def make(seed: int = 0, **overrides) -> StbModel:
        config = replace(model_config, num_speakers=overrides.pop('num_speakers', 3), **overrides)
        return StbModel.initialize(config, np.random.default_rng(seed))
    return make
