import json
from dataclasses import replace

import numpy as np
import pytest

from src.checkpoint import load_checkpoint, load_pretrained_freeze, save_checkpoint
from src.constants import MANIFEST_FILENAME, STAGE_PRETRAIN
from src.errors import CheckpointError
from src.tensor import Tensor
from tests.oracles import cosine


def test_round_trip_is_bitwise(tmp_path, make_model):
    model = make_model(seed=4)
    model.freeze(['sap'])
    save_checkpoint(model, tmp_path)
    loaded = load_checkpoint(tmp_path)
    assert loaded.snapshot() == model.snapshot()
    assert loaded.config == model.config
    assert loaded.frozen == model.frozen
    assert loaded.stage == model.stage


def test_pretrained_groups_are_copied_and_frozen(tmp_path, make_model, model_config):
    source = make_model(seed=1)
    source.stage = STAGE_PRETRAIN
    save_checkpoint(source, tmp_path)
    target_config = replace(model_config, num_speakers=5, normalizer='sparsemax')
    model = load_pretrained_freeze(tmp_path, target_config, np.random.default_rng(9))
    assert model.snapshot(['frontend', 'sap']) == source.snapshot(['frontend', 'sap'])
    assert model.snapshot(['blocks']) != source.snapshot(['blocks'])
    assert model.classifier.shape == (8, 5)
    assert model.frozen == {'frontend': True, 'blocks': False, 'sap': True, 'classifier': False}


def test_pretrained_dimension_mismatch(tmp_path, make_model, model_config):
    save_checkpoint(make_model(), tmp_path)
    with pytest.raises(CheckpointError, match='sap_dim'):
        load_pretrained_freeze(tmp_path, replace(model_config, num_speakers=3, sap_dim=6),
                               np.random.default_rng(0))


def test_tensor_shape_mismatch(tmp_path, make_model):
    save_checkpoint(make_model(), tmp_path)
    manifest_path = tmp_path / MANIFEST_FILENAME
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    manifest['config']['num_speakers'] = 4
    manifest_path.write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(CheckpointError, match='classifier.w'):
        load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match='not found'):
        load_checkpoint(tmp_path)


def test_manifest_without_parameters(tmp_path):
    (tmp_path / MANIFEST_FILENAME).write_text(json.dumps({'config': {}, 'frozen': {}, 'stage': 'finetune'}),
                                               encoding='utf-8')
    with pytest.raises(CheckpointError, match="'parameters'"):
        load_checkpoint(tmp_path)


@pytest.mark.parametrize('seed', range(5))
def test_fresh_blocks_keep_single_channel_embedding(tmp_path, make_model, model_config, seed):
    source = make_model(seed=seed)
    source.stage = STAGE_PRETRAIN
    save_checkpoint(source, tmp_path)
    model = load_pretrained_freeze(tmp_path, replace(model_config, num_speakers=4), np.random.default_rng(seed + 10))
    rng = np.random.default_rng(seed + 20)
    for _ in range(4):
        x = Tensor(rng.normal(size=(1, model_config.frames, model_config.input_dim)))
        assert cosine(model.embed(x).data, source.embed_single(x).data) >= 0.9
