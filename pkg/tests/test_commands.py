import json

import pytest

from main import main
from src.tensor import KERNELS
from tests.conftest import TINY_CONFIG


@pytest.fixture(scope='module')
def recipe(tmp_path_factory):
    """The whole workflow on the tiny config, once per module"""
    out = tmp_path_factory.mktemp('run')
    config = out / 'config.json'
    config.write_text(json.dumps(TINY_CONFIG), encoding='utf-8')
    codes = {command: main([command, '--config', str(config), '--out', str(out)])
             for command in ('simulate', 'pretrain', 'finetune', 'eval', 'oracle')}
    return out, config, codes


def test_recipe_succeeds(recipe):
    out, _, codes = recipe
    assert codes == {'simulate': 0, 'pretrain': 0, 'finetune': 0, 'eval': 0, 'oracle': 0}
    for stage in ('dataset', 'pretrain', 'finetune', 'eval', 'oracle'):
        assert (out / stage / 'resolved_config.json').exists()
        assert (out / stage / 'run.log').stat().st_size > 0
    assert (out / 'pretrain' / 'curve.csv').exists()


def test_one_report_per_normalizer(recipe):
    out, _, _ = recipe
    for normalizer in ('softmax', 'sparsemax'):
        report = json.loads((out / 'eval' / normalizer / 'report.json').read_text(encoding='utf-8'))
        assert report['normalizer'] == normalizer
        assert sorted(report['conditions']) == ['C=2', 'C=4']
        for condition in report['conditions'].values():
            assert 0.0 <= condition['eer'] <= 1.0


def test_oracle_report(recipe):
    out, _, _ = recipe
    report = json.loads((out / 'oracle' / 'report.json').read_text(encoding='utf-8'))
    assert report['system'] == 'oracle_one_best'
    assert sorted(report['channel_rank']) == ['1', '2', '3']
    assert set(report) == set(json.loads((out / 'eval' / 'softmax' / 'report.json').read_text(encoding='utf-8')))


def test_existing_output_is_kept(recipe):
    out, config, _ = recipe
    before = (out / 'dataset' / 'train' / 'manifest.json').read_bytes()
    assert main(['simulate', '--config', str(config), '--out', str(out)]) == 1
    assert (out / 'dataset' / 'train' / 'manifest.json').read_bytes() == before


def test_forced_rebuild_is_identical(recipe, tmp_path):
    out, config, _ = recipe
    assert main(['simulate', '--config', str(config), '--out', str(tmp_path)]) == 0
    assert main(['simulate', '--config', str(config), '--out', str(tmp_path), '--force']) == 0
    for split in ('train', 'test'):
        rebuilt = (tmp_path / 'dataset' / split / 'manifest.json').read_bytes()
        assert rebuilt == (out / 'dataset' / split / 'manifest.json').read_bytes()


@pytest.mark.parametrize('command', ['pretrain', 'finetune', 'eval', 'oracle'])
def test_missing_prerequisite(tmp_path, tiny_config_file, command):
    assert main([command, '--config', str(tiny_config_file), '--out', str(tmp_path / 'run')]) == 2


def test_bad_config_is_a_usage_error(tmp_path):
    config = tmp_path / 'config.json'
    config.write_text(json.dumps({'sim': {'channels': 0}}), encoding='utf-8')
    assert main(['simulate', '--config', str(config), '--out', str(tmp_path / 'run')]) == 1


def test_verify_passes(tmp_path):
    assert main(['verify', '--points', '2', '--seed', '1', '--out', str(tmp_path)]) == 0
    report = json.loads((tmp_path / 'verify' / 'report.json').read_text(encoding='utf-8'))
    assert report['passed'] is True


def test_verify_reports_broken_gradient(tmp_path, monkeypatch):
    kernel = KERNELS['tanh']
    original = kernel.backward
    monkeypatch.setattr(kernel, 'backward', lambda *args: tuple(-g for g in original(*args)))
    assert main(['verify', '--points', '2', '--out', str(tmp_path)]) == 3
    report = json.loads((tmp_path / 'verify' / 'report.json').read_text(encoding='utf-8'))
    assert report['passed'] is False


def test_unknown_command():
    with pytest.raises(SystemExit) as info:
        main(['train'])
    assert info.value.code == 1
