"""The default recipe end to end, three seeds. Minutes of CPU; run with ``-m slow``."""
import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from main import main
from src.checkpoint import load_pretrained_freeze
from src.config import PretrainSection, RunConfig, SimConfig
from src.dataset import load_split
from src.evaluation import build_trials, evaluate
from src.randomStreams import INIT, TRIALS, stream

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
COMMANDS = ('simulate', 'pretrain', 'finetune', 'eval', 'oracle')


def _eer(path) -> dict:
    report = json.loads(path.read_text(encoding='utf-8'))
    return {name: condition['eer'] for name, condition in report['conditions'].items()}


@pytest.fixture(scope='module')
def runs(tmp_path_factory):
    out = {}
    for seed in SEEDS:
        directory = tmp_path_factory.mktemp(f"seed{seed}")
        codes = [main([command, '--seed', str(seed), '--out', str(directory)]) for command in COMMANDS]
        assert codes == [0] * len(COMMANDS)
        out[seed] = directory
    return out


def test_pretraining_reaches_train_accuracy(runs):
    sim, budget = SimConfig(), PretrainSection()
    utterances = sim.train_speakers * sim.scenes_per_speaker * sim.utterances_per_scene
    steps_per_epoch = -(-utterances // budget.batch_size)
    for seed, directory in runs.items():
        with open(directory / 'pretrain' / 'curve.csv', newline='') as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == budget.epochs * steps_per_epoch
        accuracy = np.mean([float(row['accuracy']) for row in rows[-steps_per_epoch:]])
        assert accuracy > 0.9, f"seed {seed}: final-epoch train accuracy {accuracy:.3f}"


def test_stb_beats_closest_channel(runs):
    stb = [_eer(d / 'eval' / 'softmax' / 'report.json')['C=8'] for d in runs.values()]
    oracle = [_eer(d / 'oracle' / 'report.json')['oracle_one_best'] for d in runs.values()]
    assert np.median(stb) < np.median(oracle), f"STB {stb} vs oracle one-best {oracle}"


def test_sparsemax_is_no_worse_than_softmax(runs):
    for size in ('C=2', 'C=4', 'C=8'):
        softmax = [_eer(d / 'eval' / 'softmax' / 'report.json')[size] for d in runs.values()]
        sparsemax = [_eer(d / 'eval' / 'sparsemax' / 'report.json')[size] for d in runs.values()]
        assert np.median(sparsemax) <= np.median(softmax) + 0.005, f"{size}: {sparsemax} vs {softmax}"


def test_finetuning_beats_untrained_blocks(runs):
    gaps = []
    for seed, directory in runs.items():
        run = RunConfig(command='eval', seed=seed, out_dir=directory)
        train = load_split(directory / 'dataset', 'train')
        test = load_split(directory / 'dataset', run.eval.split)
        config = replace(run.model, num_speakers=train.num_speakers, normalizer='softmax',
                         channels_train=run.finetune.channels_per_epoch)
        untrained = load_pretrained_freeze(directory / 'pretrain' / 'checkpoint', config, stream(seed, INIT, 1))
        trials = build_trials(test.manifest, stream(seed, TRIALS))
        baseline = evaluate(untrained, test, trials, [run.sim.channels], seed).conditions[f"C={run.sim.channels}"]
        tuned = _eer(directory / 'eval' / 'softmax' / 'report.json')[f"C={run.sim.channels}"]
        gaps.append(tuned - baseline.eer)
    assert np.median(gaps) < 0.0, f"fine-tuned minus untrained EER per seed: {gaps}"
