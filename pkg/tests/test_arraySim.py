import math
from dataclasses import replace

import numpy as np
import pytest

from src.arraySim import (Node, Scene, clean_frames, render_utterance, reselect_channels, sample_scene,
                          sample_speakers, smear)
from src.config import SimConfig
from src.errors import ConfigError, RangeError
from src.tensor import Tensor


@pytest.fixture(scope='module')
def config():
    return SimConfig(frames=50, feature_dim=24)


@pytest.fixture(scope='module')
def speaker(config):
    return sample_speakers(np.random.default_rng(0), 1, config)[0]


def _lag_one_correlation(x):
    x = x - x.mean(axis=0)
    return float((x[1:] * x[:-1]).sum() / (x ** 2).sum())


def test_single_node_is_its_own_oracle(config, speaker):
    scene = sample_scene(np.random.default_rng(1), 1, config)
    utterance = render_utterance(speaker, scene, 50, np.random.default_rng(2))
    assert utterance.features.shape == (1, 50, 24)
    assert utterance.clean.shape == (1, 50, 24)
    assert utterance.oracle_channel == 0


def test_same_stream_same_scene(config, speaker):
    a = sample_scene(np.random.default_rng(7), 6, config)
    b = sample_scene(np.random.default_rng(7), 6, config)
    assert a.source_pos == b.source_pos
    assert [n.pos for n in a.nodes] == [n.pos for n in b.nodes]
    ua = render_utterance(speaker, a, 50, np.random.default_rng(8))
    ub = render_utterance(speaker, b, 50, np.random.default_rng(8))
    assert np.array_equal(ua.features, ub.features)


def test_placements_stay_inside_the_room(config):
    rng = np.random.default_rng(3)
    for _ in range(1000):
        scene = sample_scene(rng, 4, config)
        assert config.room_length[0] <= scene.room[0] <= config.room_length[1]
        assert config.t60[0] <= scene.t60 <= config.t60[1]
        for pos in [scene.source_pos] + [n.pos for n in scene.nodes]:
            for coordinate, extent in zip(pos, scene.room):
                assert config.wall_margin <= coordinate <= extent - config.wall_margin


def test_gain_and_snr_follow_distance(config):
    quiet = replace(config, snr_jitter_db=0.0)
    scene = sample_scene(np.random.default_rng(4), 8, quiet)
    for node, distance in zip(scene.nodes, scene.distances):
        assert node.gain == pytest.approx(quiet.gain0 / (1.0 + distance))
        assert node.snr_db == pytest.approx(quiet.snr0_db - 20.0 * math.log10(1.0 + distance))
        assert 0.0 < node.reverb_mix < 1.0
    assert scene.oracle_channel == int(np.argmax([n.snr_db for n in scene.nodes]))


@pytest.mark.parametrize('overrides', [
    {'wall_margin': 3.0},
    {'room_length': (10.0, 5.0)},
    {'ar_range': (0.5, 1.0)},
    {'test_noise': 'pink'},
])
def test_invalid_geometry_or_noise(config, overrides):
    with pytest.raises(ConfigError):
        sample_scene(np.random.default_rng(0), 2, replace(config, **overrides))


def test_scene_needs_a_node(config):
    with pytest.raises(ConfigError):
        sample_scene(np.random.default_rng(0), 0, config)


def test_impossible_speaker_spacing(config):
    with pytest.raises(ConfigError, match='min_speaker_distance'):
        sample_speakers(np.random.default_rng(0), 3, replace(config, min_speaker_distance=1e3), max_attempts=50)


def test_clean_node_passes_signal_through(config, speaker):
    tilt = np.ones(24)
    node = Node(pos=(1.0, 1.0, 1.0), gain=1.0, tilt=tilt, smear_t60=0.0, snr_db=math.inf, reverb_mix=0.0)
    scene = Scene(room=(5.0, 5.0, 3.0), source_pos=(2.0, 2.0, 1.0), nodes=(node, node), t60=0.0)
    utterance = render_utterance(speaker, scene, 50, np.random.default_rng(5), agc=False)
    np.testing.assert_array_equal(utterance.features[0], utterance.clean[0])
    np.testing.assert_array_equal(utterance.features[1], utterance.clean[0])


def test_realized_snr_matches_node_snr(config, speaker):
    rng = np.random.default_rng(6)
    for _ in range(200):
        scene = sample_scene(rng, 3, config)
        utterance = render_utterance(speaker, scene, 50, rng, agc=False, frame_shift=config.frame_shift)
        for channel, node in enumerate(scene.nodes):
            signal = node.gain * node.tilt * smear(utterance.clean[0], node.smear_t60, config.frame_shift,
                                                   node.reverb_mix)
            noise = utterance.features[channel] - signal
            realized = 10.0 * math.log10(np.mean(signal ** 2) / np.mean(noise ** 2))
            assert abs(realized - node.snr_db) < 1.0


def test_agc_gives_unit_rms(config, speaker):
    scene = sample_scene(np.random.default_rng(10), 4, config)
    utterance = render_utterance(speaker, scene, 50, np.random.default_rng(11), noise='colored')
    rms = np.sqrt((utterance.features ** 2).mean(axis=(1, 2)))
    np.testing.assert_allclose(rms, 1.0)


def test_longer_reverberation_smears_more():
    x = np.random.default_rng(12).normal(size=(2000, 4))
    short = _lag_one_correlation(smear(x, 0.1, 0.01))
    long = _lag_one_correlation(smear(x, 0.5, 0.01))
    assert 0.0 < short < long < 1.0
    np.testing.assert_array_equal(smear(x, 0.0, 0.01), x)


def test_clean_frames_are_stationary(speaker):
    frames = clean_frames(speaker, 20000, np.random.default_rng(13))
    np.testing.assert_allclose(frames.mean(axis=0), speaker.mean, atol=0.2)
    np.testing.assert_allclose(frames.std(axis=0), speaker.scale, rtol=0.1)


def test_reselect_is_a_subset_without_repeats():
    features = np.arange(8)[:, None, None] * np.ones((8, 3, 2))
    picked = reselect_channels(features, 4, np.random.default_rng(0))
    channels = picked[:, 0, 0].astype(int)
    assert picked.shape == (4, 3, 2)
    assert len(set(channels)) == 4
    again = reselect_channels(features, 4, np.random.default_rng(0))
    assert np.array_equal(picked, again)
    whole = reselect_channels(Tensor(features), 8, np.random.default_rng(1))
    assert isinstance(whole, Tensor)
    assert sorted(whole.data[:, 0, 0].astype(int)) == list(range(8))


@pytest.mark.parametrize('k', [0, 9])
def test_reselect_out_of_range(k):
    with pytest.raises(RangeError):
        reselect_channels(np.zeros((8, 3, 2)), k, np.random.default_rng(0))


def test_reselect_is_uniform():
    features = np.arange(2)[:, None, None] * np.ones((2, 1, 1))
    rng = np.random.default_rng(14)
    first = sum(int(reselect_channels(features, 1, rng)[0, 0, 0]) == 0 for _ in range(10000))
    assert abs(first - 5000) <= 200
