"""Feature-space ad-hoc microphone array simulator.

A scene is one room with one talker and C randomly placed nodes. Each node
sees the talker's frames attenuated with distance, spectrally tilted,
smeared in time by a reverberation-like moving average and corrupted by
additive noise at a distance-dependent SNR.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Tuple, Union

import numpy as np

from src.config import SimConfig
from src.errors import ConfigError, RangeError
from src.tensor import Tensor

logger = logging.getLogger(__name__)

# ln(10^3): amplitude decay over 60 dB
_T60_DECAY = math.log(1000.0)


@dataclass(frozen=True)
class Node:
    pos: Tuple[float, float, float]
    gain: float
    tilt: np.ndarray
    smear_t60: float
    snr_db: float
    reverb_mix: float


@dataclass(frozen=True)
class Scene:
    room: Tuple[float, float, float]
    source_pos: Tuple[float, float, float]
    nodes: Tuple[Node, ...]
    t60: float
    id: str = ''

    @property
    def distances(self) -> np.ndarray:
        source = np.asarray(self.source_pos)
        return np.array([np.linalg.norm(np.asarray(node.pos) - source) for node in self.nodes])

    @property
    def oracle_channel(self) -> int:
        return int(np.argmin(self.distances))


@dataclass(frozen=True)
class SpeakerProfile:
    id: str
    mean: np.ndarray
    scale: np.ndarray
    ar: float


@dataclass
class Utterance:
    speaker: str
    scene: str
    features: np.ndarray
    clean: np.ndarray
    oracle_channel: int
    distances: np.ndarray
    snr_db: np.ndarray


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    low, high = bounds
    return float(low) if low == high else float(rng.uniform(low, high))


def sample_speakers(rng: np.random.Generator, count: int, config: SimConfig, prefix: str = 'spk',
                    max_attempts: int = 10000) -> List[SpeakerProfile]:
    """Draw speaker latents with a minimum pairwise distance between means"""
    means: List[np.ndarray] = []
    attempts = 0
    while len(means) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ConfigError(f"sim.min_speaker_distance: could not place {count} speakers "
                              f"{config.min_speaker_distance} apart")
        candidate = rng.normal(0.0, 1.0, size=config.feature_dim)
        if all(np.linalg.norm(candidate - other) >= config.min_speaker_distance for other in means):
            means.append(candidate)

    profiles = []
    for index, mean in enumerate(means):
        scale = rng.uniform(config.scale_range[0], config.scale_range[1], size=config.feature_dim)
        profiles.append(SpeakerProfile(id=f"{prefix}{index:03d}", mean=mean, scale=scale,
                                       ar=_uniform(rng, config.ar_range)))
    return profiles


def sample_scene(rng: np.random.Generator, channels: int, config: SimConfig, scene_id: str = '') -> Scene:
    if channels < 1:
        raise ConfigError(f"a scene needs at least one node, got {channels}")
    config.validate()

    room = (_uniform(rng, config.room_length), _uniform(rng, config.room_width), _uniform(rng, config.room_height))
    t60 = _uniform(rng, config.t60)
    margin = config.wall_margin

    def place() -> np.ndarray:
        return np.array([rng.uniform(margin, extent - margin) for extent in room])

    source = place()
    nodes = []
    for _ in range(channels):
        pos = place()
        while np.linalg.norm(pos - source) <= 1e-6:
            pos = place()
        distance = float(np.linalg.norm(pos - source))
        slope = rng.uniform(-config.tilt_range, config.tilt_range)
        jitter = rng.uniform(-config.snr_jitter_db, config.snr_jitter_db) if config.snr_jitter_db > 0 else 0.0
        nodes.append(Node(
            pos=tuple(float(p) for p in pos),
            gain=config.gain0 / (1.0 + distance),
            tilt=np.exp(slope * np.linspace(-1.0, 1.0, config.feature_dim)),
            smear_t60=t60,
            snr_db=config.snr0_db - 20.0 * math.log10(1.0 + distance) + jitter,
            reverb_mix=distance / (distance + config.critical_distance),
        ))
    return Scene(room=room, source_pos=tuple(float(p) for p in source), nodes=tuple(nodes), t60=t60, id=scene_id)


def clean_frames(profile: SpeakerProfile, frames: int, rng: np.random.Generator, session_std: float = 0.0) -> np.ndarray:
    """Stationary AR(1) process around the (session-perturbed) speaker mean: [T, F]"""
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    dim = profile.mean.shape[0]
    center = profile.mean + (rng.normal(0.0, session_std, size=dim) if session_std > 0 else 0.0)
    innovation = math.sqrt(1.0 - profile.ar ** 2)
    eps = rng.normal(0.0, 1.0, size=(frames, dim))
    deviation = np.empty((frames, dim))
    deviation[0] = profile.scale * eps[0]
    for t in range(1, frames):
        deviation[t] = profile.ar * deviation[t - 1] + innovation * profile.scale * eps[t]
    return center + deviation


def smear(x: np.ndarray, t60: float, frame_shift: float, mix: float = 1.0) -> np.ndarray:
    """Causal exponential moving average over frames, blended with the direct path"""
    if t60 <= 0 or mix <= 0:
        return x.copy()
    alpha = math.exp(-_T60_DECAY * frame_shift / t60)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.shape[0]):
        out[t] = alpha * out[t - 1] + (1.0 - alpha) * x[t]
    return (1.0 - mix) * x + mix * out


def _noise(rng: np.random.Generator, shape: Tuple[int, int], kind: str, ar: float) -> np.ndarray:
    """Unit-variance noise, white or AR(1)-colored along time"""
    eps = rng.normal(0.0, 1.0, size=shape)
    if kind == 'white':
        return eps
    if kind != 'colored':
        raise ConfigError(f"unknown noise kind '{kind}'")
    innovation = math.sqrt(1.0 - ar ** 2)
    out = np.empty(shape)
    out[0] = eps[0]
    for t in range(1, shape[0]):
        out[t] = ar * out[t - 1] + innovation * eps[t]
    return out


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = math.sqrt(float(np.mean(x ** 2)))
    return x / rms if rms > 0 else x


def render_utterance(profile: SpeakerProfile, scene: Scene, frames: int, rng: np.random.Generator,
                     noise: str = 'white', agc: bool = True, session_std: float = 0.0, frame_shift: float = 0.01,
                     noise_ar: float = 0.7) -> Utterance:
    clean = clean_frames(profile, frames, rng, session_std)
    channels = []
    for node in scene.nodes:
        signal = node.gain * node.tilt * smear(clean, node.smear_t60, frame_shift, node.reverb_mix)
        y = signal
        if math.isfinite(node.snr_db):
            power = float(np.mean(signal ** 2))
            sigma = math.sqrt(power / 10.0 ** (node.snr_db / 10.0))
            y = signal + sigma * _noise(rng, signal.shape, noise, noise_ar)
        channels.append(_unit_rms(y) if agc else y)

    features = np.stack(channels)
    if not np.isfinite(features).all():
        raise ConfigError(f"scene {scene.id or '<unnamed>'} rendered non-finite features")
    distances = scene.distances
    return Utterance(
        speaker=profile.id,
        scene=scene.id,
        features=features,
        clean=(_unit_rms(clean) if agc else clean)[None],
        oracle_channel=int(np.argmin(distances)),
        distances=distances,
        snr_db=np.array([node.snr_db for node in scene.nodes]),
    )


def reselect_channels(features: Union[np.ndarray, Tensor], k: int, rng: np.random.Generator) -> Union[np.ndarray, Tensor]:
    """k distinct channels of a [C, T, F] utterance, in random order"""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    count = data.shape[0]
    if not 1 <= k <= count:
        raise RangeError(f"cannot select {k} of {count} channels")
    picked = rng.permutation(count)[:k]
    selected = data[picked]
    return Tensor(selected) if isinstance(features, Tensor) else selected
