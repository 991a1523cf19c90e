"""Synthetic dataset on disk: per-split JSON manifests plus tensor shards"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.arraySim import SpeakerProfile, Utterance, render_utterance, sample_scene, sample_speakers
from src.config import WORKERS, SimConfig
from src.constants import MANIFEST_FILENAME, SHARD_DIRNAME, SPLITS, TENSOR_SUFFIX
from src.errors import ManifestError, ValidationError
from src.randomStreams import SIM, stream
from src.tensorFile import read_tensor, write_tensor

logger = logging.getLogger(__name__)

UTTERANCE_FIELDS = ('id', 'speaker', 'scene', 'shard_file', 'clean_shard_file', 'oracle_channel', 'distances',
                    'snr_db')


@dataclass
class UtteranceRecord:
    id: str
    speaker: str
    scene: str
    shard_file: str
    clean_shard_file: str
    oracle_channel: int
    distances: List[float]
    snr_db: List[float]


@dataclass
class SceneRecord:
    id: str
    room: List[float]
    source_pos: List[float]
    t60: float
    node_positions: List[List[float]]


@dataclass
class Manifest:
    split: str
    channels: int
    frames: int
    feature_dim: int
    speakers: List[str]
    utterances: List[UtteranceRecord] = field(default_factory=list)
    scenes: List[SceneRecord] = field(default_factory=list)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SplitData:
    """A split loaded into memory, with speaker ids mapped to class indices"""
    manifest: Manifest
    features: List[np.ndarray]
    clean: List[np.ndarray]
    labels: np.ndarray
    label_map: Dict[str, int]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def num_speakers(self) -> int:
        return len(self.label_map)


def write_manifest(manifest: Manifest, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest.to_json(), f, indent=4, sort_keys=True)
        f.write('\n')


def _require(entry: Dict[str, Any], key: str, where: str):
    if key not in entry:
        raise ManifestError(f"{where}: missing field '{key}'")
    return entry[key]


def read_manifest(path: Path) -> Manifest:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}")

    where = str(path)
    utterances = []
    for index, entry in enumerate(_require(data, 'utterances', where)):
        values = {key: _require(entry, key, f"{where} utterance {index}") for key in UTTERANCE_FIELDS}
        utterances.append(UtteranceRecord(**values))
    scenes = [SceneRecord(**entry) for entry in data.get('scenes', [])]
    return Manifest(
        split=_require(data, 'split', where),
        channels=_require(data, 'channels', where),
        frames=_require(data, 'frames', where),
        feature_dim=_require(data, 'feature_dim', where),
        speakers=_require(data, 'speakers', where),
        utterances=utterances,
        scenes=scenes,
    )


def validate_disjoint(manifests: Dict[str, Manifest]):
    seen: Dict[str, str] = {}
    for split, manifest in manifests.items():
        for speaker in manifest.speakers:
            if speaker in seen:
                raise ValidationError(f"speaker {speaker} appears in both '{seen[speaker]}' and '{split}'")
            seen[speaker] = split
        unknown = {u.speaker for u in manifest.utterances} - set(manifest.speakers)
        if unknown:
            raise ValidationError(f"split '{split}' has utterances of unlisted speakers {sorted(unknown)}")


def split_speakers(profiles: Sequence[SpeakerProfile], config: SimConfig) -> Dict[str, List[SpeakerProfile]]:
    counts = {'train': config.train_speakers, 'dev': config.dev_speakers, 'test': config.test_speakers}
    splits, start = {}, 0
    for split in SPLITS:
        splits[split] = list(profiles[start:start + counts[split]])
        start += counts[split]
    return splits


def _render_scene(seed: int, split_index: int, scene_index: int, scene_id: str, profile: SpeakerProfile,
                  config: SimConfig, noise: str, split_dir: Path) -> Tuple[SceneRecord, List[UtteranceRecord]]:
    """Sample one scene and render its utterances; streams are keyed by counters only"""
    scene = sample_scene(stream(seed, SIM, split_index, scene_index), config.channels, config, scene_id)
    records = []
    for utt_index in range(config.utterances_per_scene):
        rng = stream(seed, SIM, split_index, scene_index, utt_index + 1)
        utterance: Utterance = render_utterance(profile, scene, config.frames, rng, noise=noise, agc=config.agc,
                                                session_std=config.session_std, frame_shift=config.frame_shift,
                                                noise_ar=config.noise_ar)
        utt_id = f"{scene_id}-u{utt_index}"
        shard = f"{SHARD_DIRNAME}/{utt_id}{TENSOR_SUFFIX}"
        clean_shard = f"{SHARD_DIRNAME}/{utt_id}.clean{TENSOR_SUFFIX}"
        write_tensor(split_dir / shard, utterance.features)
        write_tensor(split_dir / clean_shard, utterance.clean)
        records.append(UtteranceRecord(id=utt_id, speaker=profile.id, scene=scene_id, shard_file=shard,
                                       clean_shard_file=clean_shard, oracle_channel=utterance.oracle_channel,
                                       distances=[float(d) for d in utterance.distances],
                                       snr_db=[float(s) for s in utterance.snr_db]))
    scene_record = SceneRecord(id=scene_id, room=list(scene.room), source_pos=list(scene.source_pos), t60=scene.t60,
                               node_positions=[list(node.pos) for node in scene.nodes])
    return scene_record, records


def build_dataset(config: SimConfig, seed: int, out_dir: Path, workers: Optional[int] = None) -> Dict[str, Manifest]:
    """Render every split under out_dir/<split>/ and write its manifest"""
    config.validate()
    start = time.time()
    total = config.train_speakers + config.dev_speakers + config.test_speakers
    profiles = sample_speakers(stream(seed, SIM), total, config)
    manifests: Dict[str, Manifest] = {}

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as executor:
        for split_index, (split, speakers) in enumerate(split_speakers(profiles, config).items()):
            if not speakers:
                continue
            split_dir = out_dir / split
            noise = config.test_noise if split == 'test' else 'white'
            futures = []
            for speaker_index, profile in enumerate(speakers):
                for scene_offset in range(config.scenes_per_speaker):
                    scene_index = speaker_index * config.scenes_per_speaker + scene_offset
                    scene_id = f"{split}-{profile.id}-s{scene_offset}"
                    futures.append(executor.submit(_render_scene, seed, split_index, scene_index, scene_id, profile,
                                                   config, noise, split_dir))

            manifest = Manifest(split=split, channels=config.channels, frames=config.frames,
                                feature_dim=config.feature_dim, speakers=[p.id for p in speakers])
            for future in futures:
                scene_record, records = future.result()
                manifest.scenes.append(scene_record)
                manifest.utterances.extend(records)
            manifests[split] = manifest

    validate_disjoint(manifests)
    for split, manifest in manifests.items():
        write_manifest(manifest, out_dir / split / MANIFEST_FILENAME)
        logger.info(f"Split '{split}': {len(manifest.speakers)} speakers, {len(manifest.utterances)} utterances, "
                    f"C={manifest.channels}, T={manifest.frames}")
    logger.info(f"Dataset built in {time.time() - start:.1f}s at {out_dir}")
    return manifests


def available_splits(dataset_dir: Path) -> List[str]:
    return [split for split in SPLITS if (dataset_dir / split / MANIFEST_FILENAME).exists()]


def load_split(dataset_dir: Path, split: str, workers: Optional[int] = None) -> SplitData:
    split_dir = dataset_dir / split
    manifest = read_manifest(split_dir / MANIFEST_FILENAME)

    def load(record: UtteranceRecord) -> Tuple[np.ndarray, np.ndarray]:
        return read_tensor(split_dir / record.shard_file), read_tensor(split_dir / record.clean_shard_file)

    with ThreadPoolExecutor(max_workers=workers or WORKERS) as executor:
        arrays = list(executor.map(load, manifest.utterances))

    label_map = {speaker: index for index, speaker in enumerate(sorted(manifest.speakers))}
    labels = np.array([label_map[u.speaker] for u in manifest.utterances], dtype=np.int64)
    logger.debug(f"Loaded {len(arrays)} utterances of split '{split}' from {split_dir}")
    return SplitData(manifest=manifest, features=[a for a, _ in arrays], clean=[c for _, c in arrays],
                     labels=labels, label_map=label_map)
