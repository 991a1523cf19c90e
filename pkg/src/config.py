from dotenv import load_dotenv
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints
import json
import os

from src.constants import NORMALIZERS, STAGE_PRETRAIN, STAGE_FINETUNE
from src.errors import ConfigError

load_dotenv()

OUTPUT_DIR = Path(os.getenv('STB_ASV_OUT', './runs'))
DEFAULT_SEED = int(os.getenv('STB_ASV_SEED', 0))
LOG_LEVEL = os.getenv('STB_ASV_LOG_LEVEL', 'INFO').upper()
WORKERS = int(os.getenv('STB_ASV_WORKERS', os.cpu_count() or 1))
COLOR_LOGS = os.getenv('STB_ASV_COLOR_LOGS', 'true').lower() in ['true', 'yes', '1', 'y']


def _check(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigError(f"{key}: {message}")


def _check_range(value: Tuple[float, float], key: str, lower: float = float('-inf')):
    _check(len(value) == 2, key, "expected a [low, high] pair")
    _check(lower <= value[0] <= value[1], key, f"invalid range {list(value)}")


@dataclass(frozen=True)
class SimConfig:
    train_speakers: int = 20
    dev_speakers: int = 0
    test_speakers: int = 12
    scenes_per_speaker: int = 4
    utterances_per_scene: int = 2
    channels: int = 8
    frames: int = 50
    feature_dim: int = 24
    room_length: Tuple[float, float] = (5.0, 25.0)
    room_width: Tuple[float, float] = (5.0, 25.0)
    room_height: Tuple[float, float] = (2.7, 4.0)
    t60: Tuple[float, float] = (0.2, 0.4)
    wall_margin: float = 0.25
    gain0: float = 1.0
    snr0_db: float = 10.0
    snr_jitter_db: float = 2.0
    tilt_range: float = 0.3
    critical_distance: float = 1.5
    frame_shift: float = 0.01
    ar_range: Tuple[float, float] = (0.5, 0.9)
    scale_range: Tuple[float, float] = (0.6, 1.0)
    session_std: float = 0.3
    min_speaker_distance: float = 1.0
    agc: bool = True
    test_noise: str = 'colored'
    noise_ar: float = 0.7

    def validate(self):
        for name in ('train_speakers', 'test_speakers', 'scenes_per_speaker', 'utterances_per_scene',
                     'channels', 'frames', 'feature_dim'):
            _check(getattr(self, name) >= 1, f"sim.{name}", "must be >= 1")
        _check(self.dev_speakers >= 0, "sim.dev_speakers", "must be >= 0")
        _check_range(self.room_length, "sim.room_length", 0.0)
        _check_range(self.room_width, "sim.room_width", 0.0)
        _check_range(self.room_height, "sim.room_height", 0.0)
        _check_range(self.t60, "sim.t60", 0.0)
        _check_range(self.ar_range, "sim.ar_range", 0.0)
        _check(self.ar_range[1] < 1.0, "sim.ar_range", "AR coefficients must be < 1")
        _check_range(self.scale_range, "sim.scale_range", 0.0)
        _check(self.scale_range[0] > 0, "sim.scale_range", "scales must be > 0")
        min_extent = min(self.room_length[0], self.room_width[0], self.room_height[0])
        _check(self.wall_margin >= 0 and 2 * self.wall_margin < min_extent, "sim.wall_margin",
               "margin leaves no room for placements")
        _check(self.gain0 > 0, "sim.gain0", "must be > 0")
        _check(self.snr_jitter_db >= 0, "sim.snr_jitter_db", "must be >= 0")
        _check(self.critical_distance > 0, "sim.critical_distance", "must be > 0")
        _check(self.frame_shift > 0, "sim.frame_shift", "must be > 0")
        _check(self.session_std >= 0, "sim.session_std", "must be >= 0")
        _check(self.test_noise in ('white', 'colored'), "sim.test_noise", "expected 'white' or 'colored'")
        _check(0.0 <= self.noise_ar < 1.0, "sim.noise_ar", "must be in [0, 1)")


@dataclass(frozen=True)
class StbConfig:
    input_dim: int = 24
    feature_dim: int = 16
    num_blocks: int = 2
    heads: int = 4
    frames: int = 50
    channels_train: int = 4
    sap_dim: int = 16
    ffn_dim: int = 32
    num_speakers: int = 0
    normalizer: str = 'softmax'
    block_order: str = 'cfl_first'
    layers: str = 'both'
    score_sharing: str = 'per_head'
    fusion: str = 'mean'
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02
    out_proj_scale: float = 0.1
    classifier_init_std: float = 0.0

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.heads

    def validate(self):
        _check(self.num_blocks >= 1, "model.num_blocks", "K must be >= 1")
        _check(self.heads >= 1, "model.heads", "must be >= 1")
        _check(self.feature_dim % self.heads == 0, "model.heads",
               f"feature_dim {self.feature_dim} not divisible by {self.heads} heads")
        for name in ('input_dim', 'feature_dim', 'frames', 'channels_train', 'sap_dim', 'ffn_dim'):
            _check(getattr(self, name) >= 1, f"model.{name}", "must be >= 1")
        _check(self.num_speakers >= 0, "model.num_speakers", "must be >= 0")
        _check(self.normalizer in NORMALIZERS, "model.normalizer", f"expected one of {NORMALIZERS}")
        _check(self.block_order in ('cfl_first', 'ccl_first'), "model.block_order",
               "expected 'cfl_first' or 'ccl_first'")
        _check(self.layers in ('both', 'cfl_only', 'ccl_only'), "model.layers",
               "expected 'both', 'cfl_only' or 'ccl_only'")
        _check(self.score_sharing in ('per_head', 'shared'), "model.score_sharing",
               "expected 'per_head' or 'shared'")
        _check(self.fusion in ('mean', 'per_channel_sap'), "model.fusion",
               "expected 'mean' or 'per_channel_sap'")
        _check(self.layer_norm_eps > 0, "model.layer_norm_eps", "must be > 0")
        _check(self.init_std > 0, "model.init_std", "must be > 0")
        _check(self.classifier_init_std >= 0, "model.classifier_init_std", "must be >= 0")


@dataclass(frozen=True)
class PretrainSection:
    # budget for > 90% train accuracy on the default 20-speaker set (asserted by the slow recipe tests)
    epochs: int = 80
    batch_size: int = 8
    learning_rate: float = 2e-3
    weight_decay: float = 0.0

    def validate(self, key: str = "train.pretrain"):
        _check(self.epochs >= 1, f"{key}.epochs", "must be >= 1")
        _check(self.batch_size >= 1, f"{key}.batch_size", "must be >= 1")
        _check(self.learning_rate > 0, f"{key}.learning_rate", "must be > 0")
        _check(self.weight_decay >= 0, f"{key}.weight_decay", "must be >= 0")


@dataclass(frozen=True)
class FinetuneSection(PretrainSection):
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    channels_per_epoch: int = 4
    normalizers: Tuple[str, ...] = NORMALIZERS

    def validate(self, key: str = "train.finetune"):
        super().validate(key)
        _check(self.channels_per_epoch >= 1, f"{key}.channels_per_epoch", "must be >= 1")
        _check(len(self.normalizers) >= 1, f"{key}.normalizers", "needs at least one entry")
        for name in self.normalizers:
            _check(name in NORMALIZERS, f"{key}.normalizers", f"unknown normalizer '{name}'")


@dataclass(frozen=True)
class EvalConfig:
    split: str = 'test'
    channel_subset_sizes: Tuple[int, ...] = (2, 4, 8)
    normalizers: Tuple[str, ...] = NORMALIZERS
    ranks: int = 6
    batch_size: int = 16

    def validate(self):
        _check(self.split in ('dev', 'test'), "eval.split", "expected 'dev' or 'test'")
        _check(len(self.channel_subset_sizes) >= 1, "eval.channel_subset_sizes", "needs at least one size")
        _check(all(size >= 1 for size in self.channel_subset_sizes), "eval.channel_subset_sizes",
               "sizes must be >= 1")
        for name in self.normalizers:
            _check(name in NORMALIZERS, "eval.normalizers", f"unknown normalizer '{name}'")
        _check(self.ranks >= 1, "eval.ranks", "must be >= 1")
        _check(self.batch_size >= 1, "eval.batch_size", "must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Resolved settings for one training stage"""
    stage: str
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    channels_per_epoch: int = 1
    normalizer: str = 'softmax'
    weight_decay: float = 0.0

    def __post_init__(self):
        _check(self.stage in (STAGE_PRETRAIN, STAGE_FINETUNE), "train.stage", f"unknown stage '{self.stage}'")
        _check(self.epochs >= 1 and self.batch_size >= 1, "train", "counts must be positive")
        _check(self.channels_per_epoch >= 1, "train.channels_per_epoch", "must be >= 1")
        _check(self.stage != STAGE_PRETRAIN or self.channels_per_epoch == 1, "train.channels_per_epoch",
               "pretraining is single-channel")
        _check(self.normalizer in NORMALIZERS, "train.normalizer", f"expected one of {NORMALIZERS}")


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out_dir: Path
    config_path: Optional[Path] = None
    force: bool = False
    sim: SimConfig = field(default_factory=SimConfig)
    model: StbConfig = field(default_factory=StbConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        _check(self.model.input_dim == self.sim.feature_dim, "model.input_dim",
               f"must match sim.feature_dim ({self.sim.feature_dim})")
        _check(self.finetune.channels_per_epoch <= self.sim.channels, "train.finetune.channels_per_epoch",
               f"exceeds sim.channels ({self.sim.channels})")
        _check(max(self.eval.channel_subset_sizes) <= self.sim.channels, "eval.channel_subset_sizes",
               f"exceeds sim.channels ({self.sim.channels})")

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(stage=STAGE_PRETRAIN, epochs=self.pretrain.epochs, batch_size=self.pretrain.batch_size,
                           learning_rate=self.pretrain.learning_rate, seed=self.seed,
                           weight_decay=self.pretrain.weight_decay)

    def finetune_config(self, normalizer: str) -> TrainConfig:
        return TrainConfig(stage=STAGE_FINETUNE, epochs=self.finetune.epochs, batch_size=self.finetune.batch_size,
                           learning_rate=self.finetune.learning_rate, seed=self.seed,
                           channels_per_epoch=self.finetune.channels_per_epoch, normalizer=normalizer,
                           weight_decay=self.finetune.weight_decay)

    def snapshot(self) -> Dict[str, Any]:
        """Config-file shaped dict that reproduces this run"""
        return {
            'seed': self.seed,
            'sim': _to_json(self.sim),
            'model': _to_json(self.model),
            'train': {'pretrain': _to_json(self.pretrain), 'finetune': _to_json(self.finetune)},
            'eval': _to_json(self.eval),
        }

    def write_snapshot(self, directory: Path) -> Path:
        from src.constants import RESOLVED_CONFIG_FILENAME
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_FILENAME
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.snapshot(), f, indent=4, sort_keys=True)
            f.write('\n')
        return path


def _to_json(section) -> Dict[str, Any]:
    return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(section).items()}


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = getattr(hint, '__origin__', None)
    if origin is tuple:
        _check(isinstance(value, (list, tuple)), key, f"expected a list, got {type(value).__name__}")
        item_type = hint.__args__[0]
        return tuple(_coerce(item, item_type, f"{key}[{index}]") for index, item in enumerate(value))
    if hint is bool:
        _check(isinstance(value, bool), key, f"expected a boolean, got {type(value).__name__}")
        return value
    if hint is int:
        _check(isinstance(value, int) and not isinstance(value, bool), key,
               f"expected an integer, got {type(value).__name__}")
        return value
    if hint is float:
        _check(isinstance(value, (int, float)) and not isinstance(value, bool), key,
               f"expected a number, got {type(value).__name__}")
        return float(value)
    if hint is str:
        _check(isinstance(value, str), key, f"expected a string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{key}: unsupported field type {hint}")


def parse_section(cls, data: Any, key: str):
    """Build a config dataclass from a JSON object, rejecting unknown keys"""
    if data is None:
        data = {}
    _check(isinstance(data, dict), key, "expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{key}: unknown key(s) {', '.join(unknown)}")
    values = {name: _coerce(value, hints[name], f"{key}.{name}") for name, value in data.items()}
    section = cls(**values)
    section.validate()
    return section


def load_run_config(command: str, config_path: Optional[Path] = None, seed: Optional[int] = None,
                    out_dir: Optional[Path] = None, force: bool = False) -> RunConfig:
    data: Dict[str, Any] = {}
    if config_path is not None:
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
        _check(isinstance(data, dict), "config", "top level must be an object")

    unknown = sorted(set(data) - {'seed', 'sim', 'model', 'train', 'eval'})
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")

    train = data.get('train') or {}
    _check(isinstance(train, dict), "train", "expected an object")
    unknown = sorted(set(train) - {'pretrain', 'finetune'})
    if unknown:
        raise ConfigError(f"train: unknown key(s) {', '.join(unknown)}")

    if seed is None:
        seed = _coerce(data['seed'], int, 'seed') if 'seed' in data else DEFAULT_SEED

    return RunConfig(
        command=command,
        seed=seed,
        out_dir=Path(out_dir) if out_dir is not None else OUTPUT_DIR,
        config_path=config_path,
        force=force,
        sim=parse_section(SimConfig, data.get('sim'), 'sim'),
        model=parse_section(StbConfig, data.get('model'), 'model'),
        pretrain=parse_section(PretrainSection, train.get('pretrain'), 'train.pretrain'),
        finetune=parse_section(FinetuneSection, train.get('finetune'), 'train.finetune'),
        eval=parse_section(EvalConfig, data.get('eval'), 'eval'),
    )
