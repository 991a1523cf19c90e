from pathlib import Path

# Binary tensor format
TENSOR_MAGIC = b'STBT'
TENSOR_VERSION = 1
TENSOR_SUFFIX = '.stbt'

# Output layout, relative to the run directory
DATASET_DIR = Path('dataset')
PRETRAIN_DIR = Path('pretrain')
FINETUNE_DIR = Path('finetune')
EVAL_DIR = Path('eval')
ORACLE_DIR = Path('oracle')
VERIFY_DIR = Path('verify')

CHECKPOINT_DIRNAME = 'checkpoint'
SHARD_DIRNAME = 'shards'

MANIFEST_FILENAME = 'manifest.json'
RESOLVED_CONFIG_FILENAME = 'resolved_config.json'
CURVE_FILENAME = 'curve.csv'
REPORT_FILENAME = 'report.json'
LOG_FILENAME = 'run.log'

SPLITS = ('train', 'dev', 'test')

# Checkpoint stages and parameter groups
STAGE_PRETRAIN = 'pretrain'
STAGE_FINETUNE = 'finetune'
PARAM_GROUPS = ('frontend', 'blocks', 'sap', 'classifier')
FROZEN_AFTER_PRETRAIN = ('frontend', 'sap')

NORMALIZERS = ('softmax', 'sparsemax')

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_PROPERTY_FAILURE = 3
