"""Dense out-of-distribution detection.

Arrays are numpy: images (3, H, W) float32 in [0, 1], logits (C, H, W),
score maps (H, W) float32 and OOD masks (H, W) uint8 with 0 inlier,
1 outlier and 255 ignore.
"""

import json

from . import _core
from ._core import (
    IGNORE,
    INLIER,
    OUTLIER,
    Checkpoint,
    ConfigError,
    DoodError,
    average_precision,
    mutual_information,
    pr_curve,
    read_scoremap,
    score_discriminative,
    score_foreign_class,
    score_max_softmax,
    score_tempered_softmax,
    write_scoremap,
)

__all__ = [
    "IGNORE", "INLIER", "OUTLIER", "Checkpoint", "ConfigError", "DoodError",
    "average_precision", "background_image", "foreign_scene", "init_checkpoint", "inlier_scene",
    "mutual_information", "pr_curve", "read_scoremap", "run_config_schema", "score_discriminative",
    "score_foreign_class", "score_max_softmax", "score_tempered_softmax", "validate_run_config",
    "write_scoremap",
]


def _dump(config):
    return "" if config is None else json.dumps(config)


def inlier_scene(seed, index, config=None):
    return _core.inlier_scene(seed, index, _dump(config))


def background_image(seed, index, config=None):
    return _core.background_image(seed, index, _dump(config))


def foreign_scene(seed, index, config=None):
    return _core.foreign_scene(seed, index, _dump(config))


def init_checkpoint(net_config, seed):
    return _core.init_checkpoint(json.dumps(net_config), seed)


def validate_run_config(config):
    """Returns the config with defaults filled in; raises ConfigError listing every violation."""
    return json.loads(_core.validate_run_config(json.dumps(config)))


def run_config_schema():
    return json.loads(_core.run_config_schema())
