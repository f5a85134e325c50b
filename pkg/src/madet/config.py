"""Run configuration: every tunable exposed by the pipeline stages, loadable
from a flat `key = value` text file with `#` comments."""

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass
class RunConfig:
    # training
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    epoch_size: int = 120
    ma_fraction: float = 0.5
    # sampling / thresholds
    stage2_threshold: float = 0.5
    fov_threshold: float = 0.03
    median_window: int = 30
    # inference
    stride: int = 1
    stage1_stride: int = 1
    # post-processing / matching
    smooth_radius: int = 5
    score_floor: float = 1e-3
    match_radius: int = 5
    # evaluation / execution
    folds: int = 4
    seed: int = 0
    threads: int = 1
    precision: int = 64

    def validate(self):
        checks = [
            ("learning_rate", self.learning_rate > 0, "must be > 0"),
            ("momentum", 0 <= self.momentum < 1, "must be in [0, 1)"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("epoch_size", self.epoch_size >= 2, "must be >= 2"),
            ("ma_fraction", 0 < self.ma_fraction < 1, "must be in (0, 1)"),
            ("stage2.threshold", 0 <= self.stage2_threshold <= 1, "must be in [0, 1]"),
            ("fov.threshold", 0 < self.fov_threshold < 1, "must be in (0, 1)"),
            ("median.window", self.median_window >= 1, "must be >= 1"),
            ("stride", self.stride >= 1, "must be >= 1"),
            ("stage1.stride", self.stage1_stride >= 1, "must be >= 1"),
            ("post.radius", self.smooth_radius >= 1, "must be >= 1"),
            ("post.floor", self.score_floor >= 0, "must be >= 0"),
            ("match.radius", self.match_radius >= 1, "must be >= 1"),
            ("folds", self.folds >= 2, "must be >= 2"),
            ("threads", self.threads >= 1, "must be >= 1"),
            ("precision", self.precision in (32, 64), "must be 32 or 64"),
        ]
        for key, ok, why in checks:
            if not ok:
                raise ConfigError(f"{key} {why} (got {getattr(self, _KEYS[key])})")
        return self

    def to_dict(self):
        """Effective configuration under its file key names (manifest echo)."""
        by_attr = {attr: key for key, attr in _KEYS.items()}
        return {by_attr[f.name]: getattr(self, f.name) for f in fields(self)}


# config-file key -> dataclass attribute
_KEYS = {
    "learning_rate": "learning_rate",
    "momentum": "momentum",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "epoch_size": "epoch_size",
    "ma_fraction": "ma_fraction",
    "stage2.threshold": "stage2_threshold",
    "fov.threshold": "fov_threshold",
    "median.window": "median_window",
    "stride": "stride",
    "stage1.stride": "stage1_stride",
    "post.radius": "smooth_radius",
    "post.floor": "score_floor",
    "match.radius": "match_radius",
    "folds": "folds",
    "seed": "seed",
    "threads": "threads",
    "precision": "precision",
}

_INT_KEYS = {"batch_size", "epochs", "epoch_size", "median.window", "stride",
             "stage1.stride", "post.radius", "match.radius", "folds", "seed",
             "threads", "precision"}


def parse_config(path, overrides=None):
    """Read a config file; absent keys keep their defaults.

    Raises ConfigError naming the key and line for unknown keys, unparsable
    values, or constraint violations.  `overrides` (a key -> value dict)
    is applied after the file, using the same key names.
    """
    values = {}
    with open(path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value, lineno)
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    cfg = replace(RunConfig(), **{_KEYS[k]: v for k, v in values.items()})
    return cfg.validate()


def _parse_value(key, value, lineno):
    try:
        if key in _INT_KEYS:
            return int(value)
        return float(value)
    except ValueError:
        kind = "integer" if key in _INT_KEYS else "number"
        raise ConfigError(f"line {lineno}: {key} expects an {kind}, got {value!r}")
