"""Run configuration: key=value files, CLI overrides, and the config hash.

Config files are plain ``key = value`` lines (``#`` comments allowed).
Unknown keys are rejected so typos fail loudly. The config hash covers only
the keys that determine parameter shapes, so train/predict runs can check
checkpoint compatibility without caring about, say, the learning rate.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Optional

from .model import MODEL_SHAPE_KEYS, ModelConfig
from .trainer import TrainConfig


class BadConfig(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    hidden_size: int = 256
    num_layers: int = 3
    dropout: float = 0.5
    aggregation: str = "sum"
    use_gru: bool = True
    gru_on_initial_features: bool = False
    pair_agg: str = "max"
    threshold: float = 0.5
    strict_same_bar_candidates: bool = False
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    clip_norm: Optional[float] = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden_size=self.hidden_size, num_layers=self.num_layers,
            dropout_p=self.dropout, aggregation=self.aggregation,
            use_gru=self.use_gru,
            gru_on_initial_features=self.gru_on_initial_features,
            threshold=self.threshold, pair_agg=self.pair_agg,
            strict_same_bar_candidates=self.strict_same_bar_candidates)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr,
                           weight_decay=self.weight_decay, seed=self.seed,
                           val_fraction=self.val_fraction,
                           clip_norm=self.clip_norm)

    def to_text(self) -> str:
        """Effective configuration as a sorted, re-parseable key=value file."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, text: str):
    text = text.strip()
    if key in ("use_gru", "gru_on_initial_features",
               "strict_same_bar_candidates"):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise BadConfig(f"{key}: {text!r} is not a boolean")
    if key in ("seed", "hidden_size", "num_layers", "epochs"):
        try:
            return int(text)
        except ValueError as exc:
            raise BadConfig(f"{key}: {text!r} is not an integer") from exc
    if key in ("dropout", "threshold", "lr", "weight_decay", "val_fraction"):
        try:
            return float(text)
        except ValueError as exc:
            raise BadConfig(f"{key}: {text!r} is not a number") from exc
    if key == "clip_norm":
        if text.lower() in ("none", ""):
            return None
        try:
            return float(text)
        except ValueError as exc:
            raise BadConfig(f"clip_norm: {text!r} is not a number") from exc
    return text  # aggregation, pair_agg


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"{source}:{lineno}: expected key = value, "
                            f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise BadConfig(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise BadConfig(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_run_config(path: Optional[Path] = None,
                    overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the config file, then CLI overrides; validated."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise BadConfig(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text(encoding="utf-8"),
                                        source=str(path)))
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise BadConfig(f"unknown override {key!r}")
        if value is not None:
            values[key] = value
    config = RunConfig(**values)
    try:
        config.model_config().validate()
        config.train_config().validate()
    except ValueError as exc:
        raise BadConfig(str(exc)) from exc
    return config


def config_hash(config: RunConfig) -> str:
    """Hash of the shape-determining keys only (12 hex chars)."""
    shape = {k: getattr(config.model_config(), k) for k in MODEL_SHAPE_KEYS}
    blob = json.dumps(shape, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]
