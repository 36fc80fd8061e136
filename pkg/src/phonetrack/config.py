"""Run configuration: a single JSON document, validated with all errors reported at once."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .features import Scheme
from .matchmismatch import SegmentationConfig
from .nn.train import TrainConfig
from .trf import DEFAULT_LAMBDA_GRID, DEFAULT_WINDOW_MS

SCHEME_NAMES = [s.value for s in Scheme]

_POS_INT = {"type": "integer", "minimum": 1}
_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "max_epochs": {"type": "integer", "minimum": 0},
        "patience": _POS_INT,
        "learning_rate": {"type": "number", "minimum": 0},
        "batch_size": _POS_INT,
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["manifest"],
            "properties": {"manifest": {"type": "string"}},
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_subjects": {"type": "integer", "minimum": 0},
                "duration_s": {"type": "number", "minimum": 0},
                "snr_db": {"type": ["number", "null"]},
                "noise": {"enum": ["white", "pink"]},
                "scheme": {"enum": SCHEME_NAMES},
                "mixing_jitter": {"type": "number", "minimum": 0},
            },
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "highpass_hz": {"type": "number", "exclusiveMinimum": 0},
                "filter_order": _POS_INT,
                "intermediate_fs": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "target_fs": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "schemes": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": SCHEME_NAMES}},
        "trf": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window_ms": {"type": "number", "minimum": 0},
                "lambda_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "channels": {"type": ["array", "null"], "minItems": 1, "items": {"type": "string"}},
                "topo_windows_ms": {
                    "type": "array",
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                },
            },
        },
        "mm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "scheme": {"enum": SCHEME_NAMES},
                "segmentation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "window_s": {"type": "number", "exclusiveMinimum": 0,
                                     "description": "SegmentationConfig requires window_s > 0"},
                        "overlap_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1,
                                             "description": "SegmentationConfig requires 0 <= overlap_fraction < 1"},
                        "mismatch_gap_s": {"type": "number", "minimum": 0,
                                           "description": "SegmentationConfig requires mismatch_gap_s >= 0"},
                    },
                },
                "model": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _POS_INT for k in ("time_kernel", "time_stride", "eeg_filters",
                                                         "speech_filters", "lstm_units", "head_hidden")},
                },
                "train": _TRAIN,
                "finetune": _TRAIN,
            },
        },
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pairs": {
                    "type": "array",
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"enum": SCHEME_NAMES}},
                },
            },
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "preprocess": {"highpass_hz": 0.5, "filter_order": 4, "intermediate_fs": 1024.0, "target_fs": 64.0},
    "schemes": ["VC", "PHONE"],
    "trf": {
        "window_ms": DEFAULT_WINDOW_MS,
        "lambda_grid": [float(x) for x in DEFAULT_LAMBDA_GRID],
        "channels": None,
        "topo_windows_ms": [[80.0, 130.0], [180.0, 230.0], [350.0, 400.0]],
    },
    "mm": {
        "enabled": True,
        "scheme": "VC",
        "segmentation": {"window_s": 5.0, "overlap_fraction": 0.8, "mismatch_gap_s": 1.0},
        "model": {"time_kernel": 9, "time_stride": 3, "eeg_filters": 64, "speech_filters": 64,
                  "lstm_units": 64, "head_hidden": 128},
        "train": {"max_epochs": 30, "patience": 5, "learning_rate": 1e-3, "batch_size": 64,
                  "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
        "finetune": {"max_epochs": 30, "patience": 5, "learning_rate": 1e-4, "batch_size": 64,
                     "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    },
    "synth": {"n_subjects": 2, "duration_s": 300.0, "snr_db": 0.0, "noise": "pink", "scheme": "VC",
              "mixing_jitter": 0.3},
    "stats": {"pairs": None},
}


class ConfigError(ValueError):
    """Validation failure carrying every problem found, each prefixed by its key path."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


def _merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _key_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        parts.append(missing)
    return ".".join(parts) or "<root>"


def _schema_errors(raw: Any) -> list[str]:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        msg = f"{_key_path(err)}: {err.message}"
        hint = err.schema.get("description") if isinstance(err.schema, Mapping) else None
        if hint:
            msg += f" ({hint})"
        errors.append(msg)
    return errors


def _semantic_errors(cfg: dict, base_dir: Path) -> list[str]:
    errors = []
    if "dataset" not in cfg and "synth_requested" not in cfg:
        errors.append("dataset.manifest: required unless a synth section is given")
    if "dataset" in cfg and "synth_requested" in cfg:
        errors.append("dataset: give either a dataset manifest or a synth section, not both")
    manifest = cfg.get("dataset", {}).get("manifest")
    if isinstance(manifest, str) and not (base_dir / manifest).is_file():
        errors.append(f"dataset.manifest: file not found: {base_dir / manifest}")
    for stage in ("train", "finetune"):
        t = cfg.get("mm", {}).get(stage, {})
        if isinstance(t.get("max_epochs"), int) and isinstance(t.get("patience"), int):
            if t["max_epochs"] > 0 and not t["patience"] < t["max_epochs"]:
                errors.append(f"mm.{stage}.patience: must be smaller than max_epochs ({t['max_epochs']})")
    schemes = cfg.get("schemes")
    pairs = cfg.get("stats", {}).get("pairs") or []
    if isinstance(schemes, list):
        for i, pair in enumerate(pairs):
            for name in pair if isinstance(pair, list) else []:
                if name not in schemes:
                    errors.append(f"stats.pairs.{i}: scheme {name} is not in schemes {schemes}")
    for i, win in enumerate(cfg.get("trf", {}).get("topo_windows_ms") or []):
        if isinstance(win, list) and len(win) == 2 and all(isinstance(v, (int, float)) for v in win):
            if win[0] > win[1]:
                errors.append(f"trf.topo_windows_ms.{i}: lower bound exceeds upper bound")
    return errors


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default filled in."""

    values: dict
    source: Path | None = None

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source else Path.cwd()

    def dataset_manifest(self) -> Path | None:
        m = self.values.get("dataset", {}).get("manifest")
        return (self.base_dir / m).resolve() if m else None

    def output_dir(self, override: str | Path | None = None) -> Path:
        if override is not None:
            return Path(override)
        return self.base_dir / self.values.get("output_dir", "run")

    @property
    def schemes(self) -> list[str]:
        return list(self.values["schemes"])

    @property
    def comparison_pairs(self) -> list[tuple[str, str]]:
        pairs = self.values["stats"]["pairs"]
        if pairs is None:
            s = self.schemes
            pairs = [(a, b) for i, a in enumerate(s) for b in s[i + 1:]]
        return [tuple(p) for p in pairs]

    def segmentation(self) -> SegmentationConfig:
        return SegmentationConfig(**self.values["mm"]["segmentation"])

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.values["mm"][stage])

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def set_key(raw: dict, dotted: str, value: Any) -> None:
    """Assign ``value`` at a dotted key path, creating intermediate objects."""
    node = raw
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{dotted}: {k} is not an object"])
    node[keys[-1]] = value


def validate_config(raw: Any, base_dir: str | Path | None = None, source: Path | None = None) -> RunConfig:
    """Check a parsed config document; raise :class:`ConfigError` listing every problem."""
    base_dir = Path(base_dir) if base_dir is not None else (source.parent if source else Path.cwd())
    if not isinstance(raw, dict):
        raise ConfigError([f"<root>: expected a JSON object, got {type(raw).__name__}"])
    errors = _schema_errors(raw)
    merged = _merge(DEFAULTS, raw)
    if "synth" in raw:
        merged["synth_requested"] = True
    errors += _semantic_errors(merged, base_dir)
    if errors:
        raise ConfigError(errors)
    merged.pop("synth_requested", None)
    if "synth" not in raw:
        merged.pop("synth")
    return RunConfig(merged, source)


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read and validate a config file. An empty file counts as an empty object."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc.strerror}"]) from exc
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: not valid JSON at line {exc.lineno}: {exc.msg}"]) from exc
    for key, value in (overrides or {}).items():
        if isinstance(raw, dict):
            set_key(raw, key, value)
    return validate_config(raw, source=path.resolve())
