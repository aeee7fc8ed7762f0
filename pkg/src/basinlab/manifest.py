"""Experiment manifests: JSON documents validated against a fixed schema.

A manifest names one experiment, the dataset, the network, one ensemble
family with its knobs, the metrics to record, and the seeds to run. Unknown
keys are rejected at every level so typos fail loudly before any training.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .data import Dataset, load_csv, load_idx, make_gaussian_blobs
from .ensembles import FAMILIES
from .errors import SchemaError
from .models import ModelSpec
from .train import TrainConfig

METRICS = (
    "ensemble_accuracy",
    "mean_member_accuracy",
    "ensemble_log_loss",
    "mean_member_log_loss",
    "q_joint",
    "predictive_variance",
    "one_vs_all_jsd",
)

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "dataset", "model", "ensemble", "train"],
    "properties": {
        "experiment": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "blobs"},
                        "K": {"type": "integer", "minimum": 2},
                        "clusters_per_class": _POS_INT,
                        "n_train": _POS_INT,
                        "n_test": _POS_INT,
                        "d": _POS_INT,
                        "spread": {"type": "number", "minimum": 0},
                        "seed": _NONNEG_INT,
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "train_images", "train_labels", "test_images", "test_labels"],
                    "properties": {
                        "kind": {"const": "idx"},
                        "train_images": {"type": "string"},
                        "train_labels": {"type": "string"},
                        "test_images": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "num_classes": {"type": "integer", "minimum": 2},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "train", "test"],
                    "properties": {
                        "kind": {"const": "csv"},
                        "train": {"type": "string"},
                        "test": {"type": "string"},
                        "num_classes": {"type": "integer", "minimum": 2},
                    },
                },
            ]
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["widths"],
            "properties": {
                "kind": {"enum": ["plain_mlp", "res_mlp"]},
                "widths": {"type": "array", "items": _POS_INT, "minItems": 1},
                "layer_norm": {"type": "boolean"},
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "M"],
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "M": _POS_INT,
                "t": _NONNEG_INT,
                "beta": {"type": "number", "minimum": 0, "maximum": 1},
                "tau": {"type": "number", "minimum": 1},
                "floor_lr": {"type": "number", "exclusiveMinimum": 0},
                "distill_epochs": _NONNEG_INT,
                "align": {"enum": ["pcd", "multi_pcd"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["epochs"],
            "properties": {
                "epochs": _POS_INT,
                "batch_size": _POS_INT,
                "peak_lr": {"type": "number", "minimum": 0},
                "warmup_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "jitter": {"type": "number", "minimum": 0},
                "flip": {"type": "boolean"},
                "reset_momentum_at_split": {"type": "boolean"},
            },
        },
        "metrics": {"type": "array", "items": {"enum": list(METRICS)}, "uniqueItems": True},
        "q_joint_samples": _POS_INT,
        "seeds": {"type": "array", "items": _NONNEG_INT, "minItems": 1, "uniqueItems": True},
        "out": {"type": "string"},
    },
}

_EXTRA = re.compile(r"'([^']+)' was unexpected")


@dataclass
class ExperimentManifest:
    experiment: str
    dataset: dict
    model: dict
    ensemble: dict
    train: dict
    metrics: list[str] = field(default_factory=lambda: ["ensemble_accuracy", "mean_member_accuracy"])
    q_joint_samples: int = 50
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    source: str | None = None

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "dataset": self.dataset,
            "model": self.model,
            "ensemble": self.ensemble,
            "train": self.train,
            "metrics": self.metrics,
            "q_joint_samples": self.q_joint_samples,
            "seeds": self.seeds,
            "out": self.out,
        }

    def digest(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in ("seeds", "out")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def model_spec(self, train_set: Dataset) -> ModelSpec:
        return ModelSpec(
            train_set.inputs.shape[1],
            train_set.num_classes,
            tuple(self.model["widths"]),
            kind=self.model.get("kind", "plain_mlp"),
            layer_norm=self.model.get("layer_norm", True),
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(master_seed=seed, **self.train)

    def datasets(self) -> tuple[Dataset, Dataset]:
        return build_datasets(self.dataset, self.source)


def _resolve(path: str, base: str | None) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = Path(base).parent / p
    return p


def build_datasets(cfg: dict, source: str | None = None) -> tuple[Dataset, Dataset]:
    kind = cfg["kind"]
    if kind == "blobs":
        kw = {k: v for k, v in cfg.items() if k != "kind"}
        return make_gaussian_blobs(**kw)
    if kind == "idx":
        nc = cfg.get("num_classes")
        train = load_idx(_resolve(cfg["train_images"], source), _resolve(cfg["train_labels"], source), nc, split="train")
        test = load_idx(_resolve(cfg["test_images"], source), _resolve(cfg["test_labels"], source), nc or train.num_classes, split="test")
        return train, test
    nc = cfg.get("num_classes")
    train = load_csv(_resolve(cfg["train"], source), nc, split="train")
    return train, load_csv(_resolve(cfg["test"], source), nc or train.num_classes, split="test")


def _best_error(error: jsonschema.ValidationError) -> jsonschema.ValidationError:
    # oneOf failures hide the useful message in the branch whose kind matched
    if error.validator == "oneOf" and isinstance(error.instance, dict):
        kind = error.instance.get("kind")
        for sub in error.context:
            branch = sub.schema_path[0] if sub.schema_path else None
            props = error.validator_value[branch].get("properties", {}) if isinstance(branch, int) else {}
            if props.get("kind", {}).get("const") == kind and not (list(sub.relative_schema_path)[1:2] == ["properties"] and list(sub.relative_path) == ["kind"]):
                return sub
    return error


def validate_manifest(doc) -> None:
    """Raise :class:`SchemaError` naming the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    # unknown keys first: they are usually the root cause of the other errors
    errors = sorted(validator.iter_errors(doc), key=lambda e: (e.validator != "additionalProperties", list(map(str, e.absolute_path)), e.message))
    if not errors:
        return
    err = _best_error(errors[0])
    parts = [str(p) for p in err.absolute_path]
    m = _EXTRA.search(err.message) if err.validator == "additionalProperties" else None
    if m:
        parts.append(m.group(1))
        msg = f"unknown key {m.group(1)!r}"
    else:
        msg = err.message
    path = "/".join(parts) or "<root>"
    raise SchemaError(msg, path)


def parse_manifest(doc: dict, source: str | None = None) -> ExperimentManifest:
    validate_manifest(doc)
    return ExperimentManifest(**doc, source=source)


def load_manifest(path) -> ExperimentManifest:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}", "<root>") from exc
    return parse_manifest(doc, str(path))
