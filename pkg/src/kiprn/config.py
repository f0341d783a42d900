"""JSON run configuration: strict dataclass construction from plain dicts."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .resizer import ConfigError, KiprnConfig

RUN_SECTIONS = ("kiprn", "backbone", "train", "dataset")


def build(cls, data: dict | None, where: str):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(names)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclasses.dataclass
class RunConfig:
    kiprn: object
    backbone: object
    train: object
    dataset: object


def parse_run_config(doc: dict) -> RunConfig:
    from .classifier import BackboneConfig
    from .engine import TrainConfig
    from .synthpave import DatasetSpec

    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(doc) - set(RUN_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}; allowed {list(RUN_SECTIONS)}")
    kiprn = build(KiprnConfig, doc.get("kiprn"), "kiprn")
    backbone = build(BackboneConfig, doc.get("backbone"), "backbone")
    train_doc = dict(doc.get("train") or {})
    for nested in ("kiprn", "backbone"):
        if nested in train_doc:
            raise ConfigError(f"train: '{nested}' belongs in its own top-level section")
    train = build(TrainConfig, {**train_doc, "kiprn": kiprn, "backbone": backbone}, "train")
    dataset = build(DatasetSpec, doc.get("dataset"), "dataset")
    kiprn.validate()
    backbone.validate()
    train.validate()
    dataset.validate()
    return RunConfig(kiprn, backbone, train, dataset)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_run_config(doc)
