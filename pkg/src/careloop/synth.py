"""Labeled synthetic patient datasets with controllable per-disease separability.

Each disease shifts a set of numeric observations by a fixed amount (with a
per-effect penetrance probability); comorbidity effects add linearly and
Gaussian noise is applied on top. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

from .records import ObservationValue, PatientRecord, TestDefinition

BASE_VISIT = datetime(2024, 1, 1, 8, 0, tzinfo=timezone.utc)


@dataclass(frozen=True)
class FeatureEffect:
    shift: float
    presence: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.presence <= 1.0:
            raise ValueError("presence must be in [0, 1]")


@dataclass(frozen=True)
class DiseaseProfile:
    disease_id: str
    feature_effects: Mapping[str, FeatureEffect]
    base_rate: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.base_rate <= 1.0:
            raise ValueError("base_rate must be in [0, 1]")
        if not any(e.shift != 0.0 for e in self.feature_effects.values()):
            raise ValueError(f"disease {self.disease_id!r} needs at least one nonzero effect")


@dataclass(frozen=True)
class GeneratorConfig:
    profiles: tuple[DiseaseProfile, ...]
    n_records: int
    noise_sigma: float
    seed: int
    baselines: Mapping[str, float] = field(default_factory=dict)
    missing_rate: float = 0.0
    include_demographics: bool = False

    def __post_init__(self) -> None:
        if self.n_records < 1:
            raise ValueError("n_records must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")

    @property
    def disease_ids(self) -> list[str]:
        return [p.disease_id for p in self.profiles]


def feature_names(config: GeneratorConfig) -> list[str]:
    names = set(config.baselines)
    for profile in config.profiles:
        names.update(profile.feature_effects)
    return sorted(names)


def generate_dataset(config: GeneratorConfig) -> tuple[list[PatientRecord], list[list[int]]]:
    """Sample records and parallel per-disease 0/1 label vectors (profile order)."""
    rng = np.random.default_rng(config.seed)
    features = feature_names(config)
    records: list[PatientRecord] = []
    labels: list[list[int]] = []
    for i in range(config.n_records):
        row = [1 if rng.random() < p.base_rate else 0 for p in config.profiles]
        values = {name: float(config.baselines.get(name, 0.0)) for name in features}
        for profile, label in zip(config.profiles, row):
            if not label:
                continue
            for name in sorted(profile.feature_effects):
                effect = profile.feature_effects[name]
                if rng.random() < effect.presence:
                    values[name] += effect.shift
        if config.noise_sigma > 0:
            for name in features:
                values[name] += rng.normal(0.0, config.noise_sigma)
        kept = dict(values)
        if config.missing_rate > 0:
            kept = {n: v for n, v in values.items() if rng.random() >= config.missing_rate}
        demographics = {}
        if config.include_demographics:
            demographics = {
                "age": round(float(rng.uniform(18, 90)), 1),
                "weight": round(float(rng.uniform(45, 110)), 1),
            }
        records.append(
            PatientRecord(
                patient_id=f"p-{i:06d}",
                visited_at=BASE_VISIT + timedelta(minutes=i),
                demographics=demographics,
                observations={n: ObservationValue.numeric(v) for n, v in sorted(kept.items())},
            )
        )
        labels.append(row)
    return records, labels


def make_test_registry(
    config: GeneratorConfig, costs: Mapping[str, float] | None = None
) -> dict[str, TestDefinition]:
    """One numeric test per generated feature, named <feature>_test."""
    costs = costs or {}
    registry = {}
    for name in feature_names(config):
        test_id = f"{name}_test"
        registry[test_id] = TestDefinition(
            test_id=test_id,
            produces=name,
            value_kind="numeric",
            cost=float(costs.get(name, 1.0)),
        )
    return registry


def write_dataset(
    out_dir: str | Path,
    records: list[PatientRecord],
    labels: list[list[int]],
    disease_ids: list[str],
    tests: dict[str, TestDefinition] | None = None,
) -> None:
    """records.ndjson + parallel labels.ndjson (+ tests.json when given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "records.ndjson").open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
    with (out / "labels.ndjson").open("w", encoding="utf-8") as fh:
        for record, row in zip(records, labels):
            doc = {"patient_id": record.patient_id, "labels": dict(zip(disease_ids, row))}
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    if tests is not None:
        from .records import tests_to_json

        (out / "tests.json").write_text(
            json.dumps(tests_to_json(tests), indent=2) + "\n", encoding="utf-8"
        )


def read_dataset(
    data_dir: str | Path,
) -> tuple[list[PatientRecord], list[list[int]], list[str]]:
    """Inverse of write_dataset; returns (records, labels, disease_ids)."""
    data = Path(data_dir)
    records = []
    with (data / "records.ndjson").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(PatientRecord.from_json(json.loads(line)))
    labels: list[list[int]] = []
    disease_ids: list[str] = []
    with (data / "labels.ndjson").open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            if not disease_ids:
                disease_ids = list(doc["labels"].keys())
            labels.append([int(doc["labels"][d]) for d in disease_ids])
    if len(labels) != len(records):
        raise ValueError("records and labels files are not parallel")
    return records, labels, disease_ids
