"""Patient records, test definitions, and deterministic feature encoding.

A record is encoded into a fixed-width numeric vector by an ``EncodingSchema``
built once from a training corpus. Missing data is zero-imputed with an
explicit missing-flag slot so downstream consumers can distinguish "normal"
from "not yet measured".
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"


def format_timestamp(ts: datetime) -> str:
    """RFC 3339 string; naive datetimes are taken as UTC."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.isoformat()


def parse_timestamp(raw: str) -> datetime:
    return datetime.fromisoformat(raw.replace("Z", "+00:00"))


@dataclass(frozen=True)
class ObservationValue:
    """One measured or reported patient fact: numeric (with unit) or categorical.

    Units are opaque strings, compared for equality only.
    """

    kind: str
    value: float | str
    unit: str = ""

    def __post_init__(self) -> None:
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        if self.kind == NUMERIC:
            if not isinstance(self.value, (int, float)) or not math.isfinite(self.value):
                raise ValueError("numeric observation value must be finite")
        elif not isinstance(self.value, str):
            raise ValueError("categorical observation value must be a string")

    @staticmethod
    def numeric(value: float, unit: str = "") -> "ObservationValue":
        return ObservationValue(NUMERIC, float(value), unit)

    @staticmethod
    def categorical(value: str) -> "ObservationValue":
        return ObservationValue(CATEGORICAL, value)

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind, "value": self.value}
        if self.kind == NUMERIC:
            doc["unit"] = self.unit
        return doc

    @staticmethod
    def from_json(doc: dict) -> "ObservationValue":
        if doc.get("kind") == NUMERIC:
            return ObservationValue.numeric(doc["value"], doc.get("unit", ""))
        if doc.get("kind") == CATEGORICAL:
            return ObservationValue.categorical(doc["value"])
        raise ValueError(f"unknown observation kind {doc.get('kind')!r}")


@dataclass
class PatientRecord:
    """Metadata, observations, and history for one patient encounter."""

    patient_id: str
    visited_at: datetime
    demographics: dict[str, float] = field(default_factory=dict)
    history: set[str] = field(default_factory=set)
    observations: dict[str, ObservationValue] = field(default_factory=dict)
    medications: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        for name, value in self.demographics.items():
            if not math.isfinite(value):
                raise ValueError(f"demographic {name!r} must be finite")

    def copy(self) -> "PatientRecord":
        return PatientRecord(
            patient_id=self.patient_id,
            visited_at=self.visited_at,
            demographics=dict(self.demographics),
            history=set(self.history),
            observations=dict(self.observations),
            medications=set(self.medications),
        )

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "visited_at": format_timestamp(self.visited_at),
            "demographics": {k: self.demographics[k] for k in sorted(self.demographics)},
            "history": sorted(self.history),
            "observations": {k: self.observations[k].to_json() for k in sorted(self.observations)},
            "medications": sorted(self.medications),
        }

    @staticmethod
    def from_json(doc: dict) -> "PatientRecord":
        return PatientRecord(
            patient_id=doc["patient_id"],
            visited_at=parse_timestamp(doc["visited_at"]),
            demographics={k: float(v) for k, v in doc.get("demographics", {}).items()},
            history=set(doc.get("history", [])),
            observations={
                k: ObservationValue.from_json(v) for k, v in doc.get("observations", {}).items()
            },
            medications=set(doc.get("medications", [])),
        )


@dataclass(frozen=True)
class TestDefinition:
    """A procedure producing one named observation, with an abstract cost."""

    test_id: str
    produces: str
    value_kind: str
    categories: frozenset[str] | None = None
    cost: float = 0.0

    def __post_init__(self) -> None:
        if self.value_kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"unknown value kind {self.value_kind!r}")
        if self.value_kind == CATEGORICAL and not self.categories:
            raise ValueError(f"categorical test {self.test_id!r} must declare categories")
        if self.value_kind == NUMERIC and self.categories:
            raise ValueError(f"numeric test {self.test_id!r} must not declare categories")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")

    def to_json(self) -> dict:
        return {
            "test_id": self.test_id,
            "produces": self.produces,
            "value_kind": self.value_kind,
            "categories": sorted(self.categories) if self.categories else None,
            "cost": self.cost,
        }

    @staticmethod
    def from_json(doc: dict) -> "TestDefinition":
        cats = doc.get("categories")
        return TestDefinition(
            test_id=doc["test_id"],
            produces=doc["produces"],
            value_kind=doc["value_kind"],
            categories=frozenset(cats) if cats else None,
            cost=float(doc.get("cost", 0.0)),
        )


def tests_to_json(tests: dict[str, TestDefinition]) -> list[dict]:
    return [tests[tid].to_json() for tid in sorted(tests)]


def tests_from_json(docs: list[dict]) -> dict[str, TestDefinition]:
    registry = {}
    for doc in docs:
        t = TestDefinition.from_json(doc)
        registry[t.test_id] = t
    return registry


# Feature sources and slot kinds
SRC_OBSERVATION = "observation"
SRC_DEMOGRAPHIC = "demographic"
SRC_HISTORY = "history"

KIND_NUMERIC = "numeric"
KIND_ONE_HOT = "one_hot"
KIND_FLAG = "flag"


@dataclass(frozen=True)
class FeatureSpec:
    """One schema entry: where the value comes from and how it is laid out."""

    name: str
    source: str
    kind: str
    mean: float = 0.0
    std: float = 1.0
    categories: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        if self.kind == KIND_NUMERIC:
            return 2  # standardized value + missing flag
        if self.kind == KIND_ONE_HOT:
            return len(self.categories) + 1
        return 1

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "source": self.source,
            "kind": self.kind,
            "mean": self.mean,
            "std": self.std,
            "categories": list(self.categories),
        }

    @staticmethod
    def from_json(doc: dict) -> "FeatureSpec":
        return FeatureSpec(
            name=doc["name"],
            source=doc["source"],
            kind=doc["kind"],
            mean=float(doc.get("mean", 0.0)),
            std=float(doc.get("std", 1.0)),
            categories=tuple(doc.get("categories", [])),
        )


@dataclass(frozen=True)
class EncodingSchema:
    """Fixed, totally ordered feature layout. Immutable once built."""

    features: tuple[FeatureSpec, ...]
    schema_id: str

    @property
    def width(self) -> int:
        return sum(f.width for f in self.features)

    def to_json(self) -> dict:
        return {"schema_id": self.schema_id, "features": [f.to_json() for f in self.features]}

    @staticmethod
    def from_json(doc: dict) -> "EncodingSchema":
        return EncodingSchema(
            features=tuple(FeatureSpec.from_json(f) for f in doc["features"]),
            schema_id=doc["schema_id"],
        )


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Encoded record: fixed-length float array tied to the schema that shaped it."""

    values: np.ndarray
    schema_id: str


def _schema_id(features: tuple[FeatureSpec, ...]) -> str:
    canon = json.dumps([f.to_json() for f in features], sort_keys=True)
    return "enc-" + hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _population_stats(values: list[float]) -> tuple[float, float]:
    # sigma=1 fallback keeps standardization total for constant features;
    # values are sorted first so record order cannot perturb the float sums
    if not values:
        return 0.0, 1.0
    ordered = sorted(values)
    mean = sum(ordered) / len(ordered)
    var = sum((v - mean) ** 2 for v in ordered) / len(ordered)
    std = math.sqrt(var)
    return mean, (std if std > 0 else 1.0)


def build_schema(
    records: list[PatientRecord], tests: list[TestDefinition] | dict[str, TestDefinition]
) -> EncodingSchema:
    """Derive the feature layout from a training corpus plus the test registry.

    Covers every demographic, history flag, and test-produced observation seen
    in either input. Numeric stats use present values only (population sigma).
    Deterministic: features sort lexicographically by (name, source).
    """
    if not records:
        raise ValueError("no training data")
    test_list = list(tests.values()) if isinstance(tests, dict) else list(tests)

    obs_kinds: dict[str, str] = {}
    obs_categories: dict[str, set[str]] = {}
    for t in test_list:
        obs_kinds[t.produces] = t.value_kind
        if t.categories:
            obs_categories[t.produces] = set(t.categories)

    demo_names: set[str] = set()
    history_names: set[str] = set()
    obs_values: dict[str, list[ObservationValue]] = {}
    for rec in records:
        demo_names.update(rec.demographics)
        history_names.update(rec.history)
        for name, value in rec.observations.items():
            obs_values.setdefault(name, []).append(value)

    for name, values in obs_values.items():
        seen = {v.kind for v in values}
        declared = obs_kinds.get(name)
        if declared is None:
            if len(seen) > 1:
                raise ValueError(f"observation {name!r} mixes numeric and categorical values")
            obs_kinds[name] = seen.pop()
        elif seen - {declared}:
            raise ValueError(f"observation {name!r} conflicts with its test's declared kind")
        if obs_kinds[name] == CATEGORICAL and name not in obs_categories:
            obs_categories[name] = {str(v.value) for v in values}

    specs = []
    for name in obs_kinds:
        if obs_kinds[name] == NUMERIC:
            mean, std = _population_stats(
                [float(v.value) for v in obs_values.get(name, []) if v.kind == NUMERIC]
            )
            specs.append(FeatureSpec(name, SRC_OBSERVATION, KIND_NUMERIC, mean, std))
        else:
            cats = tuple(sorted(obs_categories.get(name, set())))
            specs.append(FeatureSpec(name, SRC_OBSERVATION, KIND_ONE_HOT, categories=cats))
    for name in demo_names:
        mean, std = _population_stats(
            [float(r.demographics[name]) for r in records if name in r.demographics]
        )
        specs.append(FeatureSpec(name, SRC_DEMOGRAPHIC, KIND_NUMERIC, mean, std))
    for name in history_names:
        specs.append(FeatureSpec(name, SRC_HISTORY, KIND_FLAG))

    ordered = tuple(sorted(specs, key=lambda f: (f.name, f.source)))
    return EncodingSchema(features=ordered, schema_id=_schema_id(ordered))


def encode_record(record: PatientRecord, schema: EncodingSchema) -> FeatureVector:
    """Encode one record against the schema.

    Numeric: ((x - mean) / std, 0) when present, (0, 1) when absent.
    One-hot: category slot set when present, all-zero plus flag=1 when absent.
    History: single 0/1 slot.
    """
    out = np.zeros(schema.width, dtype=np.float64)
    offset = 0
    for spec in schema.features:
        if spec.kind == KIND_NUMERIC:
            if spec.source == SRC_DEMOGRAPHIC:
                raw = record.demographics.get(spec.name)
            else:
                obs = record.observations.get(spec.name)
                if obs is not None and obs.kind != NUMERIC:
                    raise ValueError(f"observation {spec.name!r} must be numeric")
                raw = None if obs is None else float(obs.value)
            if raw is None:
                out[offset + 1] = 1.0
            else:
                out[offset] = (raw - spec.mean) / spec.std
        elif spec.kind == KIND_ONE_HOT:
            obs = record.observations.get(spec.name)
            if obs is None:
                out[offset + len(spec.categories)] = 1.0
            else:
                if obs.kind != CATEGORICAL:
                    raise ValueError(f"observation {spec.name!r} must be categorical")
                if obs.value not in spec.categories:
                    raise ValueError(
                        f"unknown category {obs.value!r} for observation {spec.name!r}"
                    )
                out[offset + spec.categories.index(obs.value)] = 1.0
        else:  # history flag
            out[offset] = 1.0 if spec.name in record.history else 0.0
        offset += spec.width
    return FeatureVector(values=out, schema_id=schema.schema_id)
