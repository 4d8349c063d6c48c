import math
from datetime import datetime, timezone

import numpy as np
import pytest

from careloop.mlp import MlpModel
from careloop.records import (
    ObservationValue,
    PatientRecord,
    TestDefinition,
    build_schema,
)
from careloop.repository import Repository
from careloop.session import DiagnosisEngine
from careloop.trees import DecisionNode, LeafNode, Predicate, ProtocolTree

FIXED_NOW = datetime(2025, 6, 1, 12, 0, 0, tzinfo=timezone.utc)


def fixed_clock():
    return FIXED_NOW


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@pytest.fixture
def registry():
    return {
        "temp_probe": TestDefinition("temp_probe", "temp", "numeric", cost=2.0),
        "sugar_test": TestDefinition("sugar_test", "blood_sugar", "numeric", cost=10.0),
        "cough_check": TestDefinition(
            "cough_check", "cough", "categorical", frozenset({"dry", "wet", "none"}), cost=1.0
        ),
        "rash_check": TestDefinition(
            "rash_check", "rash", "categorical", frozenset({"present", "absent"}), cost=3.0
        ),
    }


def make_record(patient_id="p-1", observations=None, demographics=None, history=None):
    return PatientRecord(
        patient_id=patient_id,
        visited_at=FIXED_NOW,
        demographics=demographics or {},
        history=history or set(),
        observations=observations or {},
    )


@pytest.fixture
def alpha_tree():
    return ProtocolTree(
        disease_id="alpha",
        root="a_root",
        nodes={
            "a_root": DecisionNode(
                question="Is the temperature above 38?",
                observation="temp",
                predicate=Predicate(op="greater_than", threshold=38.0),
                required_test="temp_probe",
                yes="a_high",
                no="a_low",
            ),
            "a_high": LeafNode(diagnosis="alpha, febrile form", recommendations=("rest",)),
            "a_low": LeafNode(diagnosis="alpha unlikely"),
        },
    )


@pytest.fixture
def beta_tree():
    return ProtocolTree(
        disease_id="beta",
        root="b_root",
        nodes={
            "b_root": DecisionNode(
                question="Is the temperature above 39?",
                observation="temp",
                predicate=Predicate(op="greater_than", threshold=39.0),
                required_test="temp_probe",
                yes="b_severe",
                no="b_cough",
            ),
            "b_cough": DecisionNode(
                question="Is the cough dry?",
                observation="cough",
                predicate=Predicate(op="equals", category="dry"),
                required_test="cough_check",
                yes="b_mild",
                no="b_clear",
            ),
            "b_severe": LeafNode(diagnosis="beta, severe", medications=("antipyretic",)),
            "b_mild": LeafNode(diagnosis="beta, mild"),
            "b_clear": LeafNode(diagnosis="beta ruled out"),
        },
    )


@pytest.fixture
def gamma_tree():
    # the classic first-node question: blood sugar level more than 100
    return ProtocolTree(
        disease_id="gamma",
        root="g_root",
        nodes={
            "g_root": DecisionNode(
                question="Is the blood sugar level more than 100?",
                observation="blood_sugar",
                predicate=Predicate(op="greater_than", threshold=100.0),
                required_test="sugar_test",
                yes="g_high",
                no="g_normal",
            ),
            "g_high": LeafNode(
                diagnosis="gamma, elevated sugar",
                recommendations=("confirmatory panel",),
                medications=("metformin",),
            ),
            "g_normal": LeafNode(diagnosis="gamma ruled out"),
        },
    )


@pytest.fixture
def repo(registry, alpha_tree, beta_tree, gamma_tree):
    repo = Repository(registry)
    for tree in (alpha_tree, beta_tree, gamma_tree):
        repo.put_version(tree)
    return repo


@pytest.fixture
def schema(registry):
    # stats chosen so "temp" standardizes to mean 38, sigma 1 etc.
    recs = [
        make_record(
            "s-1",
            observations={
                "temp": ObservationValue.numeric(37.0),
                "blood_sugar": ObservationValue.numeric(80.0),
                "cough": ObservationValue.categorical("none"),
                "rash": ObservationValue.categorical("absent"),
            },
        ),
        make_record(
            "s-2",
            observations={
                "temp": ObservationValue.numeric(39.0),
                "blood_sugar": ObservationValue.numeric(120.0),
                "cough": ObservationValue.categorical("dry"),
                "rash": ObservationValue.categorical("present"),
            },
        ),
    ]
    return build_schema(recs, list(registry.values()))


def constant_model(schema, probabilities: dict[str, float]) -> MlpModel:
    """Zero hidden weights make every output sigma(b2): record-independent."""
    diseases = tuple(probabilities)
    return MlpModel(
        W1=np.zeros((1, schema.width)),
        b1=np.zeros(1),
        W2=np.zeros((len(diseases), 1)),
        b2=np.array([logit(probabilities[d]) for d in diseases]),
        schema_id=schema.schema_id,
        disease_index=diseases,
    )


@pytest.fixture
def engine_factory(schema, repo, registry):
    def make(probabilities, threshold=0.3, clock=None):
        model = constant_model(schema, probabilities)
        return DiagnosisEngine(
            model,
            schema,
            repo,
            registry,
            model_ref="mlp-test",
            default_threshold=threshold,
            clock=clock or fixed_clock,
            id_gen=iter(f"s-{i:04d}" for i in range(10_000)).__next__,
        )

    return make
