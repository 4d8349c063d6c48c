"""Demo content: a five-disease generator preset, matching seed protocol trees,
and the test registry they share. Fixture material only, not medical guidance."""

from __future__ import annotations

from .records import TestDefinition
from .synth import DiseaseProfile, FeatureEffect, GeneratorConfig
from .trees import DecisionNode, LeafNode, Predicate, ProtocolTree

BASELINES = {
    "blood_sugar": 90.0,
    "hba1c": 5.2,
    "bp_systolic": 120.0,
    "bp_diastolic": 78.0,
    "hemoglobin": 14.0,
    "fatigue_score": 2.0,
    "peak_flow": 500.0,
    "crp": 5.0,
}

TEST_COSTS = {
    "blood_sugar": 10.0,
    "hba1c": 25.0,
    "bp_systolic": 5.0,
    "bp_diastolic": 5.0,
    "hemoglobin": 15.0,
    "fatigue_score": 1.0,
    "peak_flow": 20.0,
    "crp": 12.0,
}


def demo_generator_config(n_records: int = 3000, seed: int = 7) -> GeneratorConfig:
    profiles = (
        DiseaseProfile(
            "diabetes",
            {
                "blood_sugar": FeatureEffect(shift=85.0),
                "hba1c": FeatureEffect(shift=3.0),
                "fatigue_score": FeatureEffect(shift=2.0, presence=0.6),
            },
            base_rate=0.25,
        ),
        DiseaseProfile(
            "hypertension",
            {
                "bp_systolic": FeatureEffect(shift=45.0),
                "bp_diastolic": FeatureEffect(shift=20.0, presence=0.8),
            },
            base_rate=0.3,
        ),
        DiseaseProfile(
            "anemia",
            {
                "hemoglobin": FeatureEffect(shift=-5.5),
                "fatigue_score": FeatureEffect(shift=4.0, presence=0.9),
            },
            base_rate=0.2,
        ),
        DiseaseProfile(
            "asthma",
            {"peak_flow": FeatureEffect(shift=-220.0)},
            base_rate=0.15,
        ),
        DiseaseProfile(
            "systemic_infection",
            {
                "crp": FeatureEffect(shift=48.0),
                "fatigue_score": FeatureEffect(shift=1.5, presence=0.5),
            },
            base_rate=0.2,
        ),
    )
    return GeneratorConfig(
        profiles=profiles,
        n_records=n_records,
        noise_sigma=4.0,
        seed=seed,
        baselines=BASELINES,
        missing_rate=0.25,
        include_demographics=True,
    )


def generator_config_from_json(doc: dict) -> GeneratorConfig:
    profiles = tuple(
        DiseaseProfile(
            disease_id=p["disease_id"],
            feature_effects={
                name: FeatureEffect(
                    shift=float(e["shift"]), presence=float(e.get("presence", 1.0))
                )
                for name, e in p["feature_effects"].items()
            },
            base_rate=float(p["base_rate"]),
        )
        for p in doc["profiles"]
    )
    return GeneratorConfig(
        profiles=profiles,
        n_records=int(doc["n_records"]),
        noise_sigma=float(doc["noise_sigma"]),
        seed=int(doc["seed"]),
        baselines={k: float(v) for k, v in doc.get("baselines", {}).items()},
        missing_rate=float(doc.get("missing_rate", 0.0)),
        include_demographics=bool(doc.get("include_demographics", False)),
    )


def generator_config_to_json(config: GeneratorConfig) -> dict:
    return {
        "profiles": [
            {
                "disease_id": p.disease_id,
                "feature_effects": {
                    name: {"shift": e.shift, "presence": e.presence}
                    for name, e in sorted(p.feature_effects.items())
                },
                "base_rate": p.base_rate,
            }
            for p in config.profiles
        ],
        "n_records": config.n_records,
        "noise_sigma": config.noise_sigma,
        "seed": config.seed,
        "baselines": dict(sorted(config.baselines.items())),
        "missing_rate": config.missing_rate,
        "include_demographics": config.include_demographics,
    }


def demo_test_registry() -> dict[str, TestDefinition]:
    registry = {}
    for name, cost in TEST_COSTS.items():
        test_id = f"{name}_test"
        registry[test_id] = TestDefinition(
            test_id=test_id, produces=name, value_kind="numeric", cost=cost
        )
    return registry


def demo_trees() -> list[ProtocolTree]:
    """Seed trees for the demo diseases, gated on the generated observations."""
    diabetes = ProtocolTree(
        disease_id="diabetes",
        root="sugar_gate",
        nodes={
            "sugar_gate": DecisionNode(
                question="Is the blood sugar level more than 100?",
                observation="blood_sugar",
                predicate=Predicate(op="greater_than", threshold=100.0),
                required_test="blood_sugar_test",
                yes="hba1c_gate",
                no="no_diabetes",
            ),
            "hba1c_gate": DecisionNode(
                question="Is HbA1c above 6.5?",
                observation="hba1c",
                predicate=Predicate(op="greater_than", threshold=6.5),
                required_test="hba1c_test",
                yes="diabetes_leaf",
                no="prediabetes_leaf",
            ),
            "diabetes_leaf": LeafNode(
                diagnosis="diabetes mellitus",
                recommendations=("start glucose monitoring", "dietary counselling"),
                medications=("metformin",),
            ),
            "prediabetes_leaf": LeafNode(
                diagnosis="impaired glucose tolerance",
                recommendations=("lifestyle changes", "repeat HbA1c in 3 months"),
            ),
            "no_diabetes": LeafNode(
                diagnosis="no diabetes",
                recommendations=("routine screening at next visit",),
            ),
        },
    )
    hypertension = ProtocolTree(
        disease_id="hypertension",
        root="sys_gate",
        nodes={
            "sys_gate": DecisionNode(
                question="Is systolic blood pressure above 140?",
                observation="bp_systolic",
                predicate=Predicate(op="greater_than", threshold=140.0),
                required_test="bp_systolic_test",
                yes="dia_gate",
                no="normal_bp",
            ),
            "dia_gate": DecisionNode(
                question="Is diastolic blood pressure above 90?",
                observation="bp_diastolic",
                predicate=Predicate(op="greater_than", threshold=90.0),
                required_test="bp_diastolic_test",
                yes="stage2_leaf",
                no="stage1_leaf",
            ),
            "stage2_leaf": LeafNode(
                diagnosis="hypertension, both readings elevated",
                recommendations=("confirm with ambulatory monitoring",),
                medications=("amlodipine",),
            ),
            "stage1_leaf": LeafNode(
                diagnosis="isolated systolic hypertension",
                recommendations=("salt reduction", "recheck in 2 weeks"),
            ),
            "normal_bp": LeafNode(
                diagnosis="no hypertension",
                recommendations=("routine monitoring",),
            ),
        },
    )
    anemia = ProtocolTree(
        disease_id="anemia",
        root="fatigue_gate",
        nodes={
            "fatigue_gate": DecisionNode(
                question="Is the reported fatigue score above 4?",
                observation="fatigue_score",
                predicate=Predicate(op="greater_than", threshold=4.0),
                required_test="fatigue_score_test",
                yes="hb_gate",
                no="watchful_leaf",
            ),
            "hb_gate": DecisionNode(
                question="Is hemoglobin below 11?",
                observation="hemoglobin",
                predicate=Predicate(op="less_than", threshold=11.0),
                required_test="hemoglobin_test",
                yes="anemia_leaf",
                no="fatigue_other_leaf",
            ),
            "anemia_leaf": LeafNode(
                diagnosis="anemia",
                recommendations=("iron studies", "dietary iron counselling"),
                medications=("ferrous sulfate",),
            ),
            "fatigue_other_leaf": LeafNode(
                diagnosis="fatigue without anemia",
                recommendations=("investigate other causes of fatigue",),
            ),
            "watchful_leaf": LeafNode(
                diagnosis="no anemia workup indicated",
                recommendations=("reassess if symptoms progress",),
            ),
        },
    )
    asthma = ProtocolTree(
        disease_id="asthma",
        root="flow_gate",
        nodes={
            "flow_gate": DecisionNode(
                question="Is peak expiratory flow below 350?",
                observation="peak_flow",
                predicate=Predicate(op="less_than", threshold=350.0),
                required_test="peak_flow_test",
                yes="asthma_leaf",
                no="no_asthma_leaf",
            ),
            "asthma_leaf": LeafNode(
                diagnosis="obstructive airway pattern",
                recommendations=("spirometry with reversibility testing",),
                medications=("salbutamol inhaler",),
            ),
            "no_asthma_leaf": LeafNode(
                diagnosis="normal peak flow",
                recommendations=("symptom diary if complaints persist",),
            ),
        },
    )
    infection = ProtocolTree(
        disease_id="systemic_infection",
        root="crp_gate",
        nodes={
            "crp_gate": DecisionNode(
                question="Is CRP above 20?",
                observation="crp",
                predicate=Predicate(op="greater_than", threshold=20.0),
                required_test="crp_test",
                yes="fatigue_check",
                no="no_infection_leaf",
            ),
            "fatigue_check": DecisionNode(
                question="Is the reported fatigue score above 4?",
                observation="fatigue_score",
                predicate=Predicate(op="greater_than", threshold=4.0),
                required_test="fatigue_score_test",
                yes="systemic_leaf",
                no="localized_leaf",
            ),
            "systemic_leaf": LeafNode(
                diagnosis="systemic inflammatory response",
                recommendations=("blood cultures", "review within 24 hours"),
                medications=("empiric antibiotics per local guidance",),
            ),
            "localized_leaf": LeafNode(
                diagnosis="raised inflammatory markers",
                recommendations=("focused exam for infection source",),
            ),
            "no_infection_leaf": LeafNode(
                diagnosis="no inflammatory response",
                recommendations=("no action needed",),
            ),
        },
    )
    return [diabetes, hypertension, anemia, asthma, infection]
