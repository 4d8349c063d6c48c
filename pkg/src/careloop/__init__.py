"""careloop: contextual care protocol engine.

A neural classifier ranks candidate diseases from a patient record, every
disease tree clearing a probability threshold is executed node by node with
test-minimizing recommendations, and clinician-filed corrections are
clustered, expert-reviewed, and versioned back into the protocol repository.
"""

from .corrections import (
    CorrectionCenter,
    CorrectionCluster,
    DistanceWeights,
    ErrorReport,
    Reporter,
    report_distance,
    single_linkage,
)
from .mlp import (
    MlpConfig,
    MlpModel,
    TrainingBatch,
    forward,
    gradient_check,
    init_model,
    predict,
    suggest_hidden_size,
    train_on_batch,
)
from .records import (
    EncodingSchema,
    FeatureVector,
    ObservationValue,
    PatientRecord,
    TestDefinition,
    build_schema,
    encode_record,
)
from .repository import Repository
from .session import (
    Concluded,
    DiagnosisEngine,
    DiagnosisSession,
    Recommendation,
    select_trees,
    serialize_session,
)
from .synth import DiseaseProfile, FeatureEffect, GeneratorConfig, generate_dataset
from .trees import (
    DecisionNode,
    LeafNode,
    Predicate,
    ProtocolTree,
    TreeDiff,
    diff_trees,
    parse_tree,
    serialize_tree,
    validate_tree,
)

__version__ = "0.1.0"
