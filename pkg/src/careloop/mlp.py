"""One-hidden-layer classifier with one logistic output per disease.

tanh hidden layer, sigmoid outputs, mean per-output binary cross-entropy with
optional L2, trained by deterministic full-batch gradient descent. Models are
immutable values; training returns a new model.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .records import EncodingSchema, FeatureVector, PatientRecord, encode_record


class TrainingDiverged(RuntimeError):
    """Raised when the training loss leaves the reals; lower the learning rate."""


@dataclass(frozen=True)
class MlpConfig:
    n_in: int
    n_hidden: int
    n_out: int
    learning_rate: float = 0.5
    epochs: int = 200
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self) -> None:
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ValueError("layer sizes must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    def to_json(self) -> dict:
        return {
            "n_in": self.n_in,
            "n_hidden": self.n_hidden,
            "n_out": self.n_out,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "l2": self.l2,
        }

    @staticmethod
    def from_json(doc: dict) -> "MlpConfig":
        return MlpConfig(
            n_in=int(doc["n_in"]),
            n_hidden=int(doc["n_hidden"]),
            n_out=int(doc["n_out"]),
            learning_rate=float(doc.get("learning_rate", 0.5)),
            epochs=int(doc.get("epochs", 200)),
            seed=int(doc.get("seed", 0)),
            l2=float(doc.get("l2", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class MlpModel:
    W1: np.ndarray  # (n_hidden, n_in)
    b1: np.ndarray  # (n_hidden,)
    W2: np.ndarray  # (n_out, n_hidden)
    b2: np.ndarray  # (n_out,)
    schema_id: str
    disease_index: tuple[str, ...]

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]


@dataclass(frozen=True)
class TrainingBatch:
    inputs: np.ndarray  # (n, n_in)
    targets: np.ndarray  # (n, n_out), entries in {0, 1}

    def __post_init__(self) -> None:
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same length")
        if not np.isin(self.targets, (0, 1)).all():
            raise ValueError("targets must be 0/1")

    @staticmethod
    def from_vectors(vectors: list[FeatureVector], targets: list) -> "TrainingBatch":
        return TrainingBatch(
            inputs=np.stack([v.values for v in vectors]),
            targets=np.asarray(targets, dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.inputs.shape[0]


def suggest_hidden_size(n_in: int, n_out: int) -> int:
    """Midpoint of the input and output widths, rounded half up.

    Always lies within [min(n_in, n_out), max(n_in, n_out)].
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("layer sizes must be >= 1")
    return (n_in + n_out + 1) // 2


def init_model(config: MlpConfig, diseases: list[str] | tuple[str, ...], schema_id: str = "") -> MlpModel:
    """Glorot-uniform weights from a generator seeded by config.seed; zero biases."""
    diseases = tuple(diseases)
    if len(diseases) != config.n_out:
        raise ValueError("diseases length must equal n_out")
    rng = np.random.default_rng(config.seed)
    lim1 = math.sqrt(6.0 / (config.n_in + config.n_hidden))
    lim2 = math.sqrt(6.0 / (config.n_hidden + config.n_out))
    return MlpModel(
        W1=rng.uniform(-lim1, lim1, size=(config.n_hidden, config.n_in)),
        b1=np.zeros(config.n_hidden),
        W2=rng.uniform(-lim2, lim2, size=(config.n_out, config.n_hidden)),
        b2=np.zeros(config.n_out),
        schema_id=schema_id,
        disease_index=diseases,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _forward_raw(model: MlpModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Z1 = X @ model.W1.T + model.b1
    H = np.tanh(Z1)
    Z2 = H @ model.W2.T + model.b2
    return H, Z2, _sigmoid(Z2)


def _loss(model: MlpModel, X: np.ndarray, T: np.ndarray, l2: float) -> float:
    # elementwise BCE via softplus(z) - t*z: exact and stable at extreme logits
    _, Z2, _ = _forward_raw(model, X)
    data = float(np.mean(_softplus(Z2) - T * Z2))
    penalty = 0.5 * l2 * float(np.sum(model.W1**2) + np.sum(model.W2**2))
    return data + penalty


def _gradients(
    model: MlpModel, X: np.ndarray, T: np.ndarray, l2: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n, k = T.shape
    H, _, Y = _forward_raw(model, X)
    G2 = (Y - T) / (n * k)
    dW2 = G2.T @ H + l2 * model.W2
    db2 = G2.sum(axis=0)
    G1 = (G2 @ model.W2) * (1.0 - H**2)
    dW1 = G1.T @ X + l2 * model.W1
    db1 = G1.sum(axis=0)
    return dW1, db1, dW2, db2


def forward(model: MlpModel, x: FeatureVector | np.ndarray) -> dict[str, float]:
    """Probability per disease for one encoded record, keyed by disease_index."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    if values.shape != (model.n_in,):
        raise ValueError(f"expected input of length {model.n_in}, got {values.shape}")
    _, _, y = _forward_raw(model, values[None, :])
    return {d: float(p) for d, p in zip(model.disease_index, y[0])}


def train_on_batch(
    model: MlpModel, batch: TrainingBatch, config: MlpConfig
) -> tuple[MlpModel, float]:
    """Run config.epochs full-batch gradient steps; returns (new model, final loss)."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    X = np.asarray(batch.inputs, dtype=np.float64)
    T = np.asarray(batch.targets, dtype=np.float64)
    if X.shape[1] != model.n_in or T.shape[1] != model.n_out:
        raise ValueError("batch shapes do not match the model")

    W1, b1, W2, b2 = model.W1.copy(), model.b1.copy(), model.W2.copy(), model.b2.copy()
    current = replace(model, W1=W1, b1=b1, W2=W2, b2=b2)
    lr = config.learning_rate
    for _ in range(config.epochs):
        if not math.isfinite(_loss(current, X, T, config.l2)):
            raise TrainingDiverged("diverged")
        dW1, db1, dW2, db2 = _gradients(current, X, T, config.l2)
        W1 -= lr * dW1
        b1 -= lr * db1
        W2 -= lr * dW2
        b2 -= lr * db2
    final_loss = _loss(current, X, T, config.l2)
    if not math.isfinite(final_loss):
        raise TrainingDiverged("diverged")
    return current, final_loss


def gradient_check(
    model: MlpModel, batch: TrainingBatch, eps: float = 1e-5, l2: float = 0.0
) -> float:
    """Max relative error between analytic and central finite-difference gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    X = np.asarray(batch.inputs, dtype=np.float64)
    T = np.asarray(batch.targets, dtype=np.float64)
    analytic = _gradients(model, X, T, l2)
    params = [model.W1, model.b1, model.W2, model.b2]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            plus = _loss(model, X, T, l2)
            flat_p[i] = orig - eps
            minus = _loss(model, X, T, l2)
            flat_p[i] = orig
            numeric = (plus - minus) / (2 * eps)
            rel = abs(flat_g[i] - numeric) / max(1e-8, abs(flat_g[i]) + abs(numeric))
            worst = max(worst, rel)
    return worst


def predict(model: MlpModel, record: PatientRecord, schema: EncodingSchema) -> dict[str, float]:
    """encode_record then forward; the schema must be the one the model was trained on."""
    if schema.schema_id != model.schema_id:
        raise ValueError(
            f"schema mismatch: model trained on {model.schema_id!r}, got {schema.schema_id!r}"
        )
    return forward(model, encode_record(record, schema))


def daily_update(
    model: MlpModel, batch: TrainingBatch, config: MlpConfig, lr_factor: float = 0.1
) -> tuple[MlpModel, float]:
    """Incremental retraining on a new day's batch at a reduced learning rate."""
    damped = replace(config, learning_rate=config.learning_rate * lr_factor)
    return train_on_batch(model, batch, damped)


def checkpoint_to_json(model: MlpModel, config: MlpConfig) -> dict:
    return {
        "config": config.to_json(),
        "disease_index": list(model.disease_index),
        "W1": model.W1.tolist(),
        "b1": model.b1.tolist(),
        "W2": model.W2.tolist(),
        "b2": model.b2.tolist(),
        "schema_id": model.schema_id,
    }


def checkpoint_from_json(doc: dict) -> tuple[MlpModel, MlpConfig]:
    config = MlpConfig.from_json(doc["config"])
    model = MlpModel(
        W1=np.asarray(doc["W1"], dtype=np.float64),
        b1=np.asarray(doc["b1"], dtype=np.float64),
        W2=np.asarray(doc["W2"], dtype=np.float64),
        b2=np.asarray(doc["b2"], dtype=np.float64),
        schema_id=doc["schema_id"],
        disease_index=tuple(doc["disease_index"]),
    )
    return model, config


def model_ref(model: MlpModel, config: MlpConfig) -> str:
    """Short content hash identifying a checkpoint."""
    canon = json.dumps(checkpoint_to_json(model, config), sort_keys=True)
    return "mlp-" + hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]
