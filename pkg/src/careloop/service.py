"""HTTP service and file-backed state for the care-protocol engine.

Persistence is deliberately plain: append-only JSON-lines event logs per
aggregate plus per-session snapshot files, one tree file per (disease,
version), and a single model checkpoint. Restarting against the same data
directory reproduces every session, report, cluster, and version.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import Body, FastAPI, Header, HTTPException, Query

from . import mlp
from .corrections import (
    ClusterAlreadyDecided,
    CorrectionCenter,
    DistanceWeights,
    InvalidCorrection,
    Reporter,
)
from .records import (
    EncodingSchema,
    ObservationValue,
    PatientRecord,
    build_schema,
    encode_record,
    tests_from_json,
    tests_to_json,
)
from .repository import Repository
from .session import Concluded, DiagnosisEngine, DiagnosisSession, DuplicateObservation
from .synth import read_dataset
from .trees import TreeParseError, diff_trees, parse_tree, tree_to_document

ENV_DATA_DIR = "CARELOOP_DATA_DIR"
ENV_LISTEN = "CARELOOP_LISTEN"


@dataclass
class ServiceConfig:
    data_dir: str = "data"
    host: str = "127.0.0.1"
    port: int = 8077
    threshold: float = 0.3
    cluster_delta: float = 0.35
    weight_tokens: float = 0.4
    weight_paths: float = 0.5
    weight_specialization: float = 0.1
    expert_token: str = "expert-token"
    classifier: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    @staticmethod
    def load(path: str | Path | None = None) -> "ServiceConfig":
        doc = {}
        if path is not None:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        config = ServiceConfig(**doc)
        if os.environ.get(ENV_DATA_DIR):
            config.data_dir = os.environ[ENV_DATA_DIR]
        if os.environ.get(ENV_LISTEN):
            host, _, port = os.environ[ENV_LISTEN].partition(":")
            config.host = host or config.host
            if port:
                config.port = int(port)
        return config

    def weights(self) -> DistanceWeights:
        return DistanceWeights(self.weight_tokens, self.weight_paths, self.weight_specialization)


class JsonlLog:
    """Append-only JSON-lines file, one event object per line."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()

    def append(self, kind: str, payload: dict) -> None:
        line = json.dumps({"kind": kind, "payload": payload}, ensure_ascii=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def read_all(self) -> list[tuple[str, dict]]:
        if not self.path.exists():
            return []
        events = []
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    doc = json.loads(line)
                    events.append((doc["kind"], doc["payload"]))
        return events


class ServiceState:
    """Everything the endpoints touch, reloaded verbatim from data_dir on start."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.data_dir = Path(config.data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)

        tests_path = self.data_dir / "tests.json"
        self.tests = (
            tests_from_json(json.loads(tests_path.read_text(encoding="utf-8")))
            if tests_path.exists()
            else {}
        )
        self.repo = Repository(self.tests, root_dir=self.data_dir)
        self.repo_log = JsonlLog(self.data_dir / "repository.jsonl")
        self.session_log = JsonlLog(self.data_dir / "sessions.jsonl")
        self.report_log = JsonlLog(self.data_dir / "reports.jsonl")

        self.center = CorrectionCenter(
            self.repo,
            delta=config.cluster_delta,
            weights=config.weights(),
            listener=self.report_log.append,
        )
        self.center.restore(self.report_log.read_all())

        self.model: mlp.MlpModel | None = None
        self.model_config: mlp.MlpConfig | None = None
        self.schema: EncodingSchema | None = None
        self._load_model()

        self.sessions: dict[str, DiagnosisSession] = {}
        self._session_dir = self.data_dir / "sessions"
        self._load_sessions()

        self._locks: dict[str, threading.Lock] = {}
        self._meta_lock = threading.Lock()

    # --- model ---

    def _load_model(self) -> None:
        model_path = self.data_dir / "model.json"
        schema_path = self.data_dir / "schema.json"
        if model_path.exists() and schema_path.exists():
            self.model, self.model_config = mlp.checkpoint_from_json(
                json.loads(model_path.read_text(encoding="utf-8"))
            )
            self.schema = EncodingSchema.from_json(
                json.loads(schema_path.read_text(encoding="utf-8"))
            )

    def save_model(
        self, model: mlp.MlpModel, config: mlp.MlpConfig, schema: EncodingSchema
    ) -> None:
        (self.data_dir / "model.json").write_text(
            json.dumps(mlp.checkpoint_to_json(model, config)) + "\n", encoding="utf-8"
        )
        (self.data_dir / "schema.json").write_text(
            json.dumps(schema.to_json()) + "\n", encoding="utf-8"
        )
        self.model, self.model_config, self.schema = model, config, schema

    def save_tests(self, tests: dict) -> None:
        self.tests = dict(tests)
        (self.data_dir / "tests.json").write_text(
            json.dumps(tests_to_json(self.tests), indent=2) + "\n", encoding="utf-8"
        )
        self.repo.update_tests(self.tests)

    def model_meta(self) -> dict:
        if self.model is None:
            raise LookupError("no model trained")
        return {
            "model_ref": mlp.model_ref(self.model, self.model_config),
            "schema_id": self.model.schema_id,
            "n_in": self.model.n_in,
            "n_hidden": self.model.n_hidden,
            "n_out": self.model.n_out,
            "diseases": list(self.model.disease_index),
        }

    # --- sessions ---

    def engine(self) -> DiagnosisEngine:
        if self.model is None or self.schema is None:
            raise LookupError("no model trained")
        return DiagnosisEngine(
            self.model,
            self.schema,
            self.repo,
            self.tests,
            model_ref=mlp.model_ref(self.model, self.model_config),
            default_threshold=self.config.threshold,
        )

    def _load_sessions(self) -> None:
        if not self._session_dir.exists():
            return
        for path in sorted(self._session_dir.glob("*.json")):
            doc = json.loads(path.read_text(encoding="utf-8"))
            session = DiagnosisSession.from_json(doc)
            self.sessions[session.session_id] = session

    def save_session(self, session: DiagnosisSession, new_events_from: int = 0) -> None:
        self._session_dir.mkdir(parents=True, exist_ok=True)
        path = self._session_dir / f"{session.session_id}.json"
        path.write_text(
            json.dumps(session.to_json(), sort_keys=True) + "\n", encoding="utf-8"
        )
        for event in session.event_log[new_events_from:]:
            self.session_log.append(
                "session_event", {"session_id": session.session_id, "event": event.to_json()}
            )

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._meta_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def get_session(self, session_id: str) -> DiagnosisSession:
        if session_id not in self.sessions:
            raise LookupError(f"unknown session {session_id!r}")
        return self.sessions[session_id]

    def file_integrity_reports(self, session: DiagnosisSession) -> None:
        """Convert runtime protocol-integrity drops into system-filed reports."""
        while session.pending_integrity_reports:
            draft = session.pending_integrity_reports.pop(0)
            base = self.repo.get_version(draft["disease_id"], draft["base_version"])
            try:
                self.center.submit_report(
                    session_id=draft["session_id"],
                    disease_id=draft["disease_id"],
                    base_version=draft["base_version"],
                    corrected_tree=base,
                    description=draft["description"],
                    reporter=Reporter(doctor_id="system", specialization="protocol-integrity"),
                    node_context=draft["node_context"],
                )
            except InvalidCorrection:
                pass  # the base tree no longer validates; the drop event still records it


def _step_payload(result) -> dict:
    if isinstance(result, Concluded):
        return {"concluded": True, "outcomes": list(result.outcomes), "recommendations": []}
    return {"concluded": False, "recommendations": [r.to_json() for r in result]}


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="careloop", version="0.1.0")
    app.state.service = state

    def require_expert(authorization: str | None) -> None:
        expected = f"Bearer {state.config.expert_token}"
        if authorization != expected:
            raise HTTPException(status_code=401, detail="expert authorization required")

    # --- sessions ---

    @app.post("/sessions")
    def create_session(body: dict = Body(...)):
        try:
            engine = state.engine()
        except LookupError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        try:
            record = PatientRecord.from_json(body["record"])
            session = engine.start_session(record, threshold=body.get("theta"))
            result = engine.step(session)
        except (KeyError, ValueError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid session request: {exc}")
        state.sessions[session.session_id] = session
        state.file_integrity_reports(session)
        state.save_session(session)
        payload = _step_payload(result)
        payload.update(
            {
                "session_id": session.session_id,
                "probabilities": session.probabilities,
                "active_trees": [
                    {
                        "disease_id": run.disease_id,
                        "version": run.version,
                        "probability": run.probability,
                        "cursor": run.cursor,
                        "status": run.status,
                    }
                    for run in session.active_trees
                ],
                "events": [e.to_json() for e in session.event_log],
            }
        )
        return payload

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        try:
            return state.get_session(session_id).to_json()
        except LookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/sessions/{session_id}/observations")
    def post_observation(session_id: str, body: dict = Body(...)):
        try:
            session = state.get_session(session_id)
        except LookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        try:
            engine = state.engine()
        except LookupError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        with state.session_lock(session_id):
            mark = len(session.event_log)
            try:
                value = ObservationValue.from_json(body["value"])
                name = body["name"]
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(status_code=400, detail=f"invalid observation: {exc}")
            try:
                engine.submit_observation(session, name, value)
            except DuplicateObservation as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            result = engine.step(session)
            state.file_integrity_reports(session)
            state.save_session(session, new_events_from=mark)
        payload = _step_payload(result)
        payload["events"] = [e.to_json() for e in session.event_log[mark:]]
        return payload

    @app.get("/sessions/{session_id}/summary")
    def session_summary(session_id: str):
        try:
            session = state.get_session(session_id)
        except LookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        try:
            engine = state.engine()
        except LookupError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return engine.session_summary(session)

    # --- reports and clusters ---

    @app.post("/reports")
    def post_report(body: dict = Body(...)):
        try:
            tree = parse_tree(body["corrected_tree"])
            disease_id = body["disease_id"]
            base_version = int(body["base_version"])
            description = body.get("description", "")
        except TreeParseError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid report: {exc}")
        if body.get("dry_run"):
            try:
                violations = state.center.validate_report(
                    disease_id, base_version, tree, description
                )
            except KeyError as exc:
                raise HTTPException(status_code=404, detail=str(exc))
            return {"valid": not violations, "violations": [v.to_json() for v in violations]}
        try:
            report = state.center.submit_report(
                session_id=body.get("session_id", ""),
                disease_id=disease_id,
                base_version=base_version,
                corrected_tree=tree,
                description=description,
                reporter=Reporter.from_json(body["reporter"]),
                node_context=body.get("node_context", ""),
            )
        except InvalidCorrection as exc:
            raise HTTPException(
                status_code=400,
                detail={"message": str(exc), "violations": [v.to_json() for v in exc.violations]},
            )
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return report.to_json()

    @app.get("/reports")
    def list_reports(status: str | None = Query(default=None)):
        reports = sorted(state.center.reports.values(), key=lambda r: r.report_id)
        if status is not None:
            reports = [r for r in reports if r.status == status]
        return [r.to_json() for r in reports]

    @app.post("/clusters/run")
    def run_clustering(body: dict = Body(...)):
        try:
            clusters = state.center.cluster_reports(body["disease_id"], body.get("delta"))
        except (KeyError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid clustering request: {exc}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return [c.to_json() for c in clusters]

    @app.get("/clusters")
    def list_clusters(
        status: str | None = Query(default=None), disease_id: str | None = Query(default=None)
    ):
        clusters = sorted(state.center.clusters.values(), key=lambda c: c.cluster_id)
        if status is not None:
            clusters = [c for c in clusters if c.status == status]
        if disease_id is not None:
            clusters = [c for c in clusters if c.disease_id == disease_id]
        return [c.to_json() for c in clusters]

    @app.post("/clusters/{cluster_id}/decision")
    def decide_cluster(
        cluster_id: str, body: dict = Body(...), authorization: str | None = Header(default=None)
    ):
        require_expert(authorization)
        try:
            cluster = state.center.review_cluster(
                cluster_id,
                decision=body.get("decision", ""),
                reviewer=body.get("reviewer", "expert"),
                report_id=body.get("report_id"),
                reason=body.get("reason"),
            )
        except ClusterAlreadyDecided as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        if cluster.status == "approved":
            state.repo_log.append(
                "version_stored",
                {
                    "disease_id": cluster.disease_id,
                    "version": cluster.approved_version,
                    "source": {"kind": "correction", "report_id": body.get("report_id")},
                },
            )
            state.repo_log.append(
                "version_activated",
                {"disease_id": cluster.disease_id, "version": cluster.approved_version},
            )
        return cluster.to_json()

    # --- trees ---

    @app.get("/trees/{disease_id}/active")
    def active_tree(disease_id: str):
        try:
            tree = state.repo.get_active(disease_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"version": tree.version, "source": tree.source.to_json(), "tree": tree_to_document(tree)}

    @app.get("/trees/{disease_id}/versions")
    def tree_versions(disease_id: str):
        try:
            versions = state.repo.versions(disease_id)
            active = state.repo.active_version(disease_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        out = []
        for v in versions:
            tree = state.repo.get_version(disease_id, v)
            out.append({"version": v, "source": tree.source.to_json(), "active": v == active})
        return out

    @app.get("/trees/{disease_id}/diff")
    def tree_diff(
        disease_id: str,
        from_version: int = Query(alias="from"),
        to_version: int = Query(alias="to"),
    ):
        try:
            a = state.repo.get_version(disease_id, from_version)
            b = state.repo.get_version(disease_id, to_version)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return diff_trees(a, b).to_json()

    # --- admin ---

    @app.post("/admin/train")
    def train(body: dict = Body(...)):
        try:
            dataset_dir = Path(body["dataset_ref"])
            records, labels, diseases = read_dataset(dataset_dir)
        except (KeyError, TypeError) as exc:
            raise HTTPException(status_code=400, detail=f"invalid training request: {exc}")
        except (OSError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"unreadable dataset: {exc}")
        tests_path = dataset_dir / "tests.json"
        if tests_path.exists():
            merged = dict(state.tests)
            merged.update(tests_from_json(json.loads(tests_path.read_text(encoding="utf-8"))))
            state.save_tests(merged)
        overrides = {**state.config.classifier, **body.get("classifier", {})}
        try:
            model, config, schema, loss = train_pipeline(records, labels, diseases, state.tests, overrides)
        except mlp.TrainingDiverged as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        state.save_model(model, config, schema)
        meta = state.model_meta()
        meta["loss"] = loss
        meta["n_records"] = len(records)
        return meta

    @app.get("/model")
    def model_meta():
        try:
            return state.model_meta()
        except LookupError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    return app


def train_pipeline(
    records: list[PatientRecord],
    labels: list[list[int]],
    diseases: list[str],
    tests: dict,
    overrides: dict | None = None,
) -> tuple[mlp.MlpModel, mlp.MlpConfig, EncodingSchema, float]:
    """Schema -> encode -> init -> full-batch training, with config overrides."""
    overrides = overrides or {}
    schema = build_schema(records, tests)
    vectors = [encode_record(r, schema) for r in records]
    batch = mlp.TrainingBatch.from_vectors(vectors, labels)
    n_in = schema.width
    n_out = len(diseases)
    config = mlp.MlpConfig(
        n_in=n_in,
        n_hidden=int(overrides.get("n_hidden") or mlp.suggest_hidden_size(n_in, n_out)),
        n_out=n_out,
        learning_rate=float(overrides.get("learning_rate", 1.0)),
        epochs=int(overrides.get("epochs", 400)),
        seed=int(overrides.get("seed", 0)),
        l2=float(overrides.get("l2", 1e-4)),
    )
    model = mlp.init_model(config, diseases, schema_id=schema.schema_id)
    model, loss = mlp.train_on_batch(model, batch, config)
    return model, config, schema, loss
