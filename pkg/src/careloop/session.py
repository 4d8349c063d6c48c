"""Live diagnosis sessions.

A session binds every disease tree whose predicted probability clears the
threshold, then advances each tree node by node. Observations are shared
across trees through a write-once cache, so a test is never recommended once
its observation is known and never performed twice. Each new observation
triggers a re-score, which may pull additional trees in (never drop one).
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable

from .mlp import MlpModel, predict
from .records import (
    EncodingSchema,
    ObservationValue,
    PatientRecord,
    TestDefinition,
    format_timestamp,
    parse_timestamp,
)
from .repository import Repository
from .trees import (
    DecisionNode,
    LeafNode,
    PredicateKindMismatch,
    ProtocolTree,
    parse_tree,
    tree_to_document,
)

RUNNING = "running"
CONCLUDED = "concluded"
DROPPED = "dropped"

DEFAULT_THRESHOLD = 0.3


class DuplicateObservation(ValueError):
    """Observations are write-once per session; a repeat means a repeated test."""


def select_trees(probabilities: dict[str, float], threshold: float) -> list[tuple[str, float]]:
    """All diseases with p >= threshold, ordered by probability descending,
    ties broken by disease id ascending."""
    chosen = [(d, p) for d, p in probabilities.items() if p >= threshold]
    return sorted(chosen, key=lambda item: (-item[1], item[0]))


@dataclass
class TreeRun:
    """One active tree: bound by value at selection time, repo updates never touch it."""

    disease_id: str
    version: int
    probability: float
    tree: ProtocolTree
    cursor: str
    status: str = RUNNING
    diagnosis: str | None = None
    drop_reason: str | None = None

    def to_json(self) -> dict:
        return {
            "disease_id": self.disease_id,
            "version": self.version,
            "probability": self.probability,
            "cursor": self.cursor,
            "status": self.status,
            "diagnosis": self.diagnosis,
            "drop_reason": self.drop_reason,
            "tree": tree_to_document(self.tree),
        }

    @staticmethod
    def from_json(doc: dict) -> "TreeRun":
        return TreeRun(
            disease_id=doc["disease_id"],
            version=doc["version"],
            probability=doc["probability"],
            tree=parse_tree(doc["tree"]).with_version(doc["version"]),
            cursor=doc["cursor"],
            status=doc["status"],
            diagnosis=doc.get("diagnosis"),
            drop_reason=doc.get("drop_reason"),
        )


@dataclass(frozen=True)
class Recommendation:
    test: TestDefinition
    resolves: tuple[tuple[str, str, str], ...]  # (disease_id, node_id, question)
    rationale: str

    def to_json(self) -> dict:
        return {
            "test": self.test.to_json(),
            "resolves": [
                {"disease_id": d, "node_id": n, "question": q} for d, n, q in self.resolves
            ],
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class Concluded:
    outcomes: tuple[dict, ...]

    def to_json(self) -> dict:
        return {"concluded": True, "outcomes": list(self.outcomes)}


@dataclass(frozen=True)
class SessionEvent:
    timestamp: datetime
    kind: str
    payload: dict

    def to_json(self) -> dict:
        return {
            "timestamp": format_timestamp(self.timestamp),
            "kind": self.kind,
            "payload": self.payload,
        }

    @staticmethod
    def from_json(doc: dict) -> "SessionEvent":
        return SessionEvent(parse_timestamp(doc["timestamp"]), doc["kind"], doc["payload"])


@dataclass
class DiagnosisSession:
    session_id: str
    record: PatientRecord
    threshold: float
    model_ref: str
    probabilities: dict[str, float] = field(default_factory=dict)
    active_trees: list[TreeRun] = field(default_factory=list)
    observation_cache: dict[str, ObservationValue] = field(default_factory=dict)
    event_log: list[SessionEvent] = field(default_factory=list)
    pending_integrity_reports: list[dict] = field(default_factory=list)

    def running_trees(self) -> list[TreeRun]:
        return [run for run in self.active_trees if run.status == RUNNING]

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "record": self.record.to_json(),
            "threshold": self.threshold,
            "model_ref": self.model_ref,
            "probabilities": self.probabilities,
            "active_trees": [run.to_json() for run in self.active_trees],
            "observation_cache": {
                name: self.observation_cache[name].to_json()
                for name in sorted(self.observation_cache)
            },
            "event_log": [event.to_json() for event in self.event_log],
        }

    @staticmethod
    def from_json(doc: dict) -> "DiagnosisSession":
        return DiagnosisSession(
            session_id=doc["session_id"],
            record=PatientRecord.from_json(doc["record"]),
            threshold=doc["threshold"],
            model_ref=doc["model_ref"],
            probabilities=dict(doc.get("probabilities", {})),
            active_trees=[TreeRun.from_json(r) for r in doc.get("active_trees", [])],
            observation_cache={
                name: ObservationValue.from_json(v)
                for name, v in doc.get("observation_cache", {}).items()
            },
            event_log=[SessionEvent.from_json(e) for e in doc.get("event_log", [])],
        )


def serialize_session(session: DiagnosisSession) -> str:
    """Canonical JSON for persistence and determinism comparisons."""
    return json.dumps(session.to_json(), sort_keys=True, separators=(",", ":"))


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


class DiagnosisEngine:
    """Drives sessions against one (model, schema, repository, test registry).

    clock and id_gen are injectable so replays can be compared bit-for-bit.
    """

    def __init__(
        self,
        model: MlpModel,
        schema: EncodingSchema,
        repo: Repository,
        tests: dict[str, TestDefinition],
        model_ref: str = "",
        default_threshold: float = DEFAULT_THRESHOLD,
        clock: Callable[[], datetime] | None = None,
        id_gen: Callable[[], str] | None = None,
    ):
        self.model = model
        self.schema = schema
        self.repo = repo
        self.tests = dict(tests)
        self.model_ref = model_ref or "mlp-unnamed"
        self.default_threshold = default_threshold
        self.clock = clock or _utc_now
        self.id_gen = id_gen or (lambda: "s-" + uuid.uuid4().hex[:12])

    def _log(self, session: DiagnosisSession, kind: str, payload: dict) -> SessionEvent:
        event = SessionEvent(self.clock(), kind, payload)
        session.event_log.append(event)
        return event

    # --- lifecycle ---

    def start_session(
        self,
        record: PatientRecord,
        threshold: float | None = None,
        session_id: str | None = None,
    ) -> DiagnosisSession:
        theta = self.default_threshold if threshold is None else threshold
        if not 0.0 < theta < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        working = record.copy()
        probabilities = predict(self.model, working, self.schema)
        session = DiagnosisSession(
            session_id=session_id or self.id_gen(),
            record=working,
            threshold=theta,
            model_ref=self.model_ref,
            probabilities=probabilities,
            observation_cache=dict(working.observations),
        )
        # full record in the start event so the session can be replayed from its log
        self._log(
            session,
            "started",
            {"record": record.to_json(), "threshold": theta, "model_ref": self.model_ref},
        )
        selected, unavailable = [], []
        for disease_id, p in select_trees(probabilities, theta):
            if not self.repo.has_disease(disease_id):
                unavailable.append(disease_id)
                continue
            tree = self.repo.get_active(disease_id)
            session.active_trees.append(
                TreeRun(
                    disease_id=disease_id,
                    version=tree.version,
                    probability=p,
                    tree=tree,
                    cursor=tree.root,
                )
            )
            selected.append({"disease_id": disease_id, "version": tree.version, "probability": p})
        self._log(session, "trees_selected", {"selected": selected, "unavailable": unavailable})
        return session

    def add_tree(self, session: DiagnosisSession, disease_id: str, version: int | None = None) -> None:
        """Manual tree selection, for sessions where nothing cleared the threshold."""
        if any(run.disease_id == disease_id for run in session.active_trees):
            raise ValueError(f"tree for {disease_id!r} already active")
        tree = (
            self.repo.get_active(disease_id)
            if version is None
            else self.repo.get_version(disease_id, version)
        )
        probability = session.probabilities.get(disease_id, 0.0)
        session.active_trees.append(
            TreeRun(
                disease_id=disease_id,
                version=tree.version,
                probability=probability,
                tree=tree,
                cursor=tree.root,
            )
        )
        self._sort_runs(session)
        self._log(
            session,
            "tree_added",
            {"disease_id": disease_id, "version": tree.version, "probability": probability, "manual": True},
        )

    # --- stepping ---

    def _drop(self, session: DiagnosisSession, run: TreeRun, node_id: str, reason: str) -> None:
        run.status = DROPPED
        run.drop_reason = reason
        self._log(
            session,
            "tree_dropped",
            {"disease_id": run.disease_id, "node_id": node_id, "reason": reason},
        )
        # protocol-integrity report, auto-filed for expert attention
        session.pending_integrity_reports.append(
            {
                "session_id": session.session_id,
                "disease_id": run.disease_id,
                "base_version": run.version,
                "node_context": node_id,
                "description": f"protocol integrity: {reason}",
            }
        )

    def _advance(self, session: DiagnosisSession, run: TreeRun) -> None:
        """Resolve the cursor while its observation is cached; stop when blocked,
        concluded, or dropped."""
        while run.status == RUNNING:
            node = run.tree.nodes[run.cursor]
            if isinstance(node, LeafNode):
                run.status = CONCLUDED
                run.diagnosis = node.diagnosis
                self._log(
                    session,
                    "tree_concluded",
                    {
                        "disease_id": run.disease_id,
                        "node_id": run.cursor,
                        "diagnosis": node.diagnosis,
                    },
                )
                return
            value = session.observation_cache.get(node.observation)
            if value is None:
                test = self.tests.get(node.required_test)
                if test is None:
                    self._drop(
                        session, run, run.cursor,
                        f"required test {node.required_test!r} is not registered",
                    )
                elif test.produces != node.observation:
                    self._drop(
                        session, run, run.cursor,
                        f"test {test.test_id!r} does not produce observation {node.observation!r}",
                    )
                return  # blocked on a missing observation
            try:
                taken = node.predicate.evaluate(value)
            except PredicateKindMismatch as exc:
                self._drop(session, run, run.cursor, str(exc))
                return
            branch = "yes" if taken else "no"
            next_id = node.yes if taken else node.no
            self._log(
                session,
                "node_resolved",
                {
                    "disease_id": run.disease_id,
                    "node_id": run.cursor,
                    "branch": branch,
                    "next": next_id,
                },
            )
            run.cursor = next_id

    def step(self, session: DiagnosisSession) -> list[Recommendation] | Concluded:
        """Advance every running tree, then recommend the tests that unblock them.

        Recommendations are ranked by (trees resolved desc, cost asc, test id asc)
        so one cheap test resolving several trees comes first.
        """
        for run in list(session.active_trees):
            if run.status == RUNNING:
                self._advance(session, run)

        blocked: dict[str, list[tuple[str, str, str]]] = {}
        for run in session.active_trees:
            if run.status != RUNNING:
                continue
            node = run.tree.nodes[run.cursor]
            assert isinstance(node, DecisionNode)
            blocked.setdefault(node.required_test, []).append(
                (run.disease_id, run.cursor, node.question)
            )

        if not blocked:
            return Concluded(outcomes=tuple(self._outcome(run) for run in session.active_trees))

        recommendations = []
        for test_id, resolves in blocked.items():
            test = self.tests[test_id]
            trees = ", ".join(d for d, _, _ in resolves)
            recommendations.append(
                Recommendation(
                    test=test,
                    resolves=tuple(resolves),
                    rationale=(
                        f"produces {test.produces!r} needed by {len(resolves)} "
                        f"pending decision(s) ({trees}); cost {test.cost:g}"
                    ),
                )
            )
        recommendations.sort(key=lambda r: (-len(r.resolves), r.test.cost, r.test.test_id))
        self._log(
            session, "test_recommended", {"tests": [r.test.test_id for r in recommendations]}
        )
        return recommendations

    def _outcome(self, run: TreeRun) -> dict:
        outcome = {
            "disease_id": run.disease_id,
            "version": run.version,
            "probability": run.probability,
            "status": run.status,
        }
        if run.status == CONCLUDED:
            leaf = run.tree.nodes[run.cursor]
            outcome.update(
                {
                    "diagnosis": run.diagnosis,
                    "recommendations": list(leaf.recommendations),
                    "medications": list(leaf.medications),
                }
            )
        elif run.status == DROPPED:
            outcome["drop_reason"] = run.drop_reason
        else:
            node = run.tree.nodes[run.cursor]
            outcome["cursor"] = run.cursor
            outcome["pending_question"] = node.question if isinstance(node, DecisionNode) else None
        return outcome

    # --- observations and re-scoring ---

    def submit_observation(
        self, session: DiagnosisSession, name: str, value: ObservationValue
    ) -> DiagnosisSession:
        """Write-once: repeating a name means repeating a test, which is an error."""
        if name in session.observation_cache:
            raise DuplicateObservation(f"observation {name!r} already recorded")
        # pre-flight the encoding so a rejected value leaves the session untouched
        trial = session.record.copy()
        trial.observations[name] = value
        predict(self.model, trial, self.schema)
        session.observation_cache[name] = value
        session.record.observations[name] = value
        self._log(session, "observation_recorded", {"name": name, "value": value.to_json()})
        self.rescore(session)
        return session

    def rescore(self, session: DiagnosisSession) -> DiagnosisSession:
        """Re-run the classifier on the updated record. New diseases clearing the
        threshold join with their cursor at the root; active trees never leave."""
        probabilities = predict(self.model, session.record, self.schema)
        session.probabilities = probabilities
        for run in session.active_trees:
            run.probability = probabilities.get(run.disease_id, run.probability)
        present = {run.disease_id for run in session.active_trees}
        for disease_id, p in select_trees(probabilities, session.threshold):
            if disease_id in present or not self.repo.has_disease(disease_id):
                continue
            tree = self.repo.get_active(disease_id)
            session.active_trees.append(
                TreeRun(
                    disease_id=disease_id,
                    version=tree.version,
                    probability=p,
                    tree=tree,
                    cursor=tree.root,
                )
            )
            self._log(
                session,
                "tree_added",
                {"disease_id": disease_id, "version": tree.version, "probability": p},
            )
        self._sort_runs(session)
        self._log(session, "rescored", {"probabilities": probabilities})
        return session

    def _sort_runs(self, session: DiagnosisSession) -> None:
        session.active_trees.sort(key=lambda run: (-run.probability, run.disease_id))

    # --- reporting ---

    def session_summary(self, session: DiagnosisSession) -> dict:
        """Per-tree outcomes, tests performed with total cost, and the event log."""
        by_observation: dict[str, TestDefinition] = {}
        for test in sorted(self.tests.values(), key=lambda t: t.test_id, reverse=True):
            by_observation[test.produces] = test  # ascending id wins on collisions
        performed = []
        total_cost = 0.0
        for event in session.event_log:
            if event.kind != "observation_recorded":
                continue
            name = event.payload["name"]
            test = by_observation.get(name)
            cost = test.cost if test else 0.0
            total_cost += cost
            performed.append(
                {"observation": name, "test_id": test.test_id if test else None, "cost": cost}
            )
        return {
            "session_id": session.session_id,
            "threshold": session.threshold,
            "model_ref": session.model_ref,
            "probabilities": session.probabilities,
            "trees": [self._outcome(run) for run in session.active_trees],
            "tests_performed": performed,
            "total_cost": total_cost,
            "events": [event.to_json() for event in session.event_log],
        }

    # --- replay ---

    def replay(self, session: DiagnosisSession) -> DiagnosisSession:
        """Re-drive a fresh session from the event log's observations using the
        canonical call sequence (start, step, then submit+step per observation)."""
        started = next(e for e in session.event_log if e.kind == "started")
        record = PatientRecord.from_json(started.payload["record"])
        fresh = self.start_session(
            record, threshold=started.payload["threshold"], session_id=session.session_id
        )
        self.step(fresh)
        for event in session.event_log:
            if event.kind != "observation_recorded":
                continue
            value = ObservationValue.from_json(event.payload["value"])
            self.submit_observation(fresh, event.payload["name"], value)
            self.step(fresh)
        return fresh
