"""Clinician error reports: featurization, similarity clustering, expert review.

Reports against the same disease are grouped by single-linkage agglomerative
clustering over a weighted distance (description token bags, tree-diff path
sets, reporter specialization) so that many near-duplicate reports cost the
expert one decision. Approval stores the chosen corrected tree as a new
repository version and activates it.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping

from .records import format_timestamp
from .repository import Repository
from .trees import ProtocolTree, TreeSource, Violation, diff_trees, validate_tree

PENDING = "pending"
CLUSTERED = "clustered"
APPROVED = "approved"
REJECTED = "rejected"

OPEN = "open"

_TOKEN = re.compile(r"[a-z0-9]+")


class ClusterAlreadyDecided(ValueError):
    pass


class InvalidCorrection(ValueError):
    def __init__(self, message: str, violations: list[Violation]):
        super().__init__(message)
        self.violations = violations


@dataclass(frozen=True)
class Reporter:
    doctor_id: str
    specialization: str

    def to_json(self) -> dict:
        return {"doctor_id": self.doctor_id, "specialization": self.specialization}

    @staticmethod
    def from_json(doc: dict) -> "Reporter":
        return Reporter(doc["doctor_id"], doc.get("specialization", ""))


@dataclass
class ErrorReport:
    report_id: str
    session_id: str
    disease_id: str
    base_version: int
    corrected_tree: ProtocolTree
    description: str
    reporter: Reporter
    node_context: str
    submitted_at: datetime
    status: str = PENDING
    cluster_id: str | None = None

    def to_json(self) -> dict:
        from .trees import tree_to_document

        return {
            "report_id": self.report_id,
            "session_id": self.session_id,
            "disease_id": self.disease_id,
            "base_version": self.base_version,
            "corrected_tree": tree_to_document(self.corrected_tree),
            "description": self.description,
            "reporter": self.reporter.to_json(),
            "node_context": self.node_context,
            "submitted_at": format_timestamp(self.submitted_at),
            "status": self.status,
            "cluster_id": self.cluster_id,
        }

    @staticmethod
    def from_json(doc: dict) -> "ErrorReport":
        from .records import parse_timestamp
        from .trees import parse_tree

        return ErrorReport(
            report_id=doc["report_id"],
            session_id=doc["session_id"],
            disease_id=doc["disease_id"],
            base_version=doc["base_version"],
            corrected_tree=parse_tree(doc["corrected_tree"]),
            description=doc["description"],
            reporter=Reporter.from_json(doc["reporter"]),
            node_context=doc.get("node_context", ""),
            submitted_at=parse_timestamp(doc["submitted_at"]),
            status=doc.get("status", PENDING),
            cluster_id=doc.get("cluster_id"),
        )


@dataclass(frozen=True)
class ReportFeatures:
    token_bag: Mapping[str, int]
    diff_paths: frozenset[str]
    specialization: str


@dataclass(frozen=True)
class DistanceWeights:
    tokens: float = 0.4
    paths: float = 0.5
    specialization: float = 0.1

    def __post_init__(self) -> None:
        total = self.tokens + self.paths + self.specialization
        if min(self.tokens, self.paths, self.specialization) < 0 or abs(total - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")


def tokenize(text: str) -> dict[str, int]:
    """Lowercase alphanumeric tokens of length >= 2, with counts."""
    bag: dict[str, int] = {}
    for token in _TOKEN.findall(text.lower()):
        if len(token) >= 2:
            bag[token] = bag.get(token, 0) + 1
    return bag


def featurize(report: ErrorReport, base_tree: ProtocolTree) -> ReportFeatures:
    diff = diff_trees(base_tree, report.corrected_tree)
    return ReportFeatures(
        token_bag=tokenize(report.description),
        diff_paths=diff.touched,
        specialization=report.reporter.specialization,
    )


def _cosine(a: Mapping[str, int], b: Mapping[str, int]) -> float:
    # two empty bags are identical by convention; one empty bag shares nothing
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    dot = sum(count * b.get(token, 0) for token, count in a.items())
    norm = math.sqrt(sum(c * c for c in a.values())) * math.sqrt(sum(c * c for c in b.values()))
    return dot / norm


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def report_distance(
    a: ReportFeatures, b: ReportFeatures, weights: DistanceWeights = DistanceWeights()
) -> float:
    """Weighted dissimilarity in [0, 1]: text cosine, diff-path jaccard, and a
    specialization mismatch indicator."""
    d = (
        weights.tokens * (1.0 - _cosine(a.token_bag, b.token_bag))
        + weights.paths * (1.0 - _jaccard(a.diff_paths, b.diff_paths))
        + weights.specialization * (1.0 if a.specialization != b.specialization else 0.0)
    )
    return min(1.0, max(0.0, d))


def single_linkage(
    ids: list[str], distance: Callable[[str, str], float], threshold: float
) -> tuple[list[frozenset[str]], list[tuple[str, str, float]]]:
    """Merge the two closest clusters while the minimum inter-cluster distance is
    below the threshold. Clusters are keyed by their smallest member id; ties
    break on (distance, key of first cluster, key of second cluster).

    Returns the final partition (sorted by key) and the merge trace.
    """
    clusters: dict[str, set[str]] = {i: {i} for i in ids}
    pair_dist = {
        (x, y): distance(x, y) for i, x in enumerate(ids) for y in ids[i + 1 :] if x != y
    }

    def dist_between(ka: str, kb: str) -> float:
        return min(
            pair_dist[(x, y) if (x, y) in pair_dist else (y, x)]
            for x in clusters[ka]
            for y in clusters[kb]
        )

    merges: list[tuple[str, str, float]] = []
    while len(clusters) > 1:
        keys = sorted(clusters)
        best: tuple[float, str, str] | None = None
        for i, ka in enumerate(keys):
            for kb in keys[i + 1 :]:
                candidate = (dist_between(ka, kb), ka, kb)
                if best is None or candidate < best:
                    best = candidate
        d, ka, kb = best
        if d >= threshold:
            break
        clusters[ka] |= clusters.pop(kb)
        merges.append((ka, kb, d))
    return [frozenset(clusters[k]) for k in sorted(clusters)], merges


@dataclass
class CorrectionCluster:
    cluster_id: str
    disease_id: str
    member_ids: tuple[str, ...]
    representative: str
    status: str = OPEN
    approved_version: int | None = None
    rejected_reason: str | None = None
    decided_by: str | None = None
    decided_at: datetime | None = None

    def to_json(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "disease_id": self.disease_id,
            "member_ids": list(self.member_ids),
            "representative": self.representative,
            "status": self.status,
            "approved_version": self.approved_version,
            "rejected_reason": self.rejected_reason,
            "decided_by": self.decided_by,
            "decided_at": format_timestamp(self.decided_at) if self.decided_at else None,
        }

    @staticmethod
    def from_json(doc: dict) -> "CorrectionCluster":
        from .records import parse_timestamp

        return CorrectionCluster(
            cluster_id=doc["cluster_id"],
            disease_id=doc["disease_id"],
            member_ids=tuple(doc["member_ids"]),
            representative=doc["representative"],
            status=doc.get("status", OPEN),
            approved_version=doc.get("approved_version"),
            rejected_reason=doc.get("rejected_reason"),
            decided_by=doc.get("decided_by"),
            decided_at=parse_timestamp(doc["decided_at"]) if doc.get("decided_at") else None,
        )


class CorrectionCenter:
    """Holds reports and clusters for one repository; all mutations notify an
    optional listener so a service can persist them as they happen."""

    def __init__(
        self,
        repo: Repository,
        delta: float = 0.35,
        weights: DistanceWeights = DistanceWeights(),
        clock: Callable[[], datetime] | None = None,
        listener: Callable[[str, dict], None] | None = None,
    ):
        self.repo = repo
        self.delta = delta
        self.weights = weights
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.listener = listener
        self.reports: dict[str, ErrorReport] = {}
        self.clusters: dict[str, CorrectionCluster] = {}
        self._report_seq = 0
        self._cluster_seq = 0

    def _emit(self, kind: str, payload: dict) -> None:
        if self.listener is not None:
            self.listener(kind, payload)

    def _next_report_id(self) -> str:
        self._report_seq += 1
        return f"r-{self._report_seq:04d}"

    def _next_cluster_id(self) -> str:
        self._cluster_seq += 1
        return f"c-{self._cluster_seq:04d}"

    # --- submission ---

    def validate_report(
        self, disease_id: str, base_version: int, corrected_tree: ProtocolTree, description: str
    ) -> list[Violation]:
        """Dry-run check; unknown base versions raise, tree problems are returned."""
        self.repo.get_version(disease_id, base_version)  # raises "unknown version"
        violations = validate_tree(corrected_tree, self.repo.tests)
        if corrected_tree.disease_id != disease_id:
            violations.append(
                Violation(
                    None,
                    "disease mismatch",
                    f"corrected tree is for {corrected_tree.disease_id!r}, report is for {disease_id!r}",
                )
            )
        if not description.strip():
            violations.append(Violation(None, "empty description", "description must be non-empty"))
        return violations

    def submit_report(
        self,
        session_id: str,
        disease_id: str,
        base_version: int,
        corrected_tree: ProtocolTree,
        description: str,
        reporter: Reporter,
        node_context: str = "",
        report_id: str | None = None,
    ) -> ErrorReport:
        violations = self.validate_report(disease_id, base_version, corrected_tree, description)
        if violations:
            raise InvalidCorrection(
                "corrected tree rejected: " + "; ".join(f"{v.rule}: {v.detail}" for v in violations),
                violations,
            )
        report = ErrorReport(
            report_id=report_id or self._next_report_id(),
            session_id=session_id,
            disease_id=disease_id,
            base_version=base_version,
            corrected_tree=corrected_tree,
            description=description,
            reporter=reporter,
            node_context=node_context,
            submitted_at=self.clock(),
        )
        if report.report_id in self.reports:
            raise ValueError(f"report id {report.report_id!r} already exists")
        self.reports[report.report_id] = report
        self._emit("report_submitted", report.to_json())
        return report

    def pending_reports(self, disease_id: str | None = None) -> list[ErrorReport]:
        return [
            r
            for r in sorted(self.reports.values(), key=lambda r: r.report_id)
            if r.status == PENDING and (disease_id is None or r.disease_id == disease_id)
        ]

    # --- clustering ---

    def features_for(self, report: ErrorReport) -> ReportFeatures:
        base = self.repo.get_version(report.disease_id, report.base_version)
        return featurize(report, base)

    def cluster_reports(
        self, disease_id: str, delta: float | None = None
    ) -> list[CorrectionCluster]:
        """Cluster this disease's pending reports; every report lands in exactly
        one cluster and moves to the clustered state."""
        threshold = self.delta if delta is None else delta
        if not 0.0 < threshold < 1.0:
            raise ValueError("distance threshold must be in (0, 1)")
        pending = self.pending_reports(disease_id)
        if not pending:
            return []
        features = {r.report_id: self.features_for(r) for r in pending}

        def dist(a: str, b: str) -> float:
            return report_distance(features[a], features[b], self.weights)

        partition, _ = single_linkage([r.report_id for r in pending], dist, threshold)
        created = []
        for members in partition:  # already ordered by smallest member id
            cluster = CorrectionCluster(
                cluster_id=self._next_cluster_id(),
                disease_id=disease_id,
                member_ids=tuple(sorted(members)),
                representative=min(members),
            )
            self.clusters[cluster.cluster_id] = cluster
            for report_id in members:
                self.reports[report_id].status = CLUSTERED
                self.reports[report_id].cluster_id = cluster.cluster_id
            created.append(cluster)
        self._emit(
            "clustering_run",
            {
                "disease_id": disease_id,
                "delta": threshold,
                "clusters": [c.to_json() for c in created],
            },
        )
        return created

    # --- review ---

    def review_cluster(
        self,
        cluster_id: str,
        decision: str,
        reviewer: str,
        report_id: str | None = None,
        reason: str | None = None,
    ) -> CorrectionCluster:
        """approve: store the chosen report's tree as a new active version and mark
        every member approved. reject: mark every member rejected. One decision
        per cluster, ever."""
        if cluster_id not in self.clusters:
            raise KeyError(f"unknown cluster {cluster_id!r}")
        cluster = self.clusters[cluster_id]
        if cluster.status != OPEN:
            raise ClusterAlreadyDecided(f"cluster {cluster_id!r} already decided")
        if decision == "approve":
            chosen = report_id or cluster.representative
            if chosen not in cluster.member_ids:
                raise ValueError(f"report {chosen!r} is not a member of cluster {cluster_id!r}")
            report = self.reports[chosen]
            version = self.repo.put_version(
                report.corrected_tree, source=TreeSource.correction(chosen)
            )
            self.repo.activate(cluster.disease_id, version)
            cluster.status = APPROVED
            cluster.approved_version = version
            for member in cluster.member_ids:
                self.reports[member].status = APPROVED
        elif decision == "reject":
            cluster.status = REJECTED
            cluster.rejected_reason = reason or ""
            for member in cluster.member_ids:
                self.reports[member].status = REJECTED
        else:
            raise ValueError(f"unknown decision {decision!r}")
        cluster.decided_by = reviewer
        cluster.decided_at = self.clock()
        self._emit("cluster_decided", cluster.to_json())
        return cluster

    # --- persistence hooks ---

    def restore(self, events: Iterable[tuple[str, dict]]) -> None:
        """Rebuild report/cluster state from logged events. Repository contents
        are restored by the repository itself, so approvals do not replay there."""
        for kind, payload in events:
            if kind == "report_submitted":
                report = ErrorReport.from_json(payload)
                self.reports[report.report_id] = report
                seq = _trailing_int(report.report_id)
                if seq is not None:
                    self._report_seq = max(self._report_seq, seq)
            elif kind == "clustering_run":
                for doc in payload["clusters"]:
                    cluster = CorrectionCluster.from_json(doc)
                    self.clusters[cluster.cluster_id] = cluster
                    for member in cluster.member_ids:
                        if member in self.reports:
                            self.reports[member].status = CLUSTERED
                            self.reports[member].cluster_id = cluster.cluster_id
                    seq = _trailing_int(cluster.cluster_id)
                    if seq is not None:
                        self._cluster_seq = max(self._cluster_seq, seq)
            elif kind == "cluster_decided":
                cluster = CorrectionCluster.from_json(payload)
                self.clusters[cluster.cluster_id] = cluster
                final = APPROVED if cluster.status == APPROVED else REJECTED
                for member in cluster.member_ids:
                    if member in self.reports:
                        self.reports[member].status = final


def _trailing_int(identifier: str) -> int | None:
    match = re.search(r"(\d+)$", identifier)
    return int(match.group(1)) if match else None


__all__ = [
    "ErrorReport",
    "Reporter",
    "ReportFeatures",
    "DistanceWeights",
    "CorrectionCluster",
    "CorrectionCenter",
    "ClusterAlreadyDecided",
    "InvalidCorrection",
    "tokenize",
    "featurize",
    "report_distance",
    "single_linkage",
]
