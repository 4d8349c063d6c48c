"""Protocol tree documents: binary decision trees with diagnosis leaves.

Documents are UTF-8 JSON with an explicit format_version. Decision nodes gate
on one observation via a predicate and name the test that resolves it; leaves
carry the diagnosis plus care recommendations and medications.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .records import CATEGORICAL, NUMERIC, ObservationValue, TestDefinition

FORMAT_VERSION = 1

OP_GREATER_THAN = "greater_than"
OP_LESS_THAN = "less_than"
OP_EQUALS = "equals"
OP_IN_SET = "in_set"
NUMERIC_OPS = (OP_GREATER_THAN, OP_LESS_THAN)
CATEGORICAL_OPS = (OP_EQUALS, OP_IN_SET)


class TreeParseError(ValueError):
    """Malformed tree document; carries the offending field path when known."""

    def __init__(self, message: str, path: str = "", line: int | None = None, column: int | None = None):
        detail = message
        if path:
            detail += f" (at {path})"
        if line is not None:
            detail += f" (line {line}, column {column})"
        super().__init__(detail)
        self.path = path
        self.line = line
        self.column = column


class PredicateKindMismatch(ValueError):
    """Predicate applied to an observation value of the wrong kind."""


@dataclass(frozen=True)
class Predicate:
    """Gate on one observation. Numeric comparisons are strict; equality on the
    threshold takes the no-branch."""

    op: str
    threshold: float | None = None
    category: str | None = None
    categories: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.op in NUMERIC_OPS:
            if self.threshold is None:
                raise ValueError(f"{self.op} predicate needs a threshold")
        elif self.op == OP_EQUALS:
            if self.category is None:
                raise ValueError("equals predicate needs a category")
        elif self.op == OP_IN_SET:
            if not self.categories:
                raise ValueError("in_set predicate needs a non-empty category set")
        else:
            raise ValueError(f"unknown predicate op {self.op!r}")

    @property
    def value_kind(self) -> str:
        return NUMERIC if self.op in NUMERIC_OPS else CATEGORICAL

    def evaluate(self, value: ObservationValue) -> bool:
        if value.kind != self.value_kind:
            raise PredicateKindMismatch(
                f"{self.op} predicate cannot evaluate a {value.kind} value"
            )
        if self.op == OP_GREATER_THAN:
            return float(value.value) > self.threshold
        if self.op == OP_LESS_THAN:
            return float(value.value) < self.threshold
        if self.op == OP_EQUALS:
            return value.value == self.category
        return value.value in self.categories

    def describe(self) -> str:
        if self.op == OP_GREATER_THAN:
            return f"> {self.threshold:g}"
        if self.op == OP_LESS_THAN:
            return f"< {self.threshold:g}"
        if self.op == OP_EQUALS:
            return f"= {self.category}"
        return "in {" + ", ".join(sorted(self.categories)) + "}"

    def to_json(self) -> dict:
        if self.op in NUMERIC_OPS:
            return {"op": self.op, "threshold": self.threshold}
        if self.op == OP_EQUALS:
            return {"op": self.op, "category": self.category}
        return {"op": self.op, "categories": sorted(self.categories)}

    @staticmethod
    def from_json(doc: dict) -> "Predicate":
        op = doc.get("op")
        if op in NUMERIC_OPS:
            return Predicate(op=op, threshold=float(doc["threshold"]))
        if op == OP_EQUALS:
            return Predicate(op=op, category=doc["category"])
        if op == OP_IN_SET:
            return Predicate(op=op, categories=frozenset(doc["categories"]))
        raise ValueError(f"unknown predicate op {op!r}")


@dataclass(frozen=True)
class DecisionNode:
    question: str
    observation: str
    predicate: Predicate
    required_test: str
    yes: str
    no: str


@dataclass(frozen=True)
class LeafNode:
    diagnosis: str
    recommendations: tuple[str, ...] = ()
    medications: tuple[str, ...] = ()


TreeNode = DecisionNode | LeafNode


@dataclass(frozen=True)
class TreeSource:
    kind: str  # "seed" | "correction"
    report_id: str | None = None

    @staticmethod
    def seed() -> "TreeSource":
        return TreeSource("seed")

    @staticmethod
    def correction(report_id: str) -> "TreeSource":
        return TreeSource("correction", report_id)

    def to_json(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.report_id is not None:
            doc["report_id"] = self.report_id
        return doc

    @staticmethod
    def from_json(doc: dict) -> "TreeSource":
        return TreeSource(doc["kind"], doc.get("report_id"))


@dataclass(frozen=True)
class ProtocolTree:
    """One disease's diagnostic tree. version=0 means not yet stored."""

    disease_id: str
    root: str
    nodes: dict[str, TreeNode] = field(default_factory=dict)
    version: int = 0
    source: TreeSource = field(default_factory=TreeSource.seed)

    def with_version(self, version: int, source: TreeSource | None = None) -> "ProtocolTree":
        return replace(self, version=version, source=source or self.source)

    def depth(self) -> int:
        """Longest root-to-leaf node count; 0 for an empty/broken tree."""

        def walk(node_id: str, seen: frozenset[str]) -> int:
            if node_id not in self.nodes or node_id in seen:
                return 0
            node = self.nodes[node_id]
            if isinstance(node, LeafNode):
                return 1
            inner = seen | {node_id}
            return 1 + max(walk(node.yes, inner), walk(node.no, inner))

        return walk(self.root, frozenset())


def _node_to_json(node: TreeNode) -> dict:
    if isinstance(node, DecisionNode):
        return {
            "kind": "decision",
            "question": node.question,
            "observation": node.observation,
            "predicate": node.predicate.to_json(),
            "required_test": node.required_test,
            "yes": node.yes,
            "no": node.no,
        }
    return {
        "kind": "leaf",
        "diagnosis": node.diagnosis,
        "recommendations": list(node.recommendations),
        "medications": list(node.medications),
    }


def tree_to_document(tree: ProtocolTree) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "disease_id": tree.disease_id,
        "root": tree.root,
        "nodes": {node_id: _node_to_json(node) for node_id, node in tree.nodes.items()},
    }


def serialize_tree(tree: ProtocolTree) -> bytes:
    return (json.dumps(tree_to_document(tree), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _reject_duplicate_keys(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise TreeParseError(f"duplicate node id or key {key!r}")
        out[key] = value
    return out


def _require(doc: dict, key: str, kind: type, path: str):
    field_path = f"{path}.{key}" if path else key
    if key not in doc:
        raise TreeParseError(f"missing field {key!r}", path=path or key)
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise TreeParseError(f"field {key!r} must be {kind.__name__}", path=field_path)
    return value


def _parse_node(node_id: str, doc: dict) -> TreeNode:
    path = f"nodes.{node_id}"
    if not isinstance(doc, dict):
        raise TreeParseError("node must be an object", path=path)
    kind = doc.get("kind")
    if kind == "decision":
        pred_doc = _require(doc, "predicate", dict, path)
        try:
            predicate = Predicate.from_json(pred_doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise TreeParseError(f"bad predicate: {exc}", path=f"{path}.predicate") from exc
        return DecisionNode(
            question=_require(doc, "question", str, path),
            observation=_require(doc, "observation", str, path),
            predicate=predicate,
            required_test=_require(doc, "required_test", str, path),
            yes=_require(doc, "yes", str, path),
            no=_require(doc, "no", str, path),
        )
    if kind == "leaf":
        recs = doc.get("recommendations", [])
        meds = doc.get("medications", [])
        if not isinstance(recs, list) or not all(isinstance(r, str) for r in recs):
            raise TreeParseError("recommendations must be a list of strings", path=f"{path}.recommendations")
        if not isinstance(meds, list) or not all(isinstance(m, str) for m in meds):
            raise TreeParseError("medications must be a list of strings", path=f"{path}.medications")
        return LeafNode(
            diagnosis=_require(doc, "diagnosis", str, path),
            recommendations=tuple(recs),
            medications=tuple(meds),
        )
    raise TreeParseError(f"unknown node kind {kind!r}", path=f"{path}.kind")


def parse_tree(document: bytes | str | dict) -> ProtocolTree:
    """Parse and structurally check a tree document.

    Rejects malformed syntax, unknown node kinds, duplicate node ids, and
    dangling node-id references. Integrity against the test registry is the
    job of validate_tree.
    """
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            doc = json.loads(document, object_pairs_hook=_reject_duplicate_keys)
        except json.JSONDecodeError as exc:
            raise TreeParseError(f"malformed JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    else:
        doc = document
    if not isinstance(doc, dict):
        raise TreeParseError("document must be a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise TreeParseError(
            f"unsupported format_version {doc.get('format_version')!r}", path="format_version"
        )
    disease_id = _require(doc, "disease_id", str, "")
    root = _require(doc, "root", str, "")
    nodes_doc = _require(doc, "nodes", dict, "")
    if not nodes_doc:
        raise TreeParseError("tree has no nodes", path="nodes")

    nodes = {node_id: _parse_node(node_id, node_doc) for node_id, node_doc in nodes_doc.items()}
    if root not in nodes:
        raise TreeParseError(f"dangling reference: root {root!r} not in nodes", path="root")
    for node_id, node in nodes.items():
        if isinstance(node, DecisionNode):
            for branch in ("yes", "no"):
                target = getattr(node, branch)
                if target not in nodes:
                    raise TreeParseError(
                        f"dangling reference: {target!r} not in nodes",
                        path=f"nodes.{node_id}.{branch}",
                    )
    return ProtocolTree(disease_id=disease_id, root=root, nodes=nodes)


@dataclass(frozen=True)
class Violation:
    node_id: str | None
    rule: str
    detail: str

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "rule": self.rule, "detail": self.detail}


def validate_tree(tree: ProtocolTree, tests: dict[str, TestDefinition]) -> list[Violation]:
    """Check every structural invariant; returns violations as data, empty iff valid."""
    violations: list[Violation] = []
    nodes = tree.nodes

    if tree.root not in nodes:
        violations.append(Violation(tree.root, "missing root", f"root {tree.root!r} is not a node"))
        return violations

    indegree: dict[str, int] = {node_id: 0 for node_id in nodes}
    for node_id in sorted(nodes):
        node = nodes[node_id]
        if not isinstance(node, DecisionNode):
            continue
        for branch in ("yes", "no"):
            target = getattr(node, branch)
            if target in indegree:
                indegree[target] += 1
            else:
                violations.append(
                    Violation(node_id, "dangling reference", f"{branch}-branch points to missing {target!r}")
                )

    for node_id in sorted(nodes):
        if node_id == tree.root:
            if indegree[node_id] > 0:
                violations.append(Violation(node_id, "not a tree", "root has a parent"))
        elif indegree[node_id] > 1:
            violations.append(
                Violation(node_id, "not a tree", f"reachable via {indegree[node_id]} parents")
            )

    reached = set()
    frontier = [tree.root]
    while frontier:
        node_id = frontier.pop()
        if node_id in reached or node_id not in nodes:
            continue
        reached.add(node_id)
        node = nodes[node_id]
        if isinstance(node, DecisionNode):
            frontier.extend((node.yes, node.no))
    for node_id in sorted(set(nodes) - reached):
        violations.append(Violation(node_id, "unreachable", "no path from root"))

    for node_id in sorted(nodes):
        node = nodes[node_id]
        if not isinstance(node, DecisionNode):
            continue
        test = tests.get(node.required_test)
        if test is None:
            violations.append(
                Violation(node_id, "unknown test", f"required_test {node.required_test!r} not registered")
            )
            continue
        if test.produces != node.observation:
            violations.append(
                Violation(
                    node_id,
                    "test/observation mismatch",
                    f"test {test.test_id!r} produces {test.produces!r}, node gates on {node.observation!r}",
                )
            )
        if test.value_kind != node.predicate.value_kind:
            violations.append(
                Violation(
                    node_id,
                    "predicate kind mismatch",
                    f"{node.predicate.op} predicate on a {test.value_kind} test",
                )
            )
        elif node.predicate.value_kind == CATEGORICAL and test.categories:
            wanted = (
                {node.predicate.category}
                if node.predicate.op == OP_EQUALS
                else set(node.predicate.categories)
            )
            unknown = wanted - set(test.categories)
            if unknown:
                violations.append(
                    Violation(
                        node_id,
                        "unknown category",
                        f"predicate uses categories {sorted(unknown)} not declared by {test.test_id!r}",
                    )
                )
    return violations


def node_paths(tree: ProtocolTree) -> dict[str, str]:
    """Map canonical path string -> content signature for every reachable node.

    A path is the sequence of (question, branch-taken) pairs from the root,
    serialized as JSON. Node ids are naming, not content: signatures cover a
    node's own fields only, so renames do not show up in diffs.
    """
    paths: dict[str, str] = {}

    def signature(node: TreeNode) -> str:
        doc = _node_to_json(node)
        if doc["kind"] == "decision":
            doc.pop("yes")
            doc.pop("no")
        return json.dumps(doc, sort_keys=True)

    def walk(node_id: str, trail: list, seen: frozenset[str]) -> None:
        if node_id not in tree.nodes or node_id in seen:
            return
        node = tree.nodes[node_id]
        paths[json.dumps(trail, ensure_ascii=False)] = signature(node)
        if isinstance(node, DecisionNode):
            inner = seen | {node_id}
            walk(node.yes, trail + [[node.question, "yes"]], inner)
            walk(node.no, trail + [[node.question, "no"]], inner)

    walk(tree.root, [], frozenset())
    return paths


@dataclass(frozen=True)
class TreeDiff:
    added_paths: frozenset[str]
    removed_paths: frozenset[str]
    changed_paths: frozenset[str]

    @property
    def touched(self) -> frozenset[str]:
        return self.added_paths | self.removed_paths | self.changed_paths

    def is_empty(self) -> bool:
        return not (self.added_paths or self.removed_paths or self.changed_paths)

    def to_json(self) -> dict:
        return {
            "added_paths": sorted(self.added_paths),
            "removed_paths": sorted(self.removed_paths),
            "changed_paths": sorted(self.changed_paths),
        }


def diff_trees(a: ProtocolTree, b: ProtocolTree) -> TreeDiff:
    """Path-based structural diff between two trees."""
    paths_a = node_paths(a)
    paths_b = node_paths(b)
    added = frozenset(paths_b) - frozenset(paths_a)
    removed = frozenset(paths_a) - frozenset(paths_b)
    changed = frozenset(
        p for p in frozenset(paths_a) & frozenset(paths_b) if paths_a[p] != paths_b[p]
    )
    return TreeDiff(added_paths=added, removed_paths=removed, changed_paths=changed)
