"""Versioned protocol-tree storage with a per-disease active pointer.

History is append-only: versions count up from 1 with no gaps and stored trees
never mutate. Activation is a separate, explicit step so corrections can be
staged; the first stored version becomes active so the pointer always exists.

On-disk layout (when a root directory is given): one document file per
(disease, version) under trees/<disease>/v<N>.json plus trees/index.json
holding active pointers and version sources.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from .records import TestDefinition
from .trees import ProtocolTree, TreeSource, parse_tree, serialize_tree, validate_tree


class Repository:
    def __init__(
        self,
        tests: dict[str, TestDefinition] | None = None,
        root_dir: str | Path | None = None,
    ):
        self._tests = dict(tests) if tests else {}
        self._versions: dict[str, list[ProtocolTree]] = {}
        self._active: dict[str, int] = {}
        self._lock = threading.Lock()
        self._dir = Path(root_dir) / "trees" if root_dir is not None else None
        if self._dir is not None and (self._dir / "index.json").exists():
            self._load()

    @property
    def tests(self) -> dict[str, TestDefinition]:
        return self._tests

    def update_tests(self, tests: dict[str, TestDefinition]) -> None:
        with self._lock:
            self._tests = dict(tests)

    def diseases(self) -> list[str]:
        with self._lock:
            return sorted(self._versions)

    def has_disease(self, disease_id: str) -> bool:
        with self._lock:
            return disease_id in self._versions

    def versions(self, disease_id: str) -> list[int]:
        with self._lock:
            return [t.version for t in self._require(disease_id)]

    def active_version(self, disease_id: str) -> int:
        with self._lock:
            self._require(disease_id)
            return self._active[disease_id]

    def get_active(self, disease_id: str) -> ProtocolTree:
        with self._lock:
            trees = self._require(disease_id)
            return trees[self._active[disease_id] - 1]

    def get_version(self, disease_id: str, version: int) -> ProtocolTree:
        with self._lock:
            trees = self._require(disease_id)
            if not 1 <= version <= len(trees):
                raise KeyError(f"unknown version {version} for disease {disease_id!r}")
            return trees[version - 1]

    def put_version(self, tree: ProtocolTree, source: TreeSource | None = None) -> int:
        """Append a validated tree as the next version. Does not move the active
        pointer, except that the first version of a disease becomes active."""
        violations = validate_tree(tree, self._tests)
        if violations:
            details = "; ".join(f"{v.rule}: {v.detail}" for v in violations)
            raise ValueError(f"invalid tree rejected: {details}")
        with self._lock:
            history = self._versions.setdefault(tree.disease_id, [])
            version = len(history) + 1
            stored = tree.with_version(version, source)
            history.append(stored)
            if version == 1:
                self._active[tree.disease_id] = 1
            self._persist(stored)
            return version

    def activate(self, disease_id: str, version: int) -> None:
        with self._lock:
            trees = self._require(disease_id)
            if not 1 <= version <= len(trees):
                raise KeyError(f"unknown version {version} for disease {disease_id!r}")
            self._active[disease_id] = version
            self._persist_index()

    def _require(self, disease_id: str) -> list[ProtocolTree]:
        if disease_id not in self._versions:
            raise KeyError(f"unknown disease {disease_id!r}")
        return self._versions[disease_id]

    # --- persistence ---

    def _persist(self, tree: ProtocolTree) -> None:
        if self._dir is None:
            return
        disease_dir = self._dir / tree.disease_id
        disease_dir.mkdir(parents=True, exist_ok=True)
        (disease_dir / f"v{tree.version}.json").write_bytes(serialize_tree(tree))
        self._persist_index()

    def _persist_index(self) -> None:
        if self._dir is None:
            return
        self._dir.mkdir(parents=True, exist_ok=True)
        index = {
            "active": dict(sorted(self._active.items())),
            "sources": {
                disease: {str(t.version): t.source.to_json() for t in trees}
                for disease, trees in sorted(self._versions.items())
            },
        }
        (self._dir / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")

    def _load(self) -> None:
        index = json.loads((self._dir / "index.json").read_text(encoding="utf-8"))
        for disease, sources in index["sources"].items():
            history = []
            for version in sorted(int(v) for v in sources):
                doc = (self._dir / disease / f"v{version}.json").read_bytes()
                tree = parse_tree(doc).with_version(version, TreeSource.from_json(sources[str(version)]))
                history.append(tree)
            self._versions[disease] = history
        self._active = {d: int(v) for d, v in index["active"].items()}
