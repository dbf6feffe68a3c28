"""Tasks, trajectories, and the demonstration database.

A demonstration database is built once from teacher episodes, sealed, and
then treated as read-only for the rest of its life.  On disk it is a UTF-8
text file: one manifest line followed by one JSON record per trajectory
(see docs/database-format.md).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

SCHEMA_VERSION = 1


class StoreError(Exception):
    """Base error for database construction and persistence."""


class SealedDatabaseError(StoreError):
    """Raised on any mutation attempt after a database has been sealed."""


class TrajectoryValidationError(StoreError):
    """Raised when a trajectory fails validation; carries all violations."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class DatabaseFormatError(StoreError):
    """Raised on schema-version mismatch or a corrupt on-disk record."""


@dataclass(frozen=True)
class TaskSpec:
    """One task instance: an environment id plus a natural-language goal."""

    task_id: str
    env_id: str
    goal: str
    difficulty: int | None = None

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"task_id": self.task_id, "env_id": self.env_id, "goal": self.goal}
        if self.difficulty is not None:
            doc["difficulty"] = self.difficulty
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "TaskSpec":
        return cls(
            task_id=doc["task_id"],
            env_id=doc["env_id"],
            goal=doc["goal"],
            difficulty=doc.get("difficulty"),
        )


@dataclass(frozen=True)
class StepRecord:
    """One agent step: the observation seen, the reasoning produced, the action taken."""

    index: int
    observation: str
    reasoning: str
    action: str

    def to_json(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "observation": self.observation,
            "reasoning": self.reasoning,
            "action": self.action,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "StepRecord":
        return cls(
            index=doc["index"],
            observation=doc["observation"],
            reasoning=doc["reasoning"],
            action=doc["action"],
        )


@dataclass(frozen=True)
class Trajectory:
    """A complete episode: goal, high-level plan, ordered steps, and outcome."""

    task: TaskSpec
    plan: str
    steps: tuple[StepRecord, ...]
    success: bool
    source_model: str

    @property
    def length(self) -> int:
        return len(self.steps)

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task.to_json(),
            "plan": self.plan,
            "steps": [s.to_json() for s in self.steps],
            "success": self.success,
            "source_model": self.source_model,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "Trajectory":
        return cls(
            task=TaskSpec.from_json(doc["task"]),
            plan=doc["plan"],
            steps=tuple(StepRecord.from_json(s) for s in doc["steps"]),
            success=doc["success"],
            source_model=doc["source_model"],
        )


def validate_task(task: TaskSpec) -> list[str]:
    violations = []
    if not task.task_id:
        violations.append("task_id is empty")
    if not task.goal:
        violations.append("goal is empty")
    if task.difficulty is not None and task.difficulty not in (1, 2, 3):
        violations.append(f"difficulty {task.difficulty!r} not in {{1, 2, 3}}")
    return violations


def validate_trajectory(traj: Trajectory) -> list[str]:
    """Return every invariant violation, not just the first. Empty list means valid."""
    violations = validate_task(traj.task)
    if not traj.source_model:
        violations.append("source_model is empty")
    if not traj.steps:
        violations.append("trajectory has no steps")
    for pos, step in enumerate(traj.steps):
        if step.index != pos:
            violations.append(
                f"step at position {pos} has index {step.index} (indices must run 0..T-1)"
            )
        if not step.action:
            violations.append(f"step {pos} has an empty action")
    return violations


@dataclass(frozen=True)
class Manifest:
    """Database header: schema version, embedding provider identity, creation metadata."""

    schema_version: int
    embedder_id: str
    embedding_dim: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "embedder_id": self.embedder_id,
            "embedding_dim": self.embedding_dim,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "Manifest":
        return cls(
            schema_version=doc["schema_version"],
            embedder_id=doc["embedder_id"],
            embedding_dim=doc["embedding_dim"],
            metadata=doc.get("metadata", {}),
        )


class DemoDatabase:
    """Sealed, read-only collection of demonstration trajectories.

    Safe to share across concurrently running episodes; build one with
    :class:`DemoDatabaseBuilder`, or load from disk with :func:`load_database`.
    """

    def __init__(self, manifest: Manifest, trajectories: tuple[Trajectory, ...]):
        self._manifest = manifest
        self._trajectories = trajectories

    @property
    def manifest(self) -> Manifest:
        return self._manifest

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return self._trajectories

    def __len__(self) -> int:
        return len(self._trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self._trajectories[i]

    def content_hash(self) -> str:
        """Stable hash over trajectory content (creation metadata excluded).

        Used to key index caches: two databases with identical trajectories
        and embedder settings share a hash even if collected at different times.
        """
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{self._manifest.schema_version}:{self._manifest.embedder_id}:"
                 f"{self._manifest.embedding_dim}".encode("utf-8"))
        for traj in self._trajectories:
            h.update(json.dumps(traj.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        return h.hexdigest()


class DemoDatabaseBuilder:
    """Single-writer accumulator for a database under construction."""

    def __init__(self, embedder_id: str, embedding_dim: int,
                 metadata: dict[str, Any] | None = None):
        self._manifest = Manifest(
            schema_version=SCHEMA_VERSION,
            embedder_id=embedder_id,
            embedding_dim=embedding_dim,
            metadata=metadata or {},
        )
        self._trajectories: list[Trajectory] = []
        self._sealed = False

    def __len__(self) -> int:
        return len(self._trajectories)

    def append(self, traj: Trajectory) -> "DemoDatabaseBuilder":
        """Validate and append one trajectory, preserving insertion order."""
        if self._sealed:
            raise SealedDatabaseError("database already sealed; no further appends allowed")
        violations = validate_trajectory(traj)
        if violations:
            raise TrajectoryValidationError(violations)
        self._trajectories.append(traj)
        return self

    def seal(self) -> DemoDatabase:
        self._sealed = True
        return DemoDatabase(self._manifest, tuple(self._trajectories))


def append_trajectory(builder: DemoDatabaseBuilder, traj: Trajectory) -> DemoDatabaseBuilder:
    """Functional alias for :meth:`DemoDatabaseBuilder.append`."""
    return builder.append(traj)


def save_database(db: DemoDatabase, path: str | Path) -> None:
    """Write manifest line plus one JSON record per trajectory, UTF-8."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(db.manifest.to_json(), ensure_ascii=False) + "\n")
        for traj in db.trajectories:
            fh.write(json.dumps(traj.to_json(), ensure_ascii=False) + "\n")


def load_database(path: str | Path) -> DemoDatabase:
    """Load a sealed database; rejects unknown schema versions and corrupt records."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.strip():
            raise DatabaseFormatError(f"{path}: missing manifest line")
        try:
            manifest = Manifest.from_json(json.loads(header))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DatabaseFormatError(f"{path}: bad manifest line: {exc}") from exc
        if manifest.schema_version != SCHEMA_VERSION:
            raise DatabaseFormatError(
                f"{path}: schema version {manifest.schema_version} "
                f"(this build reads version {SCHEMA_VERSION})"
            )
        trajectories = []
        for record_index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                traj = Trajectory.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatabaseFormatError(
                    f"{path}: corrupt trajectory record {record_index}: {exc}"
                ) from exc
            violations = validate_trajectory(traj)
            if violations:
                raise DatabaseFormatError(
                    f"{path}: invalid trajectory record {record_index}: {'; '.join(violations)}"
                )
            trajectories.append(traj)
    return DemoDatabase(manifest, tuple(trajectories))
