"""Embedding providers and exact top-k retrieval over a demonstration database.

Retrieval operates on two levels: whole-trajectory lookup by goal similarity
(used when drafting a plan) and step-level lookup by averaged goal/plan/reasoning
similarity, where each matched step is widened to a window of neighboring steps.
Search is an exact linear scan; at a few hundred demonstrations there is nothing
to gain from an approximate index.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .store import DemoDatabase, StepRecord

DEFAULT_DIMENSION = 384
_NORM_TOL = 1e-6
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class RetrievalError(Exception):
    """Raised for dimension mismatches, empty indexes, and cache-key conflicts."""


@dataclass(frozen=True)
class EmbeddingVector:
    """Unit-norm dense vector. Construct via :meth:`normalize` unless already unit."""

    values: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > _NORM_TOL:
            raise RetrievalError(f"embedding norm {norm} deviates from 1 by more than {_NORM_TOL}")

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def normalize(cls, raw: np.ndarray) -> "EmbeddingVector":
        norm = float(np.linalg.norm(raw))
        if norm == 0.0:
            raise RetrievalError("cannot normalize a zero vector")
        return cls(values=np.asarray(raw, dtype=np.float64) / norm)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of two unit-norm vectors; symmetric, in [-1, 1]."""
    if a.dimension != b.dimension:
        raise RetrievalError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    return float(np.dot(a.values, b.values))


class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int

    def embed_text(self, text: str) -> EmbeddingVector: ...


def _basis_vector(dimension: int) -> EmbeddingVector:
    v = np.zeros(dimension, dtype=np.float64)
    v[0] = 1.0
    return EmbeddingVector(values=v)


class HashedBagOfWordsEmbedder:
    """Deterministic offline embedder: hashed bag-of-words, L2-normalized.

    Tokens are lowercased alphanumeric runs, each hashed (blake2b, stable across
    processes) into one of ``dimension`` buckets. Empty or token-free text maps
    to the fixed basis vector e_1 so mid-episode queries never fail.
    """

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self.provider_id = f"hashed-bow-{dimension}"

    def embed_text(self, text: str) -> EmbeddingVector:
        counts = np.zeros(self.dimension, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            counts[int.from_bytes(digest, "big") % self.dimension] += 1.0
        if not counts.any():
            return _basis_vector(self.dimension)
        return EmbeddingVector.normalize(counts)


class HttpEmbeddingProvider:
    """Client for an external embedding endpoint (OpenAI-style /embeddings)."""

    def __init__(self, provider_id: str, dimension: int, url: str,
                 model: str, api_key: str | None = None, timeout: float = 30.0):
        self.provider_id = provider_id
        self.dimension = dimension
        self.url = url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def embed_text(self, text: str) -> EmbeddingVector:
        import requests

        if not text.strip():
            return _basis_vector(self.dimension)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(self.url, json={"model": self.model, "input": text},
                             headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        raw = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        if raw.shape[0] != self.dimension:
            raise RetrievalError(
                f"provider returned dimension {raw.shape[0]}, index expects {self.dimension}"
            )
        return EmbeddingVector.normalize(raw)


def embed_text(provider: EmbeddingProvider, text: str) -> EmbeddingVector:
    """Functional wrapper kept for symmetry with the rest of the module API."""
    return provider.embed_text(text)


@dataclass(frozen=True)
class PlanMatch:
    """One trajectory-level retrieval hit: the demo goal and its plan."""

    trajectory_id: str
    goal: str
    plan: str
    score: float


@dataclass(frozen=True)
class StepWindow:
    """A contiguous slice of demo steps centered on the matched step."""

    trajectory_id: str
    center_step: int
    steps: tuple[StepRecord, ...]
    score: float
    goal: str
    plan: str

    @property
    def start(self) -> int:
        return self.steps[0].index

    @property
    def end(self) -> int:
        return self.steps[-1].index


@dataclass(frozen=True)
class ScoreWeights:
    """Relative weights for the step-level averaged similarity."""

    goal: float = 1.0 / 3.0
    plan: float = 1.0 / 3.0
    reasoning: float = 1.0 / 3.0


class RetrievalIndex:
    """Immutable embedding index over a sealed database.

    Holds one goal vector and one plan vector per retrieval-eligible trajectory
    plus one reasoning vector per step. Lookups are exact scans; ties break by
    ascending (trajectory_id, step_index).
    """

    def __init__(self, db: DemoDatabase, provider_id: str, dimension: int,
                 traj_ids: list[str], traj_positions: list[int],
                 goal_vecs: np.ndarray, plan_vecs: np.ndarray,
                 step_keys: list[tuple[int, int]], reasoning_vecs: np.ndarray):
        self._db = db
        self.provider_id = provider_id
        self.dimension = dimension
        self._traj_ids = traj_ids
        self._traj_positions = traj_positions  # positions into db.trajectories
        self._goal_vecs = goal_vecs
        self._plan_vecs = plan_vecs
        self._step_keys = step_keys  # (local traj slot, step index)
        self._reasoning_vecs = reasoning_vecs

    @property
    def database(self) -> DemoDatabase:
        return self._db

    def entry_count(self) -> int:
        return 2 * len(self._traj_ids) + len(self._step_keys)

    def trajectory_count(self) -> int:
        return len(self._traj_ids)

    def _check_query(self, vec: EmbeddingVector) -> None:
        if vec.dimension != self.dimension:
            raise RetrievalError(
                f"query dimension {vec.dimension} does not match index dimension {self.dimension}"
            )
        if not self._traj_ids:
            raise RetrievalError("index is empty")

    def retrieve_plans(self, goal_vec: EmbeddingVector, k: int) -> list[PlanMatch]:
        """Top-k demo (goal, plan) pairs by cosine of goal embeddings, best first."""
        if k < 1:
            raise RetrievalError("k must be >= 1")
        self._check_query(goal_vec)
        scores = self._goal_vecs @ goal_vec.values
        order = sorted(range(len(self._traj_ids)),
                       key=lambda i: (-scores[i], self._traj_ids[i]))
        out = []
        for i in order[:k]:
            traj = self._db[self._traj_positions[i]]
            out.append(PlanMatch(trajectory_id=self._traj_ids[i], goal=traj.task.goal,
                                 plan=traj.plan, score=float(scores[i])))
        return out

    def retrieve_step_windows(self, goal_vec: EmbeddingVector, plan_vec: EmbeddingVector,
                              step_vec: EmbeddingVector, k: int, window_radius: int,
                              weights: ScoreWeights = ScoreWeights()) -> list[StepWindow]:
        """Top-k step windows by weighted-average similarity.

        Candidate steps are ranked by the weighted mean of goal, plan, and
        reasoning cosine similarities. Each selected step expands to a window
        of ``window_radius`` neighbors clipped to trajectory bounds; a candidate
        whose window overlaps an already-selected window from the same
        trajectory is absorbed by it, and the freed slot goes to the next-best
        candidate.
        """
        if k < 1:
            raise RetrievalError("k must be >= 1")
        if window_radius < 0:
            raise RetrievalError("window_radius must be >= 0")
        for vec in (goal_vec, plan_vec, step_vec):
            self._check_query(vec)
        goal_scores = self._goal_vecs @ goal_vec.values
        plan_scores = self._plan_vecs @ plan_vec.values
        reasoning_scores = self._reasoning_vecs @ step_vec.values
        total_weight = weights.goal + weights.plan + weights.reasoning
        candidates = []
        for pos, (slot, step_index) in enumerate(self._step_keys):
            score = (weights.goal * goal_scores[slot] + weights.plan * plan_scores[slot]
                     + weights.reasoning * reasoning_scores[pos]) / total_weight
            candidates.append((float(score), self._traj_ids[slot], slot, step_index))
        candidates.sort(key=lambda c: (-c[0], c[1], c[3]))

        selected: list[StepWindow] = []
        taken: dict[str, list[tuple[int, int]]] = {}
        for score, traj_id, slot, step_index in candidates:
            if len(selected) >= k:
                break
            traj = self._db[self._traj_positions[slot]]
            lo = max(0, step_index - window_radius)
            hi = min(traj.length - 1, step_index + window_radius)
            if any(lo <= e and s <= hi for s, e in taken.get(traj_id, [])):
                continue
            taken.setdefault(traj_id, []).append((lo, hi))
            selected.append(StepWindow(
                trajectory_id=traj_id, center_step=step_index,
                steps=traj.steps[lo:hi + 1], score=score,
                goal=traj.task.goal, plan=traj.plan,
            ))
        return selected

    def retrieve_full_trajectories(self, goal_vec: EmbeddingVector, k: int) -> list[StepWindow]:
        """Top-k whole trajectories by goal similarity, each as one full-width window."""
        matches = self.retrieve_plans(goal_vec, k)
        by_id = {self._traj_ids[i]: self._db[self._traj_positions[i]]
                 for i in range(len(self._traj_ids))}
        out = []
        for m in matches:
            traj = by_id[m.trajectory_id]
            out.append(StepWindow(trajectory_id=m.trajectory_id, center_step=0,
                                  steps=traj.steps, score=m.score,
                                  goal=traj.task.goal, plan=traj.plan))
        return out

    # -- cache -------------------------------------------------------------

    def cache_key(self) -> str:
        return f"{self._db.content_hash()}:{self.provider_id}:{self.dimension}"

    def save_cache(self, path: str | Path) -> None:
        meta = {
            "cache_key": self.cache_key(),
            "provider_id": self.provider_id,
            "dimension": self.dimension,
            "traj_ids": self._traj_ids,
            "traj_positions": self._traj_positions,
            "step_keys": self._step_keys,
        }
        np.savez(Path(path),
                 meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                 goal_vecs=self._goal_vecs, plan_vecs=self._plan_vecs,
                 reasoning_vecs=self._reasoning_vecs)

    @classmethod
    def load_cache(cls, path: str | Path, db: DemoDatabase,
                   provider: EmbeddingProvider) -> "RetrievalIndex":
        data = np.load(Path(path))
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        expected = f"{db.content_hash()}:{provider.provider_id}:{provider.dimension}"
        if meta["cache_key"] != expected:
            raise RetrievalError(
                f"index cache key {meta['cache_key']} does not match database/provider {expected}"
            )
        return cls(db=db, provider_id=meta["provider_id"], dimension=meta["dimension"],
                   traj_ids=list(meta["traj_ids"]),
                   traj_positions=[int(p) for p in meta["traj_positions"]],
                   goal_vecs=data["goal_vecs"], plan_vecs=data["plan_vecs"],
                   step_keys=[(int(a), int(b)) for a, b in meta["step_keys"]],
                   reasoning_vecs=data["reasoning_vecs"])


def build_index(db: DemoDatabase, provider: EmbeddingProvider,
                include_failed: bool = False) -> RetrievalIndex:
    """Embed every eligible trajectory's goal, plan, and per-step reasoning.

    Failed episodes are skipped by default so retrieval only surfaces
    demonstrations that achieved their goal; pass ``include_failed=True``
    to index everything.
    """
    if provider.dimension != db.manifest.embedding_dim:
        raise RetrievalError(
            f"provider dimension {provider.dimension} does not match database manifest "
            f"dimension {db.manifest.embedding_dim}"
        )
    traj_ids: list[str] = []
    traj_positions: list[int] = []
    goal_rows: list[np.ndarray] = []
    plan_rows: list[np.ndarray] = []
    step_keys: list[tuple[int, int]] = []
    reasoning_rows: list[np.ndarray] = []
    for pos, traj in enumerate(db):
        if not traj.success and not include_failed:
            continue
        slot = len(traj_ids)
        traj_ids.append(traj.task.task_id)
        traj_positions.append(pos)
        try:
            goal_rows.append(provider.embed_text(traj.task.goal).values)
            plan_rows.append(provider.embed_text(traj.plan).values)
            for step in traj.steps:
                step_keys.append((slot, step.index))
                reasoning_rows.append(provider.embed_text(step.reasoning).values)
        except Exception as exc:
            raise RetrievalError(
                f"embedding failed for trajectory {traj.task.task_id!r}: {exc}"
            ) from exc
    dim = provider.dimension
    return RetrievalIndex(
        db=db, provider_id=provider.provider_id, dimension=dim,
        traj_ids=traj_ids, traj_positions=traj_positions,
        goal_vecs=np.array(goal_rows).reshape(len(goal_rows), dim),
        plan_vecs=np.array(plan_rows).reshape(len(plan_rows), dim),
        step_keys=step_keys,
        reasoning_vecs=np.array(reasoning_rows).reshape(len(reasoning_rows), dim),
    )
