"""Token-level call ledger, episode cost arithmetic, breakeven, and Pareto reporting.

All currency math uses :class:`decimal.Decimal` so per-call costs stay exact
when summed over thousands of episodes. Prices are quoted in USD per one
million tokens; retrieval and embedding work is costed at zero.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from decimal import ROUND_CEILING, Decimal
from pathlib import Path
from typing import Iterable, Sequence

MICRO = Decimal(10) ** 6

# October-2025 list prices, USD per 1M tokens (input, output). Overridable in config.
DEFAULT_PRICES: dict[str, tuple[str, str]] = {
    "gpt-4.1-mini": ("0.40", "1.60"),
    "gpt-4.1": ("2.00", "8.00"),
    "claude-sonnet-4.5": ("3.00", "15.00"),
    "llama-3.3-70b": ("0.13", "0.39"),
}


class CostError(Exception):
    """Raised for unpriced models, zero baselines, and empty aggregations."""


@dataclass(frozen=True)
class Price:
    input_per_million: Decimal
    output_per_million: Decimal

    def __post_init__(self):
        if self.input_per_million < 0 or self.output_per_million < 0:
            raise CostError("prices must be non-negative")


class PriceTable:
    """Mapping from pricing key to per-1M-token input/output prices."""

    def __init__(self, prices: dict[str, tuple[str | Decimal, str | Decimal]] | None = None):
        source = prices if prices is not None else DEFAULT_PRICES
        self._prices = {
            key: Price(Decimal(str(inp)), Decimal(str(out)))
            for key, (inp, out) in source.items()
        }

    def __contains__(self, key: str) -> bool:
        return key in self._prices

    def get(self, key: str) -> Price:
        try:
            return self._prices[key]
        except KeyError:
            raise CostError(f"no price configured for model {key!r}") from None

    def cost_of(self, key: str, input_tokens: int, output_tokens: int) -> Decimal:
        price = self.get(key)
        return (input_tokens * price.input_per_million
                + output_tokens * price.output_per_million) / MICRO


@dataclass(frozen=True)
class CallRecord:
    """One model invocation: who was called, at which step, and what it cost in tokens."""

    episode_id: str
    phase: str  # "plan" or "act"
    step: int | None  # act-step index; None for the plan phase
    model_id: str
    role: str  # student | teacher | verifier
    input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise CostError("token counts must be non-negative")


class Ledger:
    """Append-only record of every model call in a run.

    Episodes write into their own ledger slice; slices merge after completion,
    so aggregation is independent of episode scheduling order.
    """

    def __init__(self):
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def record(self, record: CallRecord) -> None:
        with self._lock:
            self._records.append(record)

    def extend(self, other: "Ledger") -> None:
        with self._lock:
            self._records.extend(other._records)

    @property
    def records(self) -> tuple[CallRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def episode_slice(self, episode_id: str) -> list[CallRecord]:
        return [r for r in self._records if r.episode_id == episode_id]

    def export_csv(self, path: str | Path, prices: PriceTable) -> None:
        """One row per call with its exact USD cost."""
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode_id", "phase", "step", "model_id", "role",
                             "input_tokens", "output_tokens", "cost_usd"])
            for r in self._records:
                cost = prices.cost_of(r.model_id, r.input_tokens, r.output_tokens)
                writer.writerow([r.episode_id, r.phase,
                                 "" if r.step is None else r.step,
                                 r.model_id, r.role, r.input_tokens, r.output_tokens,
                                 str(cost)])


def episode_cost(records: Iterable[CallRecord], prices: PriceTable) -> Decimal:
    """Sum of (input_tokens * input_price + output_tokens * output_price) / 1e6
    over every record, all roles included."""
    total = Decimal(0)
    for r in records:
        total += prices.cost_of(r.model_id, r.input_tokens, r.output_tokens)
    return total


def normalized_cost(cost: Decimal, teacher_baseline: Decimal) -> Decimal:
    """Episode cost as a fraction of the all-teacher baseline cost."""
    if teacher_baseline <= 0:
        raise CostError("teacher baseline cost must be positive")
    return Decimal(cost) / Decimal(teacher_baseline)


@dataclass(frozen=True)
class BreakevenResult:
    demo_cost: Decimal
    baseline_cost: Decimal
    ours_cost: Decimal
    breaks_even: bool
    n_star: int | None

    def savings_at(self, n: int) -> Decimal:
        return n * (self.baseline_cost - self.ours_cost) - self.demo_cost


def breakeven(demo_cost: Decimal | str | float, baseline_cost: Decimal | str | float,
              ours_cost: Decimal | str | float) -> BreakevenResult:
    """Smallest episode count at which cumulative per-episode savings cover the
    upfront demonstration cost: ceil(demo / (baseline - ours)).

    When the per-episode saving is zero or negative the result is marked as
    never breaking even. A zero upfront cost yields n_star=1: the first episode
    already comes out ahead.
    """
    demo = Decimal(str(demo_cost))
    baseline = Decimal(str(baseline_cost))
    ours = Decimal(str(ours_cost))
    if demo < 0:
        raise CostError("demonstration cost must be non-negative")
    delta = baseline - ours
    if delta <= 0:
        return BreakevenResult(demo, baseline, ours, breaks_even=False, n_star=None)
    n_star = int((demo / delta).to_integral_value(rounding=ROUND_CEILING))
    return BreakevenResult(demo, baseline, ours, breaks_even=True, n_star=max(1, n_star))


@dataclass(frozen=True)
class ParetoPoint:
    accuracy: float
    cost: float
    label: str = ""


def pareto_frontier(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points not dominated by any other, sorted by cost ascending.

    A point is dominated when another has accuracy >= and cost <= with at
    least one inequality strict; exact duplicates survive together.
    """
    frontier = []
    for p in points:
        dominated = any(
            q.accuracy >= p.accuracy and q.cost <= p.cost
            and (q.accuracy > p.accuracy or q.cost < p.cost)
            for q in points
        )
        if not dominated:
            frontier.append(p)
    return sorted(frontier, key=lambda p: (p.cost, -p.accuracy, p.label))


@dataclass(frozen=True)
class CostReport:
    """Per-episode rollup fed into run summaries."""

    episode_id: str
    cost_usd: Decimal
    success: bool
    steps: int
    teacher_decisions: int
    total_decisions: int
    normalized: Decimal | None = None

    @property
    def teacher_fraction(self) -> float:
        if self.total_decisions == 0:
            return 0.0
        return self.teacher_decisions / self.total_decisions


@dataclass
class RunSummary:
    """Run-level averages shaped like one row of a method-comparison table."""

    method: str
    episodes: int
    accuracy: float
    mean_cost_usd: Decimal
    mean_normalized_cost: Decimal | None
    teacher_fraction: float
    mean_steps: float
    tokens_by_role: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "episodes": self.episodes,
            "accuracy": self.accuracy,
            "mean_cost_usd": str(self.mean_cost_usd),
            "mean_normalized_cost": (None if self.mean_normalized_cost is None
                                     else str(self.mean_normalized_cost)),
            "teacher_fraction": self.teacher_fraction,
            "mean_steps": self.mean_steps,
            "tokens_by_role": self.tokens_by_role,
        }


def aggregate_run(method: str, reports: Sequence[CostReport],
                  records: Sequence[CallRecord],
                  teacher_baseline: Decimal | None = None) -> RunSummary:
    """Arithmetic means over episodes plus per-role token totals.

    The teacher fraction is computed over step decisions pooled across the
    whole run, not averaged per episode, so short and long episodes weigh in
    proportion to their decision counts.
    """
    if not reports:
        raise CostError("cannot aggregate an empty run")
    n = len(reports)
    total_cost = sum((r.cost_usd for r in reports), Decimal(0))
    teacher_decisions = sum(r.teacher_decisions for r in reports)
    total_decisions = sum(r.total_decisions for r in reports)
    tokens: dict[str, dict[str, int]] = {}
    for rec in records:
        slot = tokens.setdefault(rec.role, {"input_tokens": 0, "output_tokens": 0, "calls": 0})
        slot["input_tokens"] += rec.input_tokens
        slot["output_tokens"] += rec.output_tokens
        slot["calls"] += 1
    mean_cost = total_cost / n
    return RunSummary(
        method=method,
        episodes=n,
        accuracy=sum(1 for r in reports if r.success) / n,
        mean_cost_usd=mean_cost,
        mean_normalized_cost=(None if teacher_baseline is None
                              else normalized_cost(mean_cost, teacher_baseline)),
        teacher_fraction=(teacher_decisions / total_decisions) if total_decisions else 0.0,
        mean_steps=sum(r.steps for r in reports) / n,
        tokens_by_role=tokens,
    )
