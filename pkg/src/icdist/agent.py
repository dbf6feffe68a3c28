"""Episode execution: plan with retrieved plan exemplars, then retrieve,
prompt, parse, and act each step until the environment finishes or the step
budget runs out.

Retrieval granularity is configurable: ``per-step`` fetches fresh step windows
at every decision point, ``single`` fetches whole trajectories once before the
first step and reuses them for the entire episode.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import Ledger
from .gateway import Gateway
from .prompts import PromptTemplates, format_trajectory, render_plan_prompt, render_react_prompt
from .retrieval import EmbeddingProvider, RetrievalIndex, ScoreWeights, StepWindow
from .routing import PolicyConfig, RoleModels, RoutingDecision, StepContext, decide_step
from .store import StepRecord, TaskSpec, Trajectory

logger = logging.getLogger(__name__)


class AgentError(Exception):
    """Raised when an episode cannot run (bad config, hard gateway failure)."""


@dataclass(frozen=True)
class EpisodeConfig:
    """Per-episode knobs: budget, retrieval width, sampling, and policy."""

    max_steps: int = 30
    k: int = 6
    window_radius: int = 2
    temperature: float = 0.1
    policy: PolicyConfig = field(default_factory=lambda: PolicyConfig(kind="StudentIC"))
    retrieval_granularity: str = "per-step"  # per-step | single
    history_char_budget: int = 40_000
    step_query_source: str = "observation"  # observation | last-reasoning
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)
    templates: PromptTemplates = field(default_factory=PromptTemplates)

    def validate(self) -> None:
        if self.max_steps < 1:
            raise AgentError("max_steps must be >= 1")
        if self.k < 0:
            raise AgentError("k must be >= 0 (0 means zero-shot)")
        if self.window_radius < 0:
            raise AgentError("window_radius must be >= 0")
        if self.temperature < 0:
            raise AgentError("temperature must be >= 0")
        if self.retrieval_granularity not in ("per-step", "single"):
            raise AgentError(
                f"unknown retrieval granularity {self.retrieval_granularity!r}")
        if self.step_query_source not in ("observation", "last-reasoning"):
            raise AgentError(f"unknown step query source {self.step_query_source!r}")
        self.policy.validate()
        if self.policy.kind == "StudentZS" and self.k != 0:
            raise AgentError("StudentZS requires k=0 (zero-shot)")


@dataclass(frozen=True)
class EpisodeResult:
    trajectory: Trajectory
    success: bool
    plan_decision: RoutingDecision
    step_decisions: tuple[RoutingDecision, ...]
    ledger: Ledger

    @property
    def steps(self) -> int:
        return len(self.step_decisions)

    @property
    def teacher_step_decisions(self) -> int:
        return sum(1 for d in self.step_decisions if d.chosen_model == "teacher")


def _stable_seed(*parts: str | int) -> int:
    digest = hashlib.blake2b(":".join(str(p) for p in parts).encode("utf-8"),
                             digest_size=4).digest()
    return int.from_bytes(digest, "big")


def run_episode(env, task: TaskSpec, index: RetrievalIndex | None,
                config: EpisodeConfig, gateway: Gateway, models: RoleModels,
                provider: EmbeddingProvider, run_seed: int = 0,
                ledger: Ledger | None = None) -> EpisodeResult:
    """Execute one task end to end and return its trajectory plus routing trace.

    Deterministic given (run_seed, scripted backends, config): every sampling
    seed derives from the run seed and the task id, and the random-mix stream
    is owned by the episode.
    """
    config.validate()
    if config.k > 0 and index is None:
        raise AgentError("retrieval requested (k > 0) but no index provided")
    ledger = ledger if ledger is not None else Ledger()
    episode_seed = _stable_seed(run_seed, task.task_id)
    mix_rng = np.random.default_rng(
        [config.policy.seed if config.policy.seed is not None else 0, episode_seed])
    action_space = env.action_space_text()
    observation = env.reset(task)

    goal_vec = provider.embed_text(task.goal) if config.k > 0 else None
    plan_matches = []
    fixed_windows: list[StepWindow] = []
    if config.k > 0 and index is not None:
        plan_matches = index.retrieve_plans(goal_vec, config.k)
        if config.retrieval_granularity == "single":
            fixed_windows = index.retrieve_full_trajectories(goal_vec, config.k)

    def make_ctx(phase: str, step: int | None, plan: str, trajectory_text: str,
                 windows: list[StepWindow], seed: int) -> StepContext:
        if phase == "plan":
            student_system, student_user = render_plan_prompt(
                task.goal, plan_matches, action_space, config.templates)
            teacher_system, teacher_user = render_plan_prompt(
                task.goal, [], action_space, config.templates)
            exemplar_text = student_system
        else:
            student_system, student_user = render_react_prompt(
                task.goal, plan, trajectory_text, windows, action_space, config.templates)
            teacher_system, teacher_user = render_react_prompt(
                task.goal, plan, trajectory_text, [], action_space, config.templates)
            exemplar_text = student_system
        return StepContext(
            episode_id=task.task_id, phase=phase, step=step, goal=task.goal,
            plan=plan, trajectory_text=trajectory_text, action_space=action_space,
            student_system=student_system, student_user=student_user,
            teacher_system=teacher_system, teacher_user=teacher_user,
            exemplar_text=exemplar_text, temperature=config.temperature,
            seed=seed, difficulty=task.difficulty, templates=config.templates)

    plan_ctx = make_ctx("plan", None, "", "", [], episode_seed)
    plan_decision = decide_step(config.policy, plan_ctx, models, gateway, ledger, mix_rng)
    plan = plan_decision.executed_action
    plan_vec = provider.embed_text(plan) if config.k > 0 else None

    history: list[tuple[str, str, str]] = []
    steps: list[StepRecord] = []
    decisions: list[RoutingDecision] = []
    success = False
    last_reasoning = ""

    for t in range(config.max_steps):
        if config.k > 0 and index is not None and config.retrieval_granularity == "per-step":
            query_text = (last_reasoning if config.step_query_source == "last-reasoning"
                          and last_reasoning else observation)
            step_vec = provider.embed_text(query_text)
            windows = index.retrieve_step_windows(
                goal_vec, plan_vec, step_vec, config.k, config.window_radius,
                config.score_weights)
        else:
            windows = fixed_windows
        trajectory_text = format_trajectory(history, observation,
                                            config.history_char_budget)
        ctx = make_ctx("act", t, plan, trajectory_text, windows,
                       episode_seed + 1000 * (t + 1))
        decision = decide_step(config.policy, ctx, models, gateway, ledger, mix_rng)
        decisions.append(decision)
        steps.append(StepRecord(index=t, observation=observation,
                                reasoning=decision.executed_reasoning,
                                action=decision.executed_action))
        try:
            observation, done, success = env.step(decision.executed_action)
        except Exception as exc:
            logger.warning("environment fault in episode %s at step %d: %s",
                           task.task_id, t, exc)
            success = False
            break
        history.append((steps[-1].observation, steps[-1].reasoning, steps[-1].action))
        last_reasoning = decision.executed_reasoning
        if done:
            break

    expected_calls = plan_decision.call_count + sum(d.call_count for d in decisions)
    logged_calls = len(ledger.episode_slice(task.task_id))
    if expected_calls != logged_calls:
        raise AgentError(
            f"ledger reconciliation failed for {task.task_id}: "
            f"{logged_calls} records vs {expected_calls} calls")

    source_model = (models.teacher_id if config.policy.kind == "TeacherOnly"
                    else models.student_id)
    trajectory = Trajectory(task=task, plan=plan, steps=tuple(steps),
                            success=success, source_model=source_model)
    return EpisodeResult(trajectory=trajectory, success=success,
                         plan_decision=plan_decision,
                         step_decisions=tuple(decisions), ledger=ledger)
