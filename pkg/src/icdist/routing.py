"""Per-step model routing: cascades, random mixing, and difficulty rules.

A cascade samples the student several times under the same retrieved context;
agreement executes the student's first sample and disagreement defers the step
to the teacher. Agreement is strict string equality after whitespace
normalization, optionally softened by an equivalence-judge model that is
consulted only after the strict check fails.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .costs import CallRecord, Ledger
from .gateway import ChatRequest, ChatResponse, Gateway, GatewayError
from .prompts import ParseError, PromptTemplates, parse_react_output, render_verifier_prompt

logger = logging.getLogger(__name__)

CASCADE_KINDS = ("ICCascade", "CascadeOnly")
POLICY_KINDS = ("TeacherOnly", "StudentZS", "StudentIC", "ICCascade", "CascadeOnly",
                "RandomMix", "DifficultyAware")


class PolicyError(Exception):
    """Raised for invalid policy configuration or missing routing inputs."""


@dataclass(frozen=True)
class PolicyConfig:
    """Which strategy decides each step, and its knobs."""

    kind: str
    n_samples: int = 3
    equivalence: str = "strict"  # strict | soft
    teacher_fraction: float = 0.0  # RandomMix probability of drawing the teacher
    seed: int | None = None
    difficulty_rule: dict[int, str] = field(default_factory=dict)
    cascade_plan: bool = True  # cascade kinds also gate the planning call
    defer_with_exemplars: bool = False  # deferred teacher sees exemplars (ablation)
    verifier_sees_exemplars: bool = True

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind in CASCADE_KINDS and self.n_samples < 2:
            raise PolicyError(f"{self.kind} needs n_samples >= 2")
        if self.equivalence not in ("strict", "soft"):
            raise PolicyError(f"unknown equivalence mode {self.equivalence!r}")
        if not 0.0 <= self.teacher_fraction <= 1.0:
            raise PolicyError("teacher_fraction must lie in [0, 1]")
        if self.kind == "RandomMix" and self.seed is None:
            raise PolicyError("RandomMix requires a seed")
        if self.kind == "DifficultyAware":
            if not self.difficulty_rule:
                raise PolicyError("DifficultyAware requires a difficulty_rule")
            for level, kind in self.difficulty_rule.items():
                if level not in (1, 2, 3):
                    raise PolicyError(f"difficulty_rule level {level!r} not in {{1, 2, 3}}")
                if kind == "DifficultyAware" or kind not in POLICY_KINDS:
                    raise PolicyError(f"difficulty_rule maps to invalid kind {kind!r}")


@dataclass(frozen=True)
class RoleModels:
    student_id: str
    teacher_id: str
    verifier_id: str | None = None


@dataclass(frozen=True)
class StepContext:
    """Everything a routing decision needs for one plan or act decision."""

    episode_id: str
    phase: str  # "plan" | "act"
    step: int | None
    goal: str
    plan: str
    trajectory_text: str
    action_space: str
    student_system: str
    student_user: str
    teacher_system: str
    teacher_user: str
    exemplar_text: str
    temperature: float
    seed: int
    difficulty: int | None = None
    templates: PromptTemplates = PromptTemplates()


@dataclass(frozen=True)
class RoutingDecision:
    phase: str
    step: int | None
    chosen_model: str  # "student" | "teacher"
    executed_action: str
    executed_reasoning: str
    samples: tuple[str, ...]
    consistent: bool | None  # None when no consistency check applies
    verifier_used: bool
    parse_failures: int = 0
    student_calls: int = 0
    teacher_calls: int = 0
    verifier_calls: int = 0

    @property
    def call_count(self) -> int:
        return self.student_calls + self.teacher_calls + self.verifier_calls


def normalize_action(action: str) -> str:
    """Trim and collapse whitespace runs; case and punctuation are preserved."""
    return " ".join(action.split())


def check_consistency_strict(actions: list[str]) -> bool:
    """True iff all candidate actions are identical after normalization."""
    if len(actions) < 2:
        raise PolicyError("consistency check needs at least two samples")
    normalized = {normalize_action(a) for a in actions}
    return len(normalized) == 1


def check_consistency_soft(gateway: Gateway, models: RoleModels, ctx: StepContext,
                           actions: list[str], ledger: Ledger,
                           policy: PolicyConfig) -> bool:
    """Ask the verifier whether syntactically different actions are equivalent.

    Invoked only after the strict check has failed. Returns True only for a
    reply that trims and uppercases to exactly "YES"; a transport failure
    counts as disagreement (the step defers to the teacher).
    """
    if models.verifier_id is None:
        raise PolicyError("soft equivalence requires a configured verifier model")
    system_text, user_text = render_verifier_prompt(
        goal=ctx.goal, plan=ctx.plan, trajectory_text=ctx.trajectory_text,
        actions=actions, action_space=ctx.action_space,
        examples=ctx.exemplar_text if policy.verifier_sees_exemplars else "",
        templates=ctx.templates)
    req = ChatRequest(system_text=system_text, user_text=user_text,
                      temperature=ctx.temperature, seed=ctx.seed)
    try:
        response = gateway.complete(models.verifier_id, req)
    except GatewayError as exc:
        logger.warning("verifier call failed (%s); treating samples as inconsistent", exc)
        return False
    _log_response(ledger, ctx, "verifier", response)
    return response.samples[0].strip().upper() == "YES"


def random_mix_choice(p: float, rng: np.random.Generator) -> str:
    """Draw "teacher" with probability p, else "student"; reproducible under seed."""
    if not 0.0 <= p <= 1.0:
        raise PolicyError("p must lie in [0, 1]")
    return "teacher" if rng.random() < p else "student"


def _log_response(ledger: Ledger, ctx: StepContext, role: str,
                  response: ChatResponse) -> None:
    for input_tokens, output_tokens in response.usage:
        ledger.record(CallRecord(
            episode_id=ctx.episode_id, phase=ctx.phase, step=ctx.step,
            model_id=response.model_id, role=role,
            input_tokens=input_tokens, output_tokens=output_tokens))


def _call(gateway: Gateway, model_id: str, system: str, user: str, ctx: StepContext,
          n_samples: int = 1) -> ChatResponse:
    req = ChatRequest(system_text=system, user_text=user,
                      temperature=ctx.temperature, n_samples=n_samples, seed=ctx.seed)
    return gateway.complete(model_id, req)


def _extract_step(sample: str) -> tuple[str, str, bool]:
    """(reasoning, action, parsed_ok); a malformed reply degrades to raw text."""
    try:
        parsed = parse_react_output(sample)
        return parsed.reasoning, parsed.action, True
    except ParseError:
        action = normalize_action(sample) or "noop"
        return "", action, False


def _single_model_decision(chosen: str, model_id: str, role: str, system: str,
                           user: str, ctx: StepContext, gateway: Gateway,
                           ledger: Ledger) -> RoutingDecision:
    response = _call(gateway, model_id, system, user, ctx)
    _log_response(ledger, ctx, role, response)
    sample = response.samples[0]
    if ctx.phase == "plan":
        reasoning, action, ok = "", sample.strip(), True
    else:
        reasoning, action, ok = _extract_step(sample)
    return RoutingDecision(
        phase=ctx.phase, step=ctx.step, chosen_model=chosen,
        executed_action=action, executed_reasoning=reasoning,
        samples=(action,), consistent=None, verifier_used=False,
        parse_failures=0 if ok else 1,
        student_calls=1 if role == "student" else 0,
        teacher_calls=1 if role == "teacher" else 0)


def _teacher_decision(ctx: StepContext, models: RoleModels, gateway: Gateway,
                      ledger: Ledger, policy: PolicyConfig) -> RoutingDecision:
    system = ctx.student_system if policy.defer_with_exemplars else ctx.teacher_system
    return _single_model_decision("teacher", models.teacher_id, "teacher",
                                  system, ctx.teacher_user, ctx, gateway, ledger)


def _cascade_decision(ctx: StepContext, models: RoleModels, gateway: Gateway,
                      ledger: Ledger, policy: PolicyConfig) -> RoutingDecision:
    response = _call(gateway, models.student_id, ctx.student_system, ctx.student_user,
                     ctx, n_samples=policy.n_samples)
    _log_response(ledger, ctx, "student", response)
    if ctx.phase == "plan":
        candidates = [(("", s.strip(), True)) for s in response.samples]
    else:
        candidates = [_extract_step(s) for s in response.samples]
    parse_failures = sum(1 for _, _, ok in candidates if not ok)
    actions = [action for _, action, _ in candidates]

    consistent = False
    verifier_used = False
    verifier_calls = 0
    if parse_failures == 0:
        consistent = check_consistency_strict(actions)
        if not consistent and policy.equivalence == "soft" and ctx.phase == "act":
            verifier_used = True
            verifier_calls = 1
            consistent = check_consistency_soft(gateway, models, ctx, actions,
                                                ledger, policy)

    if consistent:
        reasoning, action, _ = candidates[0]
        return RoutingDecision(
            phase=ctx.phase, step=ctx.step, chosen_model="student",
            executed_action=action, executed_reasoning=reasoning,
            samples=tuple(actions), consistent=True, verifier_used=verifier_used,
            parse_failures=parse_failures, student_calls=policy.n_samples,
            verifier_calls=verifier_calls)
    deferral = _teacher_decision(ctx, models, gateway, ledger, policy)
    return replace(deferral, samples=tuple(actions), consistent=False,
                   verifier_used=verifier_used, parse_failures=parse_failures,
                   student_calls=policy.n_samples,
                   verifier_calls=verifier_calls)


def decide_step(policy: PolicyConfig, ctx: StepContext, models: RoleModels,
                gateway: Gateway, ledger: Ledger,
                rng: np.random.Generator) -> RoutingDecision:
    """Run one plan- or act-phase decision under the configured policy."""
    kind = policy.kind
    if kind == "DifficultyAware":
        if ctx.difficulty is None:
            raise PolicyError(
                f"task for episode {ctx.episode_id} has no difficulty label")
        try:
            kind = policy.difficulty_rule[ctx.difficulty]
        except KeyError:
            raise PolicyError(
                f"difficulty_rule has no entry for difficulty {ctx.difficulty}") from None
        return decide_step(replace(policy, kind=kind), ctx, models, gateway, ledger, rng)

    if kind == "TeacherOnly":
        return _teacher_decision(ctx, models, gateway, ledger, policy)
    if kind in ("StudentZS", "StudentIC"):
        return _single_model_decision("student", models.student_id, "student",
                                      ctx.student_system, ctx.student_user, ctx,
                                      gateway, ledger)
    if kind == "RandomMix":
        if random_mix_choice(policy.teacher_fraction, rng) == "teacher":
            return _teacher_decision(ctx, models, gateway, ledger, policy)
        return _single_model_decision("student", models.student_id, "student",
                                      ctx.student_system, ctx.student_user, ctx,
                                      gateway, ledger)
    if kind in CASCADE_KINDS:
        if ctx.phase == "plan" and not policy.cascade_plan:
            return _single_model_decision("student", models.student_id, "student",
                                          ctx.student_system, ctx.student_user, ctx,
                                          gateway, ledger)
        return _cascade_decision(ctx, models, gateway, ledger, policy)
    raise PolicyError(f"unknown policy kind {kind!r}")
