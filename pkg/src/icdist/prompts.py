"""Prompt templates, exemplar serialization, and model-output parsing.

The default templates are fixed strings with named placeholders; alternates
can be loaded from text files as long as they keep the same placeholder names.
Model replies must label their two fields on their own lines as
``reasoning:`` and ``action:`` with no variations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .retrieval import PlanMatch, StepWindow

PLAN_SYSTEM_TEMPLATE = (
    "You are an expert at generating high-level plans of actions to achieve a goal.\n"
    " Here is your action space: {action_space}.\n"
    " Here are some examples of goal,plan from episodes that successfully achieved "
    "similar goals: {examples}"
)
PLAN_USER_TEMPLATE = "goal: {goal}\n plan: "

REACT_SYSTEM_TEMPLATE = (
    "You are a ReAct agent that is an expert at reasoning and taking actions to "
    "accomplish a goal. \n Goal: '{goal}'. \n You will receive observations and "
    "respond with *exactly* one reasoning and one action per observation. \n Write "
    "them on their own lines, with these exact labels and a colon: \n reasoning: "
    "<your step-by-step reasoning, concise, may be multi-line> \n action: <a single, "
    "directly executable command or final answer> \n Use the labels exactly as "
    "written: 'reasoning:' and 'action:' (no variations). \n Here is your action "
    "space: {action_space}.\n Here are some examples of goal, plan, observation, "
    "reasoning, action from episodes that successfully achieved similar goals: "
    "{examples}"
)
REACT_USER_TEMPLATE = "goal: {goal}\n plan: {plan}\n trajectory: {trajectory}\n action: "

VERIFIER_SYSTEM_TEMPLATE = (
    "You are an expert LLM judge that determines if a set of actions that could be "
    "taken by an LLM agent are all effectively equivalent. First, you will be "
    "provided the current state of the agent: the trajectory so far. You will "
    "receive a set of actions and respond with 'YES' if they are all equivalent "
    "and 'NO' if at least one is different. YOU MUST OUTPUT NOTHING ELSE. \n Here "
    "is your action space: {action_space}.\n Here are some examples of goal, plan, "
    "observation, reasoning, action from episodes that successfully achieved "
    "similar goals: {examples}"
)
VERIFIER_USER_TEMPLATE = (
    "goal: {goal}\n plan: {plan}\n trajectory: {trajectory}\n "
    "Set of actions: {actions}, effectively equivalent? "
)


class ParseError(Exception):
    """Raised when a model reply is missing a required label."""


@dataclass(frozen=True)
class ParsedStep:
    reasoning: str
    action: str


@dataclass(frozen=True)
class PromptTemplates:
    """The four templates a run uses; override any of them from files."""

    plan_system: str = PLAN_SYSTEM_TEMPLATE
    plan_user: str = PLAN_USER_TEMPLATE
    react_system: str = REACT_SYSTEM_TEMPLATE
    react_user: str = REACT_USER_TEMPLATE
    verifier_system: str = VERIFIER_SYSTEM_TEMPLATE
    verifier_user: str = VERIFIER_USER_TEMPLATE

    @classmethod
    def from_dir(cls, directory: str | Path) -> "PromptTemplates":
        """Load any of plan_system.txt, plan_user.txt, react_system.txt,
        react_user.txt, verifier_system.txt, verifier_user.txt found in the
        directory; missing files keep their defaults."""
        directory = Path(directory)
        kwargs = {}
        for name in ("plan_system", "plan_user", "react_system", "react_user",
                     "verifier_system", "verifier_user"):
            path = directory / f"{name}.txt"
            if path.exists():
                kwargs[name] = path.read_text(encoding="utf-8")
        return cls(**kwargs)


def format_plan_exemplars(matches: list[PlanMatch]) -> str:
    """Serialize (goal, plan) exemplars verbatim, best match first."""
    blocks = [f"goal: {m.goal}\nplan: {m.plan}" for m in matches]
    return "\n\n".join(blocks)


def format_window_exemplars(windows: list[StepWindow]) -> str:
    """Serialize step windows as goal/plan header plus one block per step."""
    blocks = []
    for w in windows:
        lines = [f"goal: {w.goal}", f"plan: {w.plan}"]
        for step in w.steps:
            lines.append(f"observation: {step.observation}")
            lines.append(f"reasoning: {step.reasoning}")
            lines.append(f"action: {step.action}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def format_trajectory(history: list[tuple[str, str, str]], current_observation: str,
                      char_budget: int = 40_000) -> str:
    """Serialize the episode so far plus the pending observation.

    ``history`` holds completed (observation, reasoning, action) triples.
    When the rendering exceeds ``char_budget`` characters, whole oldest steps
    are dropped first.
    """
    step_blocks = [
        f"observation: {o}\nreasoning: {r}\naction: {a}" for o, r, a in history
    ]
    tail = f"observation: {current_observation}"
    rendered = "\n".join(step_blocks + [tail])
    while step_blocks and len(rendered) > char_budget:
        step_blocks.pop(0)
        rendered = "\n".join(step_blocks + [tail])
    return rendered


def render_plan_prompt(goal: str, plan_exemplars: list[PlanMatch], action_space: str,
                       templates: PromptTemplates = PromptTemplates()) -> tuple[str, str]:
    system_text = templates.plan_system.format(
        action_space=action_space, examples=format_plan_exemplars(plan_exemplars))
    user_text = templates.plan_user.format(goal=goal)
    return system_text, user_text


def render_react_prompt(goal: str, plan: str, trajectory_text: str,
                        step_windows: list[StepWindow], action_space: str,
                        templates: PromptTemplates = PromptTemplates()) -> tuple[str, str]:
    system_text = templates.react_system.format(
        goal=goal, action_space=action_space,
        examples=format_window_exemplars(step_windows))
    user_text = templates.react_user.format(goal=goal, plan=plan,
                                            trajectory=trajectory_text)
    return system_text, user_text


def render_verifier_prompt(goal: str, plan: str, trajectory_text: str,
                           actions: list[str], action_space: str, examples: str = "",
                           templates: PromptTemplates = PromptTemplates()) -> tuple[str, str]:
    """Render the equivalence-judge prompt over the deduplicated action set."""
    deduped = sorted(set(actions))
    action_set = "{" + ", ".join(repr(a) for a in deduped) + "}"
    system_text = templates.verifier_system.format(action_space=action_space,
                                                   examples=examples)
    user_text = templates.verifier_user.format(goal=goal, plan=plan,
                                               trajectory=trajectory_text,
                                               actions=action_set)
    return system_text, user_text


def parse_react_output(text: str) -> ParsedStep:
    """Extract the labeled reasoning and action from a model reply.

    Reasoning spans from the first ``reasoning:`` label to the following
    ``action:`` label (multi-line reasoning preserved); the action is the rest
    of the ``action:`` line, trimmed. Missing either label is a parse error.
    """
    lines = text.split("\n")
    reasoning_start = None
    for i, line in enumerate(lines):
        if line.lstrip().startswith("reasoning:"):
            reasoning_start = i
            break
    if reasoning_start is None:
        raise ParseError("reply has no 'reasoning:' label")
    first = lines[reasoning_start].lstrip()[len("reasoning:"):].strip()
    reasoning_parts = [first] if first else []
    action = None
    for line in lines[reasoning_start + 1:]:
        if line.lstrip().startswith("action:"):
            action = line.lstrip()[len("action:"):].strip()
            break
        reasoning_parts.append(line)
    if action is None:
        raise ParseError("reply has no 'action:' label after 'reasoning:'")
    if not action:
        raise ParseError("'action:' label carries no action text")
    return ParsedStep(reasoning="\n".join(reasoning_parts).strip(), action=action)
