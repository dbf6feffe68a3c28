"""Deterministic scripted stand-ins for the teacher, student, and verifier.

These backends speak the same prompt formats as live models but are pure
functions of (prompt text, temperature, seed), which makes whole experiment
grids bit-reproducible and free.

Teacher: parses the goal and the action history out of the prompt, replays the
history on a private world simulation, and emits the optimal next action with a
templated explanation. It behaves like a model with full knowledge of the house.

Student: simulates a weak model boosted by in-context examples. Its documented
decision procedure, in order:

1. Exact copy - if an exemplar step's observation equals the current
   observation (whitespace-normalized), reply with that step's reasoning and
   action verbatim, independent of seed.
2. Rule table - a goal-conditioned reading of the current observation
   (deliver what you carry, take what you can see, finish when the goal state
   is confirmed, walk toward a known object location). Object locations are
   never built in: they are harvested from "The <object> is in the
   <receptacle> in the <room>." sentences appearing in the agent's own plan or
   in exemplar text. A rule action counts as *exemplar-grounded* only when
   some exemplar step demonstrates the same action verb; grounded actions are
   emitted noise-free.
3. Exploration fallback - with no applicable rule the student wanders: a
   deterministic hash of (goal, observation) picks a room to visit or a closed
   receptacle to open. It keeps no memory of where it has already searched.

Ungrounded actions (including all of a zero-shot student's) are perturbed:
with probability min(1, temperature * noise_scale) per sample the intended
action is replaced by a uniformly seeded draw from the navigation/open
candidates, so hotter sampling diverges more across seeds.

Verifier: answers YES when the candidate actions are identical after trimming,
whitespace collapsing, and quote-style unification ('" -> '), else NO.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .gateway import ChatRequest
from .store import TaskSpec
from .toyworld import (
    ENV_ID,
    GoalSpec,
    ToyWorldEnv,
    ToyWorldError,
    ToyWorldSpec,
    WorldState,
    oracle_action_plan,
    oracle_plan_text,
    oracle_reasoning,
    parse_goal,
)

DEFAULT_NOISE_SCALE = 1.5

_LOCATION_RE = re.compile(r"[Tt]he (.+?) is in the (.+?) in the (.+?)\.")
_ROOM_RE = re.compile(r"You are in the ([^.]+)\.")
_CARRYING_RE = re.compile(r"You are carrying the ([^.]+)\.")
_SEES_RE = re.compile(r"You see: (.+?)\. (?:Your hands|You are carrying)")
_PUT_EVENT_RE = re.compile(r"You put the (.+?) in the (.+?)\.")
_ROOMS_LIST_RE = re.compile(r"Rooms: ([^.\n]+)")


def _hash_int(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def _normalize(text: str) -> str:
    return " ".join(text.split())


# -- prompt dissection ---------------------------------------------------------

def split_react_user(user_text: str) -> tuple[str, str, str]:
    """(goal, plan, trajectory_text) from a rendered acting prompt."""
    if not user_text.startswith("goal: "):
        raise ValueError("acting prompt must start with 'goal: '")
    goal, rest = user_text[len("goal: "):].split("\n plan: ", 1)
    plan, rest = rest.split("\n trajectory: ", 1)
    trajectory = rest.rsplit("\n action: ", 1)[0]
    return goal, plan, trajectory


def split_plan_user(user_text: str) -> str:
    if not user_text.startswith("goal: "):
        raise ValueError("planning prompt must start with 'goal: '")
    return user_text[len("goal: "):].split("\n plan: ", 1)[0]


def is_plan_prompt(user_text: str) -> bool:
    return "\n trajectory: " not in user_text


@dataclass(frozen=True)
class ExemplarStep:
    observation: str
    reasoning: str
    action: str


def parse_exemplar_steps(system_text: str) -> list[ExemplarStep]:
    """All (observation, reasoning, action) triples inlined in the system prompt."""
    steps = []
    pending_obs: str | None = None
    pending_reasoning: str | None = None
    for line in system_text.split("\n"):
        stripped = line.strip()
        if stripped.startswith("observation: "):
            pending_obs = stripped[len("observation: "):]
            pending_reasoning = None
        elif stripped.startswith("reasoning: ") and pending_obs is not None:
            pending_reasoning = stripped[len("reasoning: "):]
        elif stripped.startswith("action: ") and pending_obs is not None:
            steps.append(ExemplarStep(observation=pending_obs,
                                      reasoning=pending_reasoning or "",
                                      action=stripped[len("action: "):]))
            pending_obs = None
            pending_reasoning = None
    return steps


def trajectory_actions(trajectory_text: str) -> list[str]:
    """Executed actions, in order, from a serialized trajectory section."""
    actions = []
    for line in trajectory_text.split("\n"):
        stripped = line.strip()
        if stripped.startswith("action: "):
            actions.append(stripped[len("action: "):])
    return actions


def harvest_locations(text: str, targets: tuple[str, ...]) -> dict[str, tuple[str, str]]:
    """Extract (receptacle, room) claims for the given objects from prose."""
    found = {}
    for obj, recep, room in _LOCATION_RE.findall(text):
        if obj in targets and obj not in found:
            found[obj] = (recep, room)
    return found


@dataclass(frozen=True)
class ObservedState:
    room: str
    carrying: str | None
    receptacles: dict[str, tuple[bool, tuple[str, ...]]]  # name -> (closed, contents)


def parse_observation(observation: str) -> ObservedState | None:
    """Structured view of one status observation; None if it carries no state."""
    room_match = _ROOM_RE.search(observation)
    if room_match is None:
        return None
    carrying_match = _CARRYING_RE.search(observation)
    receptacles: dict[str, tuple[bool, tuple[str, ...]]] = {}
    sees = _SEES_RE.search(observation)
    if sees:
        for desc in sees.group(1).split("; "):
            if desc.endswith(" (closed)"):
                receptacles[desc[len("a "):-len(" (closed)")]] = (True, ())
            elif desc.endswith(" (empty)"):
                receptacles[desc[len("a "):-len(" (empty)")]] = (False, ())
            elif " containing " in desc:
                name, contents = desc[len("a "):].split(" containing ", 1)
                parts = contents.split(" and a ")
                first = parts[0][len("a "):] if parts[0].startswith("a ") else parts[0]
                receptacles[name] = (False, tuple([first] + parts[1:]))
    return ObservedState(room=room_match.group(1),
                         carrying=carrying_match.group(1) if carrying_match else None,
                         receptacles=receptacles)


def latest_state(trajectory_text: str) -> tuple[str, ObservedState | None]:
    """Current observation plus its parsed state, falling back to the most
    recent state-bearing observation when the latest one is uninformative."""
    observations = []
    for line in trajectory_text.split("\n"):
        stripped = line.strip()
        if stripped.startswith("observation: "):
            observations.append(stripped[len("observation: "):])
    if not observations:
        raise ValueError("trajectory section has no observation")
    current = observations[-1]
    for obs in reversed(observations):
        state = parse_observation(obs)
        if state is not None:
            return current, state
    return current, None


# -- scripted teacher ----------------------------------------------------------

def scripted_teacher_policy(world: ToyWorldSpec, goal: GoalSpec,
                            state: WorldState) -> tuple[str, str]:
    """Optimal next (reasoning, action) for a live state; gives up via 'done'
    with an explicit explanation when no solution exists within budget."""
    try:
        action = oracle_action_plan(world, goal, state)[0]
    except ToyWorldError:
        return "I cannot find any way to achieve the goal from here. I give up.", "done"
    return oracle_reasoning(world, goal, state, action), action


class ScriptedTeacherBackend:
    """Full-knowledge model: replays the prompt's action history on a private
    simulation of the house, then plays the shortest continuation."""

    def __init__(self, world: ToyWorldSpec):
        self.world = world

    def _replay(self, goal_text: str, actions: list[str]) -> tuple[ToyWorldEnv, bool]:
        env = ToyWorldEnv(self.world)
        env.reset(TaskSpec(task_id="replay", env_id=ENV_ID, goal=goal_text))
        done = False
        for action in actions:
            if done:
                break
            _, done, _ = env.step(action)
        return env, done

    def complete(self, req: ChatRequest) -> tuple[str, ...]:
        if is_plan_prompt(req.user_text):
            goal_text = split_plan_user(req.user_text)
            text = oracle_plan_text(self.world, parse_goal(goal_text))
        else:
            goal_text, _, trajectory = split_react_user(req.user_text)
            env, done = self._replay(goal_text, trajectory_actions(trajectory))
            if done:
                reasoning, action = "The episode is already over.", "done"
            else:
                reasoning, action = scripted_teacher_policy(
                    self.world, env.goal_view(), env.state_view())
            text = f"reasoning: {reasoning}\naction: {action}"
        return tuple(text for _ in range(req.n_samples))


# -- scripted student ----------------------------------------------------------

_RULE_VERBS = {"go": "go to ", "open": "open ", "take": "take ", "put": "put ",
               "done": "done"}


def _action_verb(action: str) -> str:
    for verb, prefix in _RULE_VERBS.items():
        if action == prefix or action.startswith(prefix):
            return verb
    return "other"


def _compose_plan(goal: GoalSpec, known: dict[str, tuple[str, str]]) -> str:
    sentences = []
    for obj in goal.targets:
        if obj in known:
            recep, room = known[obj]
            sentences.append(f"The {obj} is in the {recep} in the {room}.")
        else:
            sentences.append(f"The {obj} location is unknown.")
    if goal.template == "examine":
        tail = f"Plan: go to the {goal.targets[0]} and make sure it is visible, then declare done."
    else:
        items = " and the ".join(goal.targets)
        tail = (f"Plan: take the {items} to the {goal.dest_receptacle} in the "
                f"{goal.dest_room}, then declare done.")
    return " ".join(sentences) + " " + tail


@dataclass
class _Intent:
    reasoning: str
    action: str
    grounded: bool


def _decide(goal: GoalSpec, current_obs: str, state: ObservedState | None,
            put_events: list[tuple[str, str]], knowledge: dict[str, tuple[str, str]],
            exemplar_verbs: set[str], rooms: list[str]) -> _Intent:
    def intent(reasoning: str, action: str) -> _Intent:
        return _Intent(reasoning, action, _action_verb(action) in exemplar_verbs)

    delivered = {obj for obj, recep in put_events if recep == goal.dest_receptacle}
    remaining = [t for t in goal.targets if t not in delivered]

    if goal.template == "examine":
        target = goal.targets[0]
        if state is not None and (state.carrying == target or any(
                target in contents for _, contents in state.receptacles.values())):
            return intent(f"The {target} is right here, so I have examined it.", "done")
    elif not remaining:
        return intent("Everything the goal asked for is in place.", "done")

    if state is None:
        return _Intent("I cannot tell where I am. I will try moving.", "", False)

    if state.carrying in remaining:
        obj = state.carrying
        if state.room == goal.dest_room:
            closed, _ = state.receptacles.get(goal.dest_receptacle, (False, ()))
            if closed:
                return intent(f"The {goal.dest_receptacle} is closed. I should open it first.",
                              f"open {goal.dest_receptacle}")
            return intent(f"I am carrying the {obj} and the {goal.dest_receptacle} is here. "
                          f"I should put it in.",
                          f"put {obj} in {goal.dest_receptacle}")
        return intent(f"I am carrying the {obj}. I should bring it to the {goal.dest_room}.",
                      f"go to {goal.dest_room}")

    if state.carrying is None:
        for obj in remaining:
            for recep, (_, contents) in state.receptacles.items():
                if obj in contents:
                    return intent(f"I see the {obj} in the {recep}. I should take it.",
                                  f"take {obj} from {recep}")

    for obj in remaining:
        if obj in knowledge and state.carrying is None:
            recep, room = knowledge[obj]
            if state.room != room:
                return intent(f"The {obj} is in the {recep} in the {room}. "
                              f"I should go to the {room}.", f"go to {room}")
            closed, contents = state.receptacles.get(recep, (False, ()))
            if closed:
                return intent(f"The {obj} is in the {recep} in the {room}. "
                              f"It is closed, so I should open it.", f"open {recep}")
            if obj in contents:
                return intent(f"I see the {obj} in the {recep}. I should take it.",
                              f"take {obj} from {recep}")
            # location claim did not pan out; fall through to exploration

    return _Intent("I have not found what I need yet. I will keep searching.", "", False)


def _explore_candidates(state: ObservedState | None, rooms: list[str]) -> list[str]:
    candidates = []
    if state is not None:
        candidates.extend(f"go to {room}" for room in rooms if room != state.room)
        candidates.extend(f"open {name}" for name, (closed, _) in
                          sorted(state.receptacles.items()) if closed)
    if not candidates:
        candidates = [f"go to {room}" for room in rooms] or ["done"]
    return candidates


def _greedy_explore(goal_text: str, current_obs: str,
                    state: ObservedState | None, rooms: list[str]) -> str:
    """Memoryless search move: a stable hash of the situation picks the move."""
    h = _hash_int(goal_text + "\x1f" + current_obs)
    if state is not None:
        closed = [name for name, (is_closed, _) in sorted(state.receptacles.items())
                  if is_closed]
        if closed and h % 3 == 0:
            return f"open {closed[0]}"
        other_rooms = [r for r in rooms if r != state.room]
        if other_rooms:
            return f"go to {other_rooms[h % len(other_rooms)]}"
    return f"go to {rooms[h % len(rooms)]}" if rooms else "done"


def scripted_student_policy(system_text: str, user_text: str, temperature: float,
                            seed: int, noise_scale: float = DEFAULT_NOISE_SCALE
                            ) -> tuple[str, str]:
    """One (reasoning, action) draw following the documented student procedure."""
    goal_text, plan_text, trajectory = split_react_user(user_text)
    goal = parse_goal(goal_text)
    exemplars = parse_exemplar_steps(system_text)
    rooms_match = _ROOMS_LIST_RE.search(system_text)
    rooms = [r.strip() for r in rooms_match.group(1).split(",")] if rooms_match else []

    current_obs, state = latest_state(trajectory)

    # Tier 1: exact observation match copies the demonstration outright.
    normalized_obs = _normalize(current_obs)
    for ex in exemplars:
        if _normalize(ex.observation) == normalized_obs:
            return ex.reasoning, ex.action

    put_events = _PUT_EVENT_RE.findall(trajectory)
    knowledge = harvest_locations(plan_text, goal.targets)
    for ex in exemplars:
        knowledge = {**harvest_locations(ex.reasoning, goal.targets), **knowledge}
    exemplar_verbs = {_action_verb(ex.action) for ex in exemplars}

    decision = _decide(goal, current_obs, state, put_events, knowledge,
                       exemplar_verbs, rooms)
    if decision.grounded and decision.action:
        return decision.reasoning, decision.action

    intended = decision.action or _greedy_explore(goal_text, current_obs, state, rooms)
    if not decision.action:
        decision.reasoning = (f"I have not found what I need yet. "
                              f"I will try '{intended}'.")
    noise_p = min(1.0, temperature * noise_scale)
    if noise_p > 0.0:
        rng = np.random.default_rng(seed)
        if rng.random() < noise_p:
            candidates = _explore_candidates(state, rooms)
            action = candidates[int(rng.integers(len(candidates)))]
            return f"I am not certain. I will try '{action}'.", action
    return decision.reasoning, intended


class ScriptedStudentBackend:
    """Weak in-context learner; see the module docstring for the full procedure."""

    def __init__(self, noise_scale: float = DEFAULT_NOISE_SCALE):
        self.noise_scale = noise_scale

    def complete(self, req: ChatRequest) -> tuple[str, ...]:
        if is_plan_prompt(req.user_text):
            goal = parse_goal(split_plan_user(req.user_text))
            known = harvest_locations(req.system_text, goal.targets)
            text = _compose_plan(goal, known)
            return tuple(text for _ in range(req.n_samples))
        base_seed = req.seed if req.seed is not None else 0
        samples = []
        for i in range(req.n_samples):
            reasoning, action = scripted_student_policy(
                req.system_text, req.user_text, req.temperature,
                seed=base_seed + i, noise_scale=self.noise_scale)
            samples.append(f"reasoning: {reasoning}\naction: {action}")
        return tuple(samples)


# -- scripted verifier -----------------------------------------------------------

_ACTION_SET_RE = re.compile(r"Set of actions: \{(.*)\}, effectively equivalent\?",
                            re.DOTALL)


def equivalent_actions(actions: list[str]) -> bool:
    """Documented string-equivalence rule: trim, collapse whitespace, unify quotes."""
    normalized = {_normalize(a).replace('"', "'") for a in actions}
    return len(normalized) <= 1


class ScriptedVerifierBackend:
    """Equivalence oracle replying strictly 'YES' or 'NO'."""

    def complete(self, req: ChatRequest) -> tuple[str, ...]:
        match = _ACTION_SET_RE.search(req.user_text)
        if not match:
            return tuple("NO" for _ in range(req.n_samples))
        import ast

        try:
            actions = list(ast.literal_eval("{" + match.group(1) + "}"))
        except (ValueError, SyntaxError):
            return tuple("NO" for _ in range(req.n_samples))
        verdict = "YES" if equivalent_actions([str(a) for a in actions]) else "NO"
        return tuple(verdict for _ in range(req.n_samples))
