"""Deterministic household text world: rooms, receptacles, portable objects.

The world is a single fixed house shared by every task; tasks vary only in
which objects to move or examine and where to put them. Observation sentences
are rendered from a small set of fixed templates so downstream consumers can
parse state reliably, and an exhaustive-search oracle provides shortest
solutions for demonstration collection and ground truth.

Action grammar (no articles):
    go to <room> | open <receptacle> | take <object> from <receptacle>
    | put <object> in <receptacle> | done
Anything else leaves the state untouched and observes "Nothing happens.".
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .store import TaskSpec, StepRecord, Trajectory

NOTHING_HAPPENS = "Nothing happens."
FINISHED = "Episode finished."
DEFAULT_STEP_BUDGET = 30
ENV_ID = "toyhouse-v1"


class ToyWorldError(Exception):
    """Raised for malformed worlds, unparseable goals, and infeasible task requests."""


class EpisodeFinishedError(ToyWorldError):
    """Raised when an episode is stepped after it has terminated."""


@dataclass(frozen=True)
class Receptacle:
    name: str
    room: str
    closable: bool


@dataclass(frozen=True)
class ToyWorldSpec:
    """Static world layout; object placements here are every episode's start state."""

    rooms: tuple[str, ...]
    receptacles: tuple[Receptacle, ...]
    object_homes: dict[str, str]  # object -> receptacle name
    start_room: str

    def receptacle(self, name: str) -> Receptacle | None:
        for r in self.receptacles:
            if r.name == name:
                return r
        return None

    def receptacles_in(self, room: str) -> list[Receptacle]:
        return [r for r in self.receptacles if r.room == room]

    def validate(self) -> None:
        if self.start_room not in self.rooms:
            raise ToyWorldError(f"start room {self.start_room!r} is not a room")
        names = [r.name for r in self.receptacles]
        if len(names) != len(set(names)):
            raise ToyWorldError("receptacle names must be globally unique")
        for r in self.receptacles:
            if r.room not in self.rooms:
                raise ToyWorldError(f"receptacle {r.name!r} placed in unknown room {r.room!r}")
        for obj, home in self.object_homes.items():
            if self.receptacle(home) is None:
                raise ToyWorldError(f"object {obj!r} homed in unknown receptacle {home!r}")

    def action_space_text(self) -> str:
        rooms = ", ".join(self.rooms)
        return ("go to <room>; open <receptacle>; take <object> from <receptacle>; "
                f"put <object> in <receptacle>; done. Rooms: {rooms}")

    def to_json(self) -> dict:
        return {
            "rooms": list(self.rooms),
            "receptacles": [{"name": r.name, "room": r.room, "closable": r.closable}
                            for r in self.receptacles],
            "object_homes": dict(self.object_homes),
            "start_room": self.start_room,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ToyWorldSpec":
        spec = cls(
            rooms=tuple(doc["rooms"]),
            receptacles=tuple(Receptacle(r["name"], r["room"], r["closable"])
                              for r in doc["receptacles"]),
            object_homes=dict(doc["object_homes"]),
            start_room=doc["start_room"],
        )
        spec.validate()
        return spec


def load_world(path: str | Path) -> ToyWorldSpec:
    with Path(path).open("r", encoding="utf-8") as fh:
        return ToyWorldSpec.from_json(json.load(fh))


_DEFAULT_LAYOUT = {
    "hallway": [("coat rack", False, []), ("shoe cabinet", True, [])],
    "kitchen": [("counter", False, ["apple", "banana"]),
                ("fridge", True, ["bottle", "lemon"]),
                ("cupboard", True, ["plate", "mug"])],
    "pantry": [("shelf", False, ["cereal", "rice"]),
               ("storage bin", True, ["candle", "lantern"])],
    "living room": [("coffee table", False, ["remote", "magazine"]),
                    ("sofa", False, ["pillow", "blanket"]),
                    ("tv stand", True, ["controller", "headset"])],
    "bedroom": [("nightstand", False, ["clock", "book"]),
                ("dresser", True, ["scarf", "glove"]),
                ("wardrobe", True, ["hat", "jacket"])],
    "bathroom": [("sink", False, ["soap", "toothbrush"]),
                 ("medicine cabinet", True, ["razor", "comb"])],
    "office": [("desk", False, ["pen", "notebook"]),
               ("bookcase", False, ["atlas", "journal"]),
               ("drawer", True, ["stapler", "charger"])],
    "garage": [("workbench", False, ["hammer", "wrench"]),
               ("toolbox", True, ["screwdriver", "pliers"]),
               ("crate", True, ["rope", "tape"])],
}


def default_world() -> ToyWorldSpec:
    receptacles = []
    homes: dict[str, str] = {}
    for room, entries in _DEFAULT_LAYOUT.items():
        for name, closable, objects in entries:
            receptacles.append(Receptacle(name=name, room=room, closable=closable))
            for obj in objects:
                homes[obj] = name
    spec = ToyWorldSpec(
        rooms=tuple(_DEFAULT_LAYOUT.keys()),
        receptacles=tuple(receptacles),
        object_homes=homes,
        start_room="hallway",
    )
    spec.validate()
    return spec


# -- goals -------------------------------------------------------------------

@dataclass(frozen=True)
class GoalSpec:
    """Structured form of a goal sentence."""

    template: str  # pick-place | pick-two | examine
    targets: tuple[str, ...]
    dest_receptacle: str | None = None
    dest_room: str | None = None

    def difficulty(self) -> int:
        return {"examine": 1, "pick-place": 2, "pick-two": 3}[self.template]

    def render(self) -> str:
        if self.template == "examine":
            return f"examine the {self.targets[0]}"
        if self.template == "pick-place":
            return (f"put the {self.targets[0]} in the {self.dest_receptacle} "
                    f"in the {self.dest_room}")
        return (f"put the {self.targets[0]} and the {self.targets[1]} "
                f"in the {self.dest_receptacle} in the {self.dest_room}")


def parse_goal(goal: str) -> GoalSpec:
    goal = goal.strip()
    if goal.startswith("examine the "):
        return GoalSpec(template="examine", targets=(goal[len("examine the "):],))
    if goal.startswith("put the "):
        body = goal[len("put the "):]
        parts = body.rsplit(" in the ", 2)
        if len(parts) != 3:
            raise ToyWorldError(f"unparseable goal: {goal!r}")
        targets_part, recep, room = parts
        targets = tuple(targets_part.split(" and the "))
        if len(targets) == 1:
            return GoalSpec("pick-place", targets, recep, room)
        if len(targets) == 2:
            return GoalSpec("pick-two", targets, recep, room)
    raise ToyWorldError(f"goal does not match any task template: {goal!r}")


# -- world state and environment ---------------------------------------------

@dataclass(frozen=True)
class WorldState:
    agent_room: str
    carrying: str | None
    locations: dict[str, str]  # object -> receptacle name (carried objects absent)
    opened: frozenset[str]

    def accessible(self, world: ToyWorldSpec, recep: Receptacle) -> bool:
        return (not recep.closable) or recep.name in self.opened

    def visible_objects(self, world: ToyWorldSpec, room: str) -> dict[str, str]:
        out = {}
        for recep in world.receptacles_in(room):
            if self.accessible(world, recep):
                for obj, loc in self.locations.items():
                    if loc == recep.name:
                        out[obj] = recep.name
        return out


def goal_satisfied(world: ToyWorldSpec, goal: GoalSpec, state: WorldState) -> bool:
    if goal.template == "examine":
        obj = goal.targets[0]
        if state.carrying == obj:
            return True
        loc = state.locations.get(obj)
        if loc is None:
            return False
        recep = world.receptacle(loc)
        return (recep is not None and recep.room == state.agent_room
                and state.accessible(world, recep))
    return all(state.locations.get(obj) == goal.dest_receptacle for obj in goal.targets)


class ToyWorldEnv:
    """Stateful episode over a :class:`ToyWorldSpec`. One instance per episode."""

    def __init__(self, world: ToyWorldSpec | None = None):
        self.world = world or default_world()
        self._goal: GoalSpec | None = None
        self._state: WorldState | None = None
        self._done = False

    def action_space_text(self) -> str:
        return self.world.action_space_text()

    def reset(self, task: TaskSpec) -> str:
        self._goal = parse_goal(task.goal)
        for obj in self._goal.targets:
            if obj not in self.world.object_homes:
                raise ToyWorldError(f"goal references unknown object {obj!r}")
        self._state = WorldState(
            agent_room=self.world.start_room,
            carrying=None,
            locations=dict(self.world.object_homes),
            opened=frozenset(),
        )
        self._done = False
        return self._status_text()

    def state_view(self) -> WorldState:
        """Read-only snapshot of the live state (oracle and test surface)."""
        if self._state is None:
            raise ToyWorldError("environment not reset")
        return replace(self._state, locations=dict(self._state.locations))

    def goal_view(self) -> GoalSpec:
        if self._goal is None:
            raise ToyWorldError("environment not reset")
        return self._goal

    def _status_text(self) -> str:
        state = self._state
        assert state is not None
        descs = []
        for recep in self.world.receptacles_in(state.agent_room):
            if not state.accessible(self.world, recep):
                descs.append(f"a {recep.name} (closed)")
                continue
            contents = sorted(o for o, loc in state.locations.items() if loc == recep.name)
            if contents:
                listing = " and ".join(f"a {o}" for o in contents)
                descs.append(f"a {recep.name} containing {listing}")
            else:
                descs.append(f"a {recep.name} (empty)")
        carrying = (f"You are carrying the {state.carrying}." if state.carrying
                    else "Your hands are empty.")
        return f"You are in the {state.agent_room}. You see: {'; '.join(descs)}. {carrying}"

    def step(self, action_text: str) -> tuple[str, bool, bool]:
        """Apply one action; returns (observation, done, success)."""
        if self._state is None or self._goal is None:
            raise ToyWorldError("environment not reset")
        if self._done:
            raise EpisodeFinishedError("episode already finished")
        state = self._state
        action = " ".join(action_text.split())

        if action == "done":
            self._done = True
            return FINISHED, True, goal_satisfied(self.world, self._goal, state)

        if action.startswith("go to "):
            room = action[len("go to "):]
            if room in self.world.rooms:
                self._state = replace(state, agent_room=room)
                return f"You walk to the {room}. {self._status_text()}", False, False
            return NOTHING_HAPPENS, False, False

        if action.startswith("open "):
            name = action[len("open "):]
            recep = self.world.receptacle(name)
            if (recep is not None and recep.room == state.agent_room
                    and recep.closable and name not in state.opened):
                self._state = replace(state, opened=state.opened | {name})
                return f"You open the {name}. {self._status_text()}", False, False
            return NOTHING_HAPPENS, False, False

        if action.startswith("take ") and " from " in action:
            obj, name = action[len("take "):].split(" from ", 1)
            recep = self.world.receptacle(name)
            if (recep is not None and recep.room == state.agent_room
                    and state.carrying is None
                    and state.locations.get(obj) == name
                    and state.accessible(self.world, recep)):
                locations = dict(state.locations)
                del locations[obj]
                self._state = replace(state, carrying=obj, locations=locations)
                return f"You take the {obj} from the {name}. {self._status_text()}", False, False
            return NOTHING_HAPPENS, False, False

        if action.startswith("put ") and " in " in action:
            obj, name = action[len("put "):].split(" in ", 1)
            recep = self.world.receptacle(name)
            if (recep is not None and recep.room == state.agent_room
                    and state.carrying == obj
                    and state.accessible(self.world, recep)):
                locations = dict(state.locations)
                locations[obj] = name
                self._state = replace(state, carrying=None, locations=locations)
                return f"You put the {obj} in the {name}. {self._status_text()}", False, False
            return NOTHING_HAPPENS, False, False

        return NOTHING_HAPPENS, False, False


# -- oracle -------------------------------------------------------------------

def _state_key(state: WorldState, tracked: tuple[str, ...]) -> tuple:
    return (state.agent_room, state.carrying,
            tuple(state.locations.get(o) for o in tracked),
            state.opened)


def _oracle_candidate_actions(world: ToyWorldSpec, goal: GoalSpec,
                              state: WorldState) -> Iterable[tuple[str, WorldState]]:
    """Grammar-valid actions the oracle considers, with their successor states.

    Receptacles irrelevant to the goal are never opened: opening one cannot
    shorten a solution, so pruning them keeps the search space small without
    affecting optimality.
    """
    relevant = {world.object_homes[o] for o in goal.targets}
    if goal.dest_receptacle:
        relevant.add(goal.dest_receptacle)
    for room in world.rooms:
        if room != state.agent_room:
            yield f"go to {room}", replace(state, agent_room=room)
    for recep in world.receptacles_in(state.agent_room):
        if recep.closable and recep.name in relevant and recep.name not in state.opened:
            yield f"open {recep.name}", replace(state, opened=state.opened | {recep.name})
        if state.accessible(world, recep) or recep.name in state.opened:
            for obj in goal.targets:
                if state.locations.get(obj) == recep.name and state.carrying is None:
                    locations = dict(state.locations)
                    del locations[obj]
                    yield (f"take {obj} from {recep.name}",
                           replace(state, carrying=obj, locations=locations))
        if (state.carrying in goal.targets and recep.name == goal.dest_receptacle
                and state.accessible(world, recep)):
            locations = dict(state.locations)
            locations[state.carrying] = recep.name
            yield (f"put {state.carrying} in {recep.name}",
                   replace(state, carrying=None, locations=locations))


def oracle_action_plan(world: ToyWorldSpec, goal: GoalSpec,
                       state: WorldState, budget: int = DEFAULT_STEP_BUDGET) -> list[str]:
    """Shortest action sequence (ending in "done") via breadth-first search."""
    tracked = goal.targets
    start_key = _state_key(state, tracked)
    queue: deque[tuple[WorldState, list[str]]] = deque([(state, [])])
    seen = {start_key}
    while queue:
        current, path = queue.popleft()
        if goal_satisfied(world, goal, current):
            return path + ["done"]
        if len(path) + 1 >= budget:
            continue
        for action, nxt in _oracle_candidate_actions(world, goal, current):
            key = _state_key(nxt, tracked)
            if key not in seen:
                seen.add(key)
                queue.append((nxt, path + [action]))
    raise ToyWorldError(f"no solution within {budget} steps for goal {goal.render()!r}")


def _knowledge_sentence(world: ToyWorldSpec, obj: str) -> str:
    recep_name = world.object_homes[obj]
    recep = world.receptacle(recep_name)
    assert recep is not None
    return f"The {obj} is in the {recep_name} in the {recep.room}."


def oracle_reasoning(world: ToyWorldSpec, goal: GoalSpec, state: WorldState,
                     action: str) -> str:
    """Templated explanation for one oracle action, stated before it executes."""
    if action == "done":
        return "The goal is satisfied. I should declare done."
    if action.startswith("go to "):
        room = action[len("go to "):]
        if state.carrying in goal.targets:
            return (f"I am carrying the {state.carrying}. The {goal.dest_receptacle} "
                    f"is in the {room}. I should go to the {room}.")
        pending = next((o for o in goal.targets
                        if world.receptacle(world.object_homes[o]) is not None
                        and world.receptacle(world.object_homes[o]).room == room
                        and state.locations.get(o) == world.object_homes[o]), None)
        if pending is not None:
            return f"{_knowledge_sentence(world, pending)} I should go to the {room}."
        return f"I should go to the {room}."
    if action.startswith("open "):
        name = action[len("open "):]
        if name == goal.dest_receptacle:
            return f"The {name} is closed. I should open the {name} before putting anything in."
        holder = next((o for o in goal.targets if state.locations.get(o) == name), None)
        if holder is not None:
            return f"{_knowledge_sentence(world, holder)} It is closed, so I should open it."
        return f"The {name} is closed. I should open it."
    if action.startswith("take "):
        obj = action[len("take "):].split(" from ", 1)[0]
        return f"{_knowledge_sentence(world, obj)} I should take the {obj}."
    if action.startswith("put "):
        obj = action[len("put "):].split(" in ", 1)[0]
        return (f"I am carrying the {obj} and the {goal.dest_receptacle} is here. "
                f"I should put the {obj} in the {goal.dest_receptacle}.")
    return f"I should {action}."


def oracle_plan_text(world: ToyWorldSpec, goal: GoalSpec) -> str:
    """High-level plan for a fresh episode, including object whereabouts."""
    sentences = [_knowledge_sentence(world, o) for o in goal.targets]
    steps = []
    for obj in goal.targets:
        home = world.receptacle(world.object_homes[obj])
        assert home is not None
        steps.append(f"go to the {home.room}")
        if home.closable:
            steps.append(f"open the {home.name}")
        if goal.template == "examine":
            steps.append(f"confirm the {obj} is visible")
            continue
        steps.append(f"take the {obj}")
        steps.append(f"go to the {goal.dest_room}")
        dest = world.receptacle(goal.dest_receptacle or "")
        if dest is not None and dest.closable:
            steps.append(f"open the {goal.dest_receptacle}")
        steps.append(f"put the {obj} in the {goal.dest_receptacle}")
    steps.append("declare done")
    return " ".join(sentences) + " Plan: " + ", ".join(steps) + "."


def oracle_solve(task: TaskSpec, world: ToyWorldSpec | None = None,
                 budget: int = DEFAULT_STEP_BUDGET,
                 source_model: str = "oracle") -> Trajectory:
    """Solve a task optimally and package the episode as a trajectory.

    Actions come from breadth-first search; observations come from replaying
    those actions through a fresh environment, so a stored oracle trajectory
    replays verbatim.
    """
    world = world or default_world()
    env = ToyWorldEnv(world)
    observation = env.reset(task)
    goal = env.goal_view()
    actions = oracle_action_plan(world, goal, env.state_view(), budget=budget)
    steps = []
    success = False
    for idx, action in enumerate(actions):
        reasoning = oracle_reasoning(world, goal, env.state_view(), action)
        steps.append(StepRecord(index=idx, observation=observation,
                                reasoning=reasoning, action=action))
        observation, done, success = env.step(action)
        if done:
            break
    if not success:
        raise ToyWorldError(f"oracle failed to solve task {task.task_id!r}")
    return Trajectory(task=task, plan=oracle_plan_text(world, goal),
                      steps=tuple(steps), success=True, source_model=source_model)


# -- task generation -----------------------------------------------------------

@dataclass(frozen=True)
class TaskSet:
    demo: tuple[TaskSpec, ...]
    test: tuple[TaskSpec, ...]
    seed: int


_TEMPLATE_WEIGHTS = (("pick-place", 0.5), ("pick-two", 0.3), ("examine", 0.2))


def _goal_key(goal: GoalSpec) -> tuple:
    return (goal.template, goal.targets, goal.dest_receptacle)


def _sample_goal(world: ToyWorldSpec, rng: np.random.Generator, template: str,
                 primary: str) -> GoalSpec:
    receptacles = [r for r in world.receptacles]
    if template == "examine":
        return GoalSpec("examine", (primary,))
    home = world.object_homes[primary]
    dest_pool = [r for r in receptacles if r.name != home]
    dest = dest_pool[int(rng.integers(len(dest_pool)))]
    if template == "pick-place":
        return GoalSpec("pick-place", (primary,), dest.name, dest.room)
    others = [o for o in sorted(world.object_homes) if o != primary]
    second = others[int(rng.integers(len(others)))]
    if world.object_homes[second] == dest.name:
        dest_pool = [r for r in dest_pool if r.name != world.object_homes[second]]
        dest = dest_pool[int(rng.integers(len(dest_pool)))]
    return GoalSpec("pick-two", (primary, second), dest.name, dest.room)


def generate_task_set(seed: int, n_demo: int, n_test: int,
                      world: ToyWorldSpec | None = None,
                      budget: int = DEFAULT_STEP_BUDGET) -> TaskSet:
    """Deterministically generate disjoint demo/test splits of solvable tasks.

    Demo tasks cycle their primary object through the whole object vocabulary
    (shuffled under the seed) so every object is demonstrated at least once
    when ``n_demo`` is at least the vocabulary size; test tasks draw unseen
    (template, objects, destination) combinations of the same templates.
    """
    if n_demo < 1 or n_test < 1:
        raise ToyWorldError("n_demo and n_test must both be >= 1")
    world = world or default_world()
    rng = np.random.default_rng(seed)
    objects = sorted(world.object_homes)
    primary_cycle = list(objects)
    rng.shuffle(primary_cycle)

    used_keys: set[tuple] = set()
    names = [t for t, _ in _TEMPLATE_WEIGHTS]
    weights = np.array([w for _, w in _TEMPLATE_WEIGHTS])
    weights = weights / weights.sum()

    def draw_tasks(prefix: str, count: int, primaries: list[str] | None) -> list[TaskSpec]:
        tasks = []
        attempts = 0
        while len(tasks) < count:
            attempts += 1
            if attempts > 200 * count:
                raise ToyWorldError(
                    f"cannot generate {count} unique tasks: template space exhausted"
                )
            template = str(rng.choice(names, p=weights))
            if primaries is not None:
                primary = primaries[len(tasks) % len(primaries)]
            else:
                primary = objects[int(rng.integers(len(objects)))]
            goal = _sample_goal(world, rng, template, primary)
            key = _goal_key(goal)
            if key in used_keys:
                continue
            used_keys.add(key)
            task = TaskSpec(task_id=f"{prefix}-{len(tasks):04d}", env_id=ENV_ID,
                            goal=goal.render(), difficulty=goal.difficulty())
            oracle_solve(task, world, budget=budget)  # raises if unsolvable
            tasks.append(task)
        return tasks

    demo = draw_tasks("demo", n_demo, primary_cycle)
    test = draw_tasks("test", n_test, None)
    return TaskSet(demo=tuple(demo), test=tuple(test), seed=seed)
