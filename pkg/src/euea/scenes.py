"""Random scene and task generation with achievability guarantees."""

from __future__ import annotations

import random
from dataclasses import dataclass

from .core import GoalCondition, Heading, ObjectRef, Pose, Task, TaskType
from .sim import (
    CLASS_FLAGS,
    Placement,
    SceneSpec,
    Unreachable,
    expert_plan,
    reset,
)

PICKUP_CLASSES = sorted(n for n, f in CLASS_FLAGS.items() if f.pickupable)
PLAIN_RECEPTACLE_CLASSES = ["Table", "CounterTop", "Shelf", "SideTable"]
LAMP_CLASSES = ["FloorLamp", "DeskLamp"]
DISTRACTOR_CLASSES = sorted(set(PICKUP_CLASSES) | {"GarbageCan", "Cabinet", "DeskLamp"})

DEFAULT_GRID = 7
_MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class SuiteItem:
    scene: SceneSpec
    task: Task

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "task": self.task.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteItem":
        return cls(SceneSpec.from_dict(d["scene"]), Task.from_dict(d["task"]))


def _required_classes(task_type: TaskType, rng: random.Random) -> tuple[str, str, list[str]]:
    """(target class, landing class, fixture classes) for one task type."""
    target = rng.choice(PICKUP_CLASSES)
    recep = rng.choice(PLAIN_RECEPTACLE_CLASSES)
    if task_type is TaskType.LOOK:
        return target, rng.choice(LAMP_CLASSES), []
    if task_type is TaskType.CLEAN:
        return target, recep, ["Sink", "Faucet"]
    if task_type is TaskType.COOL:
        return target, recep, ["Fridge"]
    if task_type is TaskType.HEAT:
        return target, recep, ["Microwave"]
    return target, recep, []


def _build_task(task_type: TaskType, target: str, landing: str) -> Task:
    t_ref = ObjectRef(target)
    l_ref = ObjectRef(landing)
    if task_type is TaskType.LOOK:
        return Task(
            task_type,
            f"examine the {target} under the {landing}",
            (
                GoalCondition("object_held", ObjectRef(target, "1")),
                GoalCondition("object_toggled_on", l_ref),
            ),
        )
    if task_type is TaskType.PICK:
        return Task(
            task_type,
            f"put a {target} on the {landing}",
            (GoalCondition("object_in_receptacle", ObjectRef(target, "1"), l_ref),),
        )
    if task_type is TaskType.PICK_TWO:
        return Task(
            task_type,
            f"put two {target}s on the {landing}",
            (
                GoalCondition("object_in_receptacle", ObjectRef(target, "1"), l_ref),
                GoalCondition("object_in_receptacle", ObjectRef(target, "2"), l_ref),
            ),
        )
    state_word, predicate = {
        TaskType.CLEAN: ("clean", "object_clean"),
        TaskType.COOL: ("cold", "object_cold"),
        TaskType.HEAT: ("hot", "object_hot"),
    }[task_type]
    return Task(
        task_type,
        f"put a {state_word} {target} on the {landing}",
        (
            GoalCondition(predicate, ObjectRef(target, "1")),
            GoalCondition("object_in_receptacle", ObjectRef(target, "1"), l_ref),
        ),
    )


def _try_generate(
    scene_id: str, task_type: TaskType, rng: random.Random, grid: int, distractors: int
) -> SuiteItem | None:
    target, landing, fixtures = _required_classes(task_type, rng)
    cells = [(x, y) for x in range(grid) for y in range(grid)]
    rng.shuffle(cells)
    free = iter(cells)

    placements: list[Placement] = []

    def place(name: str, instance_id: str | None, at: tuple[int, int] | None = None) -> None:
        x, y = at if at is not None else next(free)
        placements.append(Placement(ObjectRef(name, instance_id), x, y, CLASS_FLAGS[name]))

    place(target, "1")
    if task_type is TaskType.PICK_TWO:
        place(target, "2")
    place(landing, "1")
    if "Sink" in fixtures:
        # the faucet must share a viewing pose with the sink, so keep them adjacent
        sx, sy = next(free)
        place("Sink", "1", at=(sx, sy))
        neighbors = [(sx + 1, sy), (sx - 1, sy), (sx, sy + 1), (sx, sy - 1)]
        open_neighbors = [
            c for c in neighbors if 0 <= c[0] < grid and 0 <= c[1] < grid
            and c not in {(p.x, p.y) for p in placements}
        ]
        if not open_neighbors:
            return None
        place("Faucet", "1", at=open_neighbors[0])
    for fixture in fixtures:
        if fixture in ("Sink", "Faucet"):
            continue
        place(fixture, "1")

    used_names = {p.ref.name for p in placements}
    pool = [n for n in DISTRACTOR_CLASSES if n not in used_names]
    rng.shuffle(pool)
    for name in pool[:distractors]:
        place(name, "1")

    taken = {(p.x, p.y) for p in placements}
    start_cell = next((c for c in cells if c not in taken), None)
    if start_cell is None:
        return None
    start = Pose(start_cell[0], start_cell[1], rng.choice(list(Heading)))

    try:
        scene = SceneSpec(scene_id, grid, grid, tuple(placements), start)
    except ValueError:
        return None
    task = _build_task(task_type, target, landing)
    try:
        state, _ = reset(scene, task)
        plan = expert_plan(state, task)
    except (Unreachable, KeyError):
        return None
    if not plan.steps:
        return None  # degenerate: already satisfied at reset
    return SuiteItem(scene, task)


def generate_scene(
    scene_id: str,
    task_type: TaskType,
    seed: int,
    grid: int = DEFAULT_GRID,
    distractors: int = 3,
) -> SuiteItem:
    """Deterministic scene/task pair for which an expert plan provably exists."""
    rng = random.Random(seed)
    for _ in range(_MAX_ATTEMPTS):
        item = _try_generate(scene_id, task_type, rng, grid, distractors)
        if item is not None:
            return item
    raise Unreachable(f"could not generate an achievable {task_type.value} scene (seed={seed})")


def generate_suite(
    count_per_type: int,
    seed: int,
    grid: int = DEFAULT_GRID,
    types: tuple[TaskType, ...] = tuple(TaskType),
) -> list[SuiteItem]:
    """A task suite with `count_per_type` achievable episodes per task type."""
    items: list[SuiteItem] = []
    for task_type in types:
        for i in range(count_per_type):
            scene_id = f"scene_{task_type.value.lower()}_{i:03d}"
            items.append(generate_scene(scene_id, task_type, seed=seed * 10_000 + hash_of(scene_id)))
    return items


def hash_of(text: str) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big")
