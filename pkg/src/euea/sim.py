"""Deterministic discrete household simulator: ground truth, rendering, expert plans."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any

import numpy as np

from .core import (
    Action,
    ActionKind,
    ActionResult,
    BoundingBox,
    Frame,
    GoalCondition,
    ObjectRef,
    Pose,
    Subgoal,
    SubgoalPhase,
    Task,
    TaskType,
)
from .rewards import iou

RASTER_SIZE = 64
CONE_DEPTH = 3
CLICK_IOU_THRESHOLD = 0.5

_BACKGROUND = (12, 12, 12)
_BOX_SIZE = {1: 32, 2: 21, 3: 16}
_BOX_CENTER_X = {-1: 11, 0: 32, 1: 53}
_BOX_CENTER_Y = {1: 40, 2: 30, 3: 24}
_HAND_STRIP_TOP = 60

CHILLER_CLASSES = frozenset({"Fridge"})
HEATER_CLASSES = frozenset({"Microwave"})
CLEANING_BASIN_CLASSES = frozenset({"Sink"})
WATER_SOURCE_CLASSES = frozenset({"Faucet"})
KNIFE_CLASSES = frozenset({"Knife"})


class UnknownObject(ValueError):
    """A task or request references an object the scene does not contain."""


class Unreachable(RuntimeError):
    """No expert plan exists: a path or prerequisite object is missing."""


@dataclass(frozen=True)
class ClassFlags:
    pickupable: bool = False
    receptacle: bool = False
    openable: bool = False
    toggleable: bool = False
    sliceable: bool = False

    def to_dict(self) -> dict[str, bool]:
        return {
            "pickupable": self.pickupable,
            "receptacle": self.receptacle,
            "openable": self.openable,
            "toggleable": self.toggleable,
            "sliceable": self.sliceable,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ClassFlags":
        return cls(**{k: bool(v) for k, v in d.items()})


CLASS_FLAGS: dict[str, ClassFlags] = {
    # pickupables
    "Apple": ClassFlags(pickupable=True, sliceable=True),
    "Tomato": ClassFlags(pickupable=True, sliceable=True),
    "Bread": ClassFlags(pickupable=True, sliceable=True),
    "Potato": ClassFlags(pickupable=True, sliceable=True),
    "Mug": ClassFlags(pickupable=True),
    "Cup": ClassFlags(pickupable=True),
    "Plate": ClassFlags(pickupable=True),
    "Egg": ClassFlags(pickupable=True),
    "Book": ClassFlags(pickupable=True),
    "CellPhone": ClassFlags(pickupable=True),
    "CreditCard": ClassFlags(pickupable=True),
    "Knife": ClassFlags(pickupable=True),
    # plain receptacles
    "Table": ClassFlags(receptacle=True),
    "CounterTop": ClassFlags(receptacle=True),
    "Shelf": ClassFlags(receptacle=True),
    "SideTable": ClassFlags(receptacle=True),
    "GarbageCan": ClassFlags(receptacle=True),
    "Sink": ClassFlags(receptacle=True),
    # openable receptacles
    "Fridge": ClassFlags(receptacle=True, openable=True),
    "Cabinet": ClassFlags(receptacle=True, openable=True),
    "Microwave": ClassFlags(receptacle=True, openable=True, toggleable=True),
    # fixtures
    "Faucet": ClassFlags(toggleable=True),
    "FloorLamp": ClassFlags(toggleable=True),
    "DeskLamp": ClassFlags(toggleable=True),
}


@dataclass(frozen=True)
class Location:
    """Where an object is: on a grid cell, inside a receptacle, or in the hand."""

    kind: str  # "cell" | "receptacle" | "hand"
    x: int = 0
    y: int = 0
    container: str = ""

    @classmethod
    def at_cell(cls, x: int, y: int) -> "Location":
        return cls("cell", x=x, y=y)

    @classmethod
    def inside(cls, container_key: str) -> "Location":
        return cls("receptacle", container=container_key)

    @classmethod
    def in_hand(cls) -> "Location":
        return cls("hand")

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "cell":
            return {"kind": "cell", "x": self.x, "y": self.y}
        if self.kind == "receptacle":
            return {"kind": "receptacle", "container": self.container}
        return {"kind": "hand"}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Location":
        if d["kind"] == "cell":
            return cls.at_cell(int(d["x"]), int(d["y"]))
        if d["kind"] == "receptacle":
            return cls.inside(d["container"])
        return cls.in_hand()


@dataclass(frozen=True)
class ObjectState:
    ref: ObjectRef
    location: Location
    flags: ClassFlags
    is_open: bool = False
    is_on: bool = False
    is_clean: bool = False
    is_hot: bool = False
    is_cold: bool = False
    is_sliced: bool = False

    def __post_init__(self) -> None:
        if self.is_open and not self.flags.openable:
            raise ValueError(f"{self.ref.key()} cannot be open")
        if self.is_on and not self.flags.toggleable:
            raise ValueError(f"{self.ref.key()} cannot be on")

    @property
    def key(self) -> str:
        return self.ref.key()

    def bool_flags(self) -> tuple[bool, ...]:
        return (self.is_open, self.is_on, self.is_clean, self.is_hot, self.is_cold, self.is_sliced)


@dataclass(frozen=True)
class WorldState:
    width: int
    height: int
    objects: dict[str, ObjectState]
    agent: Pose
    hand: str | None
    rng_seed: int

    def object(self, key: str) -> ObjectState:
        return self.objects[key]

    def with_objects(self, updates: dict[str, ObjectState]) -> "WorldState":
        merged = dict(self.objects)
        merged.update(updates)
        return replace(self, objects=merged)

    def cell_blocked(self, x: int, y: int) -> bool:
        return any(
            o.location.kind == "cell" and (o.location.x, o.location.y) == (x, y)
            for o in self.objects.values()
        )

    def signature(self) -> tuple:
        """Hashable full-state fingerprint; equal signatures mean equal states."""
        objs = tuple(
            (k, tuple(sorted(o.location.to_dict().items())), o.bool_flags())
            for k, o in sorted(self.objects.items())
        )
        return (self.agent.x, self.agent.y, self.agent.heading.value, self.hand, objs)


@dataclass(frozen=True)
class Placement:
    ref: ObjectRef
    x: int
    y: int
    flags: ClassFlags

    def to_dict(self) -> dict[str, Any]:
        return {"ref": self.ref.to_dict(), "x": self.x, "y": self.y, "flags": self.flags.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Placement":
        return cls(ObjectRef.from_dict(d["ref"]), int(d["x"]), int(d["y"]), ClassFlags.from_dict(d["flags"]))


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    width: int
    height: int
    placements: tuple[Placement, ...]
    agent_start: Pose

    def __post_init__(self) -> None:
        seen: set[tuple[int, int]] = set()
        keys: set[str] = set()
        for p in self.placements:
            if not (0 <= p.x < self.width and 0 <= p.y < self.height):
                raise ValueError(f"{p.ref.key()} placed out of bounds at ({p.x}, {p.y})")
            if (p.x, p.y) in seen:
                raise ValueError(f"two placements share cell ({p.x}, {p.y})")
            seen.add((p.x, p.y))
            if p.ref.key() in keys:
                raise ValueError(f"duplicate object key {p.ref.key()}")
            keys.add(p.ref.key())
        if (self.agent_start.x, self.agent_start.y) in seen:
            raise ValueError("agent starts on an occupied cell")
        if not (0 <= self.agent_start.x < self.width and 0 <= self.agent_start.y < self.height):
            raise ValueError("agent starts out of bounds")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "width": self.width,
            "height": self.height,
            "placements": [p.to_dict() for p in self.placements],
            "agent_start": self.agent_start.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        return cls(
            scene_id=d["scene_id"],
            width=int(d["width"]),
            height=int(d["height"]),
            placements=tuple(Placement.from_dict(p) for p in d["placements"]),
            agent_start=Pose.from_dict(d["agent_start"]),
        )


# ---------------------------------------------------------------------------
# Visibility and rendering


def _cone_cells(pose: Pose, width: int, height: int) -> list[tuple[int, int, int, int]]:
    """(depth, lateral, x, y) for every in-bounds cell the agent can see."""
    fx, fy = pose.heading.forward_delta()
    rx, ry = pose.heading.right_delta()
    cells = []
    for depth in range(1, CONE_DEPTH + 1):
        for lateral in (-1, 0, 1):
            x = pose.x + depth * fx + lateral * rx
            y = pose.y + depth * fy + lateral * ry
            if 0 <= x < width and 0 <= y < height:
                cells.append((depth, lateral, x, y))
    return cells


def _top_level_box(depth: int, lateral: int) -> BoundingBox:
    size = _BOX_SIZE[depth]
    cx = _BOX_CENTER_X[lateral]
    cy = _BOX_CENTER_Y[depth]
    x0, x1 = cx - size // 2, cx - size // 2 + size
    y0, y1 = cy - size // 2, cy - size // 2 + size
    return BoundingBox(max(0, x0), max(0, y0), min(RASTER_SIZE, x1), min(RASTER_SIZE, y1))


def _contained_box(parent: BoundingBox, index: int) -> BoundingBox:
    pw, ph = parent.x_max - parent.x_min, parent.y_max - parent.y_min
    cw, ch = max(2, pw // 2), max(2, ph // 2)
    slot = index % 4
    x0 = parent.x_min + (slot % 2) * (pw - cw)
    y0 = parent.y_min + (slot // 2) * (ph - ch)
    return BoundingBox(x0, y0, x0 + cw, y0 + ch)


def _object_color(obj: ObjectState) -> tuple[int, int, int]:
    base = hashlib.sha256(obj.ref.name.encode("utf-8")).digest()
    r, g, b = 60 + base[0] % 160, 60 + base[1] % 160, 60 + base[2] % 160
    if obj.is_open:
        r ^= 0x20
    if obj.is_on:
        g ^= 0x40
    if obj.is_clean:
        b ^= 0x10
    if obj.is_hot:
        r ^= 0x08
    if obj.is_cold:
        b ^= 0x40
    if obj.is_sliced:
        g ^= 0x08
    return (r, g, b)


@dataclass(frozen=True)
class DrawItem:
    key: str
    ref: ObjectRef
    box: BoundingBox
    color: tuple[int, int, int]


def _draw_list(state: WorldState) -> list[DrawItem]:
    """Visible objects with their boxes, ordered back to front.

    Top-level objects sit on cone cells; contents of a non-closed receptacle
    are drawn inside it. Contents of closed receptacles stay hidden.
    """
    items: list[DrawItem] = []
    cells = _cone_cells(state.agent, state.width, state.height)
    # back to front, stable left-to-right within a depth
    for depth, lateral, x, y in sorted(cells, key=lambda c: (-c[0], c[1])):
        holders = sorted(
            (
                o for o in state.objects.values()
                if o.location.kind == "cell" and (o.location.x, o.location.y) == (x, y)
            ),
            key=lambda o: o.key,
        )
        for holder in holders:
            box = _top_level_box(depth, lateral)
            items.append(DrawItem(holder.key, holder.ref, box, _object_color(holder)))
            occluded = holder.flags.openable and not holder.is_open
            if holder.flags.receptacle and not occluded:
                contents = sorted(
                    (o for o in state.objects.values()
                     if o.location.kind == "receptacle" and o.location.container == holder.key),
                    key=lambda o: o.key,
                )
                for i, child in enumerate(contents):
                    items.append(
                        DrawItem(child.key, child.ref, _contained_box(box, i), _object_color(child))
                    )
    return items


def visible_objects(state: WorldState) -> dict[ObjectRef, BoundingBox]:
    """Objects in the visibility cone with the exact boxes the renderer draws."""
    return {item.ref: item.box for item in _draw_list(state)}


def _state_digest_pixels(state: WorldState, items: list[DrawItem]) -> bytes:
    """12 bytes summarizing pose, hand, and the visible draw list.

    Painted into the frame so that any state change a successful action makes
    is guaranteed to alter at least one pixel, even when rectangles overlap.
    """
    parts = [f"{state.agent.x},{state.agent.y},{state.agent.heading.value}", state.hand or "-"]
    for it in items:
        parts.append(f"{it.key}:{it.box.as_tuple()}:{it.color}")
    return hashlib.sha256("|".join(parts).encode("utf-8")).digest()[:12]


def render(state: WorldState) -> Frame:
    """Egocentric 64x64 raster; deterministic function of the world state."""
    canvas = np.full((RASTER_SIZE, RASTER_SIZE, 3), _BACKGROUND, dtype=np.uint8)
    items = _draw_list(state)
    for it in items:
        canvas[it.box.y_min : it.box.y_max, it.box.x_min : it.box.x_max] = it.color
    if state.hand is not None:
        canvas[_HAND_STRIP_TOP:, :] = _object_color(state.objects[state.hand])
    digest = _state_digest_pixels(state, items)
    canvas[0, 0:4] = np.frombuffer(digest, dtype=np.uint8).reshape(4, 3)
    return Frame.from_pixels(RASTER_SIZE, RASTER_SIZE, canvas.tobytes())


# ---------------------------------------------------------------------------
# Reset and transitions


def _check_goal_references(scene: SceneSpec, task: Task) -> None:
    names = {p.ref.name for p in scene.placements}
    keys = {p.ref.key() for p in scene.placements}
    for cond in task.goal_conditions:
        for ref in filter(None, (cond.subject, cond.receptacle)):
            if ref.instance_id is not None:
                if ref.key() not in keys:
                    raise UnknownObject(f"goal condition references missing {ref.key()}")
            elif ref.name not in names:
                raise UnknownObject(f"goal condition references missing {ref.name}")


def reset(scene: SceneSpec, task: Task, rng_seed: int = 0) -> tuple[WorldState, Frame]:
    """Initial world state and first rendered frame for a scene/task pair."""
    _check_goal_references(scene, task)
    objects = {
        p.ref.key(): ObjectState(ref=p.ref, location=Location.at_cell(p.x, p.y), flags=p.flags)
        for p in scene.placements
    }
    state = WorldState(
        width=scene.width,
        height=scene.height,
        objects=objects,
        agent=scene.agent_start,
        hand=None,
        rng_seed=rng_seed,
    )
    return state, render(state)


def _resolve_click(
    state: WorldState, target: ObjectRef, bbox: BoundingBox | None
) -> ObjectState | None:
    """Find the visible instance of the named target best matching the click box."""
    if bbox is None:
        return None
    candidates = []
    for ref, box in visible_objects(state).items():
        if ref.name != target.name:
            continue
        if target.instance_id is not None and ref.instance_id != target.instance_id:
            continue
        candidates.append((iou(bbox, box), ref))
    if not candidates:
        return None
    best_iou, best_ref = max(candidates, key=lambda c: (c[0], c[1].key()))
    if best_iou < CLICK_IOU_THRESHOLD:
        return None
    return state.objects[best_ref.key()]


def _attempt(state: WorldState, action: Action, bbox: BoundingBox | None) -> WorldState | None:
    """Apply the action if its preconditions hold; None means the attempt fails."""
    kind = action.kind
    if kind is ActionKind.MOVE_AHEAD:
        dx, dy = state.agent.heading.forward_delta()
        nx, ny = state.agent.x + dx, state.agent.y + dy
        if not (0 <= nx < state.width and 0 <= ny < state.height) or state.cell_blocked(nx, ny):
            return None
        return replace(state, agent=replace(state.agent, x=nx, y=ny))
    if kind is ActionKind.ROTATE_LEFT:
        return replace(state, agent=replace(state.agent, heading=state.agent.heading.left()))
    if kind is ActionKind.ROTATE_RIGHT:
        return replace(state, agent=replace(state.agent, heading=state.agent.heading.right()))

    assert action.target is not None
    obj = _resolve_click(state, action.target, bbox)
    if obj is None:
        return None

    if kind is ActionKind.PICKUP_OBJECT:
        if not obj.flags.pickupable or state.hand is not None:
            return None
        moved = replace(obj, location=Location.in_hand())
        return replace(state.with_objects({obj.key: moved}), hand=obj.key)

    if kind is ActionKind.PUT_OBJECT:
        if state.hand is None or not obj.flags.receptacle:
            return None
        if obj.flags.openable and not obj.is_open:
            return None
        held = state.objects[state.hand]
        placed = replace(held, location=Location.inside(obj.key))
        if obj.ref.name in CHILLER_CLASSES:
            placed = replace(placed, is_cold=True)
        return replace(state.with_objects({held.key: placed}), hand=None)

    if kind is ActionKind.OPEN_OBJECT:
        if not obj.flags.openable or obj.is_open or obj.is_on:
            return None
        return state.with_objects({obj.key: replace(obj, is_open=True)})

    if kind is ActionKind.CLOSE_OBJECT:
        if not obj.flags.openable or not obj.is_open:
            return None
        return state.with_objects({obj.key: replace(obj, is_open=False)})

    if kind is ActionKind.TOGGLE_OBJECT_ON:
        if not obj.flags.toggleable or obj.is_on:
            return None
        if obj.flags.openable and obj.is_open:
            return None  # appliances run closed
        updates = {obj.key: replace(obj, is_on=True)}
        if obj.ref.name in HEATER_CLASSES:
            for o in state.objects.values():
                if o.location.kind == "receptacle" and o.location.container == obj.key:
                    updates[o.key] = replace(o, is_hot=True)
        if obj.ref.name in WATER_SOURCE_CLASSES:
            basins = {
                o.key for o in state.objects.values() if o.ref.name in CLEANING_BASIN_CLASSES
            }
            for o in state.objects.values():
                if o.location.kind == "receptacle" and o.location.container in basins:
                    updates[o.key] = replace(o, is_clean=True)
        return state.with_objects(updates)

    if kind is ActionKind.TOGGLE_OBJECT_OFF:
        if not obj.flags.toggleable or not obj.is_on:
            return None
        return state.with_objects({obj.key: replace(obj, is_on=False)})

    if kind is ActionKind.SLICE_OBJECT:
        if not obj.flags.sliceable or obj.is_sliced:
            return None
        if state.hand is None or state.objects[state.hand].ref.name not in KNIFE_CLASSES:
            return None
        return state.with_objects({obj.key: replace(obj, is_sliced=True)})

    return None  # pragma: no cover


def step(
    state: WorldState, action: Action, bbox: BoundingBox | None = None
) -> tuple[WorldState, Frame, ActionResult]:
    """Execute one action.

    A failed attempt leaves the state untouched and re-renders the identical
    frame, so failure is exactly "the image did not change". Interaction
    actions additionally require the submitted box to hit the target's
    ground-truth box with IoU >= 0.5.
    """
    new_state = _attempt(state, action, bbox)
    if new_state is None:
        return state, render(state), ActionResult.FAILED
    return new_state, render(new_state), ActionResult.SUCCEEDED


# ---------------------------------------------------------------------------
# Goal checking


def _matching_objects(state: WorldState, ref: ObjectRef) -> list[ObjectState]:
    return [
        o
        for o in state.objects.values()
        if o.ref.name == ref.name
        and (ref.instance_id is None or o.ref.instance_id == ref.instance_id)
    ]


def _condition_holds(state: WorldState, cond: GoalCondition) -> bool:
    subjects = _matching_objects(state, cond.subject)
    if not subjects:
        return False
    if cond.predicate == "object_in_receptacle":
        assert cond.receptacle is not None
        recep_keys = {o.key for o in _matching_objects(state, cond.receptacle)}
        return any(
            s.location.kind == "receptacle" and s.location.container in recep_keys
            for s in subjects
        )
    if cond.predicate == "object_held":
        return any(state.hand == s.key for s in subjects)
    flag_of = {
        "object_hot": "is_hot",
        "object_cold": "is_cold",
        "object_clean": "is_clean",
        "object_sliced": "is_sliced",
        "object_toggled_on": "is_on",
    }
    if cond.predicate in flag_of:
        return any(getattr(s, flag_of[cond.predicate]) for s in subjects)
    raise ValueError(f"unknown goal predicate {cond.predicate!r}")


def goal_satisfied(state: WorldState, task: Task) -> tuple[bool, Fraction]:
    """Whether every goal condition holds, plus the exact satisfied fraction."""
    total = len(task.goal_conditions)
    hit = sum(1 for c in task.goal_conditions if _condition_holds(state, c))
    return hit == total, Fraction(hit, total)


# ---------------------------------------------------------------------------
# State-diff captions

NO_CHANGE_CAPTION = "Nothing changes."


def _surface_word(flags: ClassFlags) -> str:
    return "inside" if flags.openable else "on"


def state_diff_caption(before: WorldState, after: WorldState) -> str:
    """Template caption enumerating every predicate that changed between states."""
    clauses: list[str] = []
    if (before.agent.x, before.agent.y) != (after.agent.x, after.agent.y):
        clauses.append(f"the agent moved to ({after.agent.x}, {after.agent.y})")
    if before.agent.heading != after.agent.heading:
        clauses.append(f"the agent turned to face {after.agent.heading.value}")
    for key in sorted(before.objects):
        b, a = before.objects[key], after.objects[key]
        name = b.ref.name
        if b.location != a.location:
            if a.location.kind == "hand":
                clauses.append(f"the {name} is now held by the agent")
            elif a.location.kind == "receptacle":
                container = after.objects[a.location.container]
                clauses.append(
                    f"the {name} is now {_surface_word(container.flags)} the {container.ref.name}"
                )
            if b.location.kind == "receptacle":
                container = before.objects[b.location.container]
                clauses.append(f"the {container.ref.name} no longer contains the {name}")
        if not b.is_open and a.is_open:
            clauses.append(f"the {name} is now open")
        if b.is_open and not a.is_open:
            clauses.append(f"the {name} is now closed")
        if not b.is_on and a.is_on:
            clauses.append(f"the {name} is now turned on")
        if b.is_on and not a.is_on:
            clauses.append(f"the {name} is now turned off")
        if not b.is_clean and a.is_clean:
            clauses.append(f"the {name} is now clean")
        if not b.is_hot and a.is_hot:
            clauses.append(f"the {name} is now hot")
        if not b.is_cold and a.is_cold:
            clauses.append(f"the {name} is now cold")
        if not b.is_sliced and a.is_sliced:
            clauses.append(f"the {name} is now sliced")
    if not clauses:
        return NO_CHANGE_CAPTION
    text = "; ".join(clauses)
    return text[0].upper() + text[1:] + "."


# ---------------------------------------------------------------------------
# Expert planning


@dataclass(frozen=True)
class PlanStep:
    action: Action
    bbox: BoundingBox | None
    subgoal_index: int


@dataclass(frozen=True)
class ExpertPlan:
    subgoals: tuple[Subgoal, ...]
    steps: tuple[PlanStep, ...]

    @property
    def actions(self) -> list[tuple[Action, BoundingBox | None]]:
        return [(s.action, s.bbox) for s in self.steps]

    def steps_for(self, subgoal_index: int) -> list[PlanStep]:
        return [s for s in self.steps if s.subgoal_index == subgoal_index]


def _sees_all(state: WorldState, pose: Pose, keys: set[str]) -> bool:
    probe = replace(state, agent=pose)
    seen = {ref.key() for ref in visible_objects(probe)}
    return keys <= seen


def _plan_navigation(state: WorldState, required_keys: set[str]) -> list[Action] | None:
    """Shortest MoveAhead/Rotate sequence to any pose seeing all required objects."""
    start = state.agent
    if _sees_all(state, start, required_keys):
        return []
    seen_states = {(start.x, start.y, start.heading)}
    queue: deque[tuple[Pose, list[Action]]] = deque([(start, [])])
    while queue:
        pose, path = queue.popleft()
        moves: list[tuple[Action, Pose]] = []
        dx, dy = pose.heading.forward_delta()
        nx, ny = pose.x + dx, pose.y + dy
        if 0 <= nx < state.width and 0 <= ny < state.height and not state.cell_blocked(nx, ny):
            moves.append((Action(ActionKind.MOVE_AHEAD), replace(pose, x=nx, y=ny)))
        moves.append((Action(ActionKind.ROTATE_LEFT), replace(pose, heading=pose.heading.left())))
        moves.append((Action(ActionKind.ROTATE_RIGHT), replace(pose, heading=pose.heading.right())))
        for action, nxt in moves:
            sig = (nxt.x, nxt.y, nxt.heading)
            if sig in seen_states:
                continue
            seen_states.add(sig)
            new_path = path + [action]
            if _sees_all(state, nxt, required_keys):
                return new_path
            queue.append((nxt, new_path))
    return None


@dataclass(frozen=True)
class _Segment:
    nav_keys: tuple[str, ...]
    nav_text: str
    block: tuple[tuple[ActionKind, str], ...]  # (action kind, target key)
    block_text: str


def _display(key: str, state: WorldState) -> str:
    return state.objects[key].ref.name


def _single_key(state: WorldState, ref: ObjectRef, what: str) -> str:
    matches = _matching_objects(state, ref)
    if not matches:
        raise Unreachable(f"scene has no {ref.key()} for {what}")
    return sorted(m.key for m in matches)[0]


def _task_segments(state: WorldState, task: Task) -> list[_Segment]:
    conds = {c.predicate: c for c in task.goal_conditions}
    t = task.task_type

    def key_of(ref: ObjectRef) -> str:
        return _single_key(state, ref, task.instruction)

    def fixture_key(name: str) -> str:
        return _single_key(state, ObjectRef(name=name), task.instruction)

    if t is TaskType.PICK:
        c = conds["object_in_receptacle"]
        target, recep = key_of(c.subject), key_of(c.receptacle)
        return _fetch_and_place(state, target, recep)

    if t is TaskType.PICK_TWO:
        placements = [c for c in task.goal_conditions if c.predicate == "object_in_receptacle"]
        segments: list[_Segment] = []
        for i, c in enumerate(placements):
            target, recep = key_of(c.subject), key_of(c.receptacle)
            qualifier = "the " if i == 0 else "another "
            segments.extend(_fetch_and_place(state, target, recep, qualifier=qualifier))
        return segments

    if t is TaskType.LOOK:
        held = conds["object_held"]
        lamp = key_of(conds["object_toggled_on"].subject)
        target = key_of(held.subject)
        name, lamp_name = _display(target, state), _display(lamp, state)
        return [
            _Segment((target,), f"go to the {name}",
                     ((ActionKind.PICKUP_OBJECT, target),), f"pick up the {name}"),
            _Segment((lamp,), f"go to the {lamp_name}",
                     ((ActionKind.TOGGLE_OBJECT_ON, lamp),), f"turn on the {lamp_name}"),
        ]

    c = conds["object_in_receptacle"]
    target, recep = key_of(c.subject), key_of(c.receptacle)
    name = _display(target, state)

    if t is TaskType.CLEAN:
        sink, faucet = fixture_key("Sink"), fixture_key("Faucet")
        middle = _Segment(
            (sink, faucet), "go to the Sink",
            (
                (ActionKind.PUT_OBJECT, sink),
                (ActionKind.TOGGLE_OBJECT_ON, faucet),
                (ActionKind.TOGGLE_OBJECT_OFF, faucet),
                (ActionKind.PICKUP_OBJECT, target),
            ),
            f"clean the {name} in the Sink",
        )
    elif t is TaskType.COOL:
        fridge = fixture_key("Fridge")
        middle = _Segment(
            (fridge,), "go to the Fridge",
            (
                (ActionKind.OPEN_OBJECT, fridge),
                (ActionKind.PUT_OBJECT, fridge),
                (ActionKind.PICKUP_OBJECT, target),
                (ActionKind.CLOSE_OBJECT, fridge),
            ),
            f"cool the {name} in the Fridge",
        )
    elif t is TaskType.HEAT:
        micro = fixture_key("Microwave")
        middle = _Segment(
            (micro,), "go to the Microwave",
            (
                (ActionKind.OPEN_OBJECT, micro),
                (ActionKind.PUT_OBJECT, micro),
                (ActionKind.CLOSE_OBJECT, micro),
                (ActionKind.TOGGLE_OBJECT_ON, micro),
                (ActionKind.TOGGLE_OBJECT_OFF, micro),
                (ActionKind.OPEN_OBJECT, micro),
                (ActionKind.PICKUP_OBJECT, target),
                (ActionKind.CLOSE_OBJECT, micro),
            ),
            f"heat the {name} in the Microwave",
        )
    else:
        raise Unreachable(f"no plan recipe for task type {t}")

    fetch = _Segment(
        (target,), f"go to the {name}",
        ((ActionKind.PICKUP_OBJECT, target),), f"pick up the {name}",
    )
    recep_name = _display(recep, state)
    place = _Segment(
        (recep,), f"go to the {recep_name}",
        ((ActionKind.PUT_OBJECT, recep),), f"put the {name} on the {recep_name}",
    )
    return [fetch, middle, place]


def _fetch_and_place(
    state: WorldState, target: str, recep: str, qualifier: str = "the "
) -> list[_Segment]:
    name, recep_name = _display(target, state), _display(recep, state)
    return [
        _Segment((target,), f"go to {qualifier}{name}",
                 ((ActionKind.PICKUP_OBJECT, target),), f"pick up {qualifier}{name}"),
        _Segment((recep,), f"go to the {recep_name}",
                 ((ActionKind.PUT_OBJECT, recep),), f"put {qualifier}{name} on the {recep_name}"),
    ]


def expert_plan(state: WorldState, task: Task) -> ExpertPlan:
    """Ground-truth subgoal and action sequence that completes the task.

    Navigation legs are shortest paths to a pose that sees every object the
    following interaction block touches; the plan is verified by simulating
    it, so replaying the returned steps always ends with the goal satisfied.
    """
    if goal_satisfied(state, task)[0]:
        return ExpertPlan((), ())
    segments = _task_segments(state, task)
    subgoals: list[Subgoal] = []
    steps: list[PlanStep] = []
    sim_state = state
    for seg in segments:
        nav_actions = _plan_navigation(sim_state, set(seg.nav_keys))
        if nav_actions is None:
            raise Unreachable(f"no path to a pose seeing {seg.nav_keys}")
        nav_sg = Subgoal(seg.nav_text, SubgoalPhase.NAVIGATION, len(subgoals) + 1)
        subgoals.append(nav_sg)
        for action in nav_actions:
            sim_state, _, result = step(sim_state, action, None)
            if result is not ActionResult.FAILED:
                steps.append(PlanStep(action, None, nav_sg.index))
            else:  # pragma: no cover - BFS only proposes legal moves
                raise Unreachable("expert navigation action failed")
        int_sg = Subgoal(seg.block_text, SubgoalPhase.INTERACTION, len(subgoals) + 1)
        subgoals.append(int_sg)
        for kind, target_key in seg.block:
            target_ref = sim_state.objects[target_key].ref
            boxes = visible_objects(sim_state)
            if target_ref not in boxes:
                raise Unreachable(f"{target_key} not visible for {int_sg.text}")
            box = boxes[target_ref]
            action = Action(kind, target_ref)
            sim_state, _, result = step(sim_state, action, box)
            if result is ActionResult.FAILED:
                raise Unreachable(f"expert action {kind.value} on {target_key} failed")
            steps.append(PlanStep(action, box, int_sg.index))
    if not goal_satisfied(sim_state, task)[0]:  # pragma: no cover - recipes are closed-form
        raise Unreachable("expert plan did not satisfy the goal")
    return ExpertPlan(tuple(subgoals), tuple(steps))
