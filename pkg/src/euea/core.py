"""Shared domain vocabulary: memory tuples, actions, objects, tasks, skill records."""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any


class Heading(Enum):
    NORTH = "North"
    EAST = "East"
    SOUTH = "South"
    WEST = "West"

    def right(self) -> "Heading":
        order = [Heading.NORTH, Heading.EAST, Heading.SOUTH, Heading.WEST]
        return order[(order.index(self) + 1) % 4]

    def left(self) -> "Heading":
        order = [Heading.NORTH, Heading.EAST, Heading.SOUTH, Heading.WEST]
        return order[(order.index(self) - 1) % 4]

    def forward_delta(self) -> tuple[int, int]:
        return {
            Heading.NORTH: (0, -1),
            Heading.EAST: (1, 0),
            Heading.SOUTH: (0, 1),
            Heading.WEST: (-1, 0),
        }[self]

    def right_delta(self) -> tuple[int, int]:
        dx, dy = self.forward_delta()
        return (-dy, dx)


class ActionKind(Enum):
    MOVE_AHEAD = "MoveAhead"
    ROTATE_LEFT = "RotateLeft"
    ROTATE_RIGHT = "RotateRight"
    PICKUP_OBJECT = "PickupObject"
    PUT_OBJECT = "PutObject"
    OPEN_OBJECT = "OpenObject"
    CLOSE_OBJECT = "CloseObject"
    TOGGLE_OBJECT_ON = "ToggleObjectOn"
    TOGGLE_OBJECT_OFF = "ToggleObjectOff"
    SLICE_OBJECT = "SliceObject"

    @property
    def is_navigation(self) -> bool:
        return self in NAVIGATION_KINDS

    @property
    def is_interaction(self) -> bool:
        return not self.is_navigation


NAVIGATION_KINDS = frozenset(
    {ActionKind.MOVE_AHEAD, ActionKind.ROTATE_LEFT, ActionKind.ROTATE_RIGHT}
)


class ActionResult(Enum):
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"


class SubgoalPhase(Enum):
    NAVIGATION = "Navigation"
    INTERACTION = "Interaction"


class TaskType(Enum):
    LOOK = "Look"
    PICK = "Pick"
    PICK_TWO = "PickTwo"
    CLEAN = "Clean"
    COOL = "Cool"
    HEAT = "Heat"


class SkillKind(Enum):
    OR = "OR"
    OD = "OD"
    STP = "STP"
    SAP = "SAP"
    ASP = "ASP"
    FSC = "FSC"
    AG = "AG"
    GR_MAIN = "GRMain"
    GR_SUB = "GRSub"


class Split(Enum):
    TRAIN = "Train"
    VALIDATION = "Validation"
    EVAL = "Eval"


@dataclass(frozen=True, order=True)
class BoundingBox:
    """Half-open pixel rectangle [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValueError(f"negative coordinate in box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def to_dict(self) -> dict[str, int]:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BoundingBox":
        return cls(int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]))


@dataclass(frozen=True, order=True)
class ObjectRef:
    """Reference to an object by class name, optionally pinned to one instance."""

    name: str
    instance_id: str | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("object name must be nonempty")

    def key(self) -> str:
        return self.name if self.instance_id is None else f"{self.name}#{self.instance_id}"

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "instance_id": self.instance_id}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ObjectRef":
        return cls(d["name"], d.get("instance_id"))


@dataclass(frozen=True)
class Action:
    """One discrete action. Navigation kinds carry no target, interactions require one."""

    kind: ActionKind
    target: ObjectRef | None = None

    def __post_init__(self) -> None:
        if self.kind.is_navigation and self.target is not None:
            raise ValueError(f"{self.kind.value} takes no target")
        if self.kind.is_interaction and self.target is None:
            raise ValueError(f"{self.kind.value} requires a target")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "target": self.target.to_dict() if self.target else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Action":
        target = ObjectRef.from_dict(d["target"]) if d.get("target") else None
        return cls(ActionKind(d["kind"]), target)


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: Heading

    def to_dict(self) -> dict[str, Any]:
        return {"x": self.x, "y": self.y, "heading": self.heading.value}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Pose":
        return cls(int(d["x"]), int(d["y"]), Heading(d["heading"]))


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Frame:
    """RGB raster, row-major bytes, with a content digest of the pixel data."""

    width: int
    height: int
    pixels: bytes
    hash: str

    def __post_init__(self) -> None:
        if len(self.pixels) != 3 * self.width * self.height:
            raise ValueError(
                f"pixel buffer is {len(self.pixels)} bytes, "
                f"expected {3 * self.width * self.height}"
            )

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: bytes) -> "Frame":
        return cls(width, height, pixels, _digest(pixels))

    def to_dict(self, store: "FrameStore | None" = None) -> dict[str, Any]:
        base: dict[str, Any] = {"width": self.width, "height": self.height, "hash": self.hash}
        if store is not None:
            base["path"] = store.save(self)
        else:
            base["inline"] = base64.b64encode(self.pixels).decode("ascii")
        return base

    @classmethod
    def from_dict(cls, d: dict[str, Any], store: "FrameStore | None" = None) -> "Frame":
        if "inline" in d:
            pixels = base64.b64decode(d["inline"])
            frame = cls.from_pixels(int(d["width"]), int(d["height"]), pixels)
        elif "path" in d:
            if store is None:
                raise ValueError("frame references a path but no frame store was given")
            frame = store.load(d["path"])
        else:
            raise ValueError("frame record has neither inline pixels nor a path")
        if frame.hash != d["hash"]:
            raise ValueError("frame content does not match its recorded hash")
        return frame

    def save_png(self, path: Path) -> None:
        from PIL import Image

        img = Image.frombytes("RGB", (self.width, self.height), self.pixels)
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")

    @classmethod
    def load_png(cls, path: Path) -> "Frame":
        from PIL import Image

        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return cls.from_pixels(rgb.width, rgb.height, rgb.tobytes())


class FrameStore:
    """Content-addressed PNG directory; frames are filed under their digest."""

    def __init__(self, root: Path, subdir: str = "frames") -> None:
        self.root = Path(root)
        self.subdir = subdir

    def save(self, frame: Frame) -> str:
        rel = f"{self.subdir}/{frame.hash}.png"
        path = self.root / rel
        if not path.exists():
            frame.save_png(path)
        return rel

    def load(self, rel: str) -> Frame:
        return Frame.load_png(self.root / rel)


@dataclass(frozen=True)
class Subgoal:
    text: str
    phase: SubgoalPhase
    index: int

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("subgoal indices start at 1")

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "phase": self.phase.value, "index": self.index}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Subgoal":
        return cls(d["text"], SubgoalPhase(d["phase"]), int(d["index"]))


@dataclass(frozen=True)
class GoalCondition:
    """One goal predicate over the world state.

    Supported predicates: object_in_receptacle (needs receptacle), object_held,
    object_hot, object_cold, object_clean, object_sliced, object_toggled_on.
    """

    predicate: str
    subject: ObjectRef
    receptacle: ObjectRef | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "predicate": self.predicate,
            "subject": self.subject.to_dict(),
            "receptacle": self.receptacle.to_dict() if self.receptacle else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GoalCondition":
        recep = ObjectRef.from_dict(d["receptacle"]) if d.get("receptacle") else None
        return cls(d["predicate"], ObjectRef.from_dict(d["subject"]), recep)


@dataclass(frozen=True)
class Task:
    task_type: TaskType
    instruction: str
    goal_conditions: tuple[GoalCondition, ...]

    def __post_init__(self) -> None:
        if not self.goal_conditions:
            raise ValueError("a task needs at least one goal condition")

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_type": self.task_type.value,
            "instruction": self.instruction,
            "goal_conditions": [c.to_dict() for c in self.goal_conditions],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Task":
        return cls(
            TaskType(d["task_type"]),
            d["instruction"],
            tuple(GoalCondition.from_dict(c) for c in d["goal_conditions"]),
        )


@dataclass(frozen=True)
class MemoryStep:
    """One remembered step: observation, what was done, and how it went."""

    step_index: int
    frame: Frame
    visible: frozenset[ObjectRef]
    pose: Pose
    action: Action
    bbox: BoundingBox | None
    result: ActionResult
    subgoal: Subgoal

    def __post_init__(self) -> None:
        if self.step_index < 1:
            raise ValueError("step indices start at 1")
        if self.action.kind.is_interaction and self.bbox is None:
            raise ValueError("interaction steps must record the submitted box")
        if self.action.kind.is_navigation and self.bbox is not None:
            raise ValueError("navigation steps have no box")

    def to_dict(self, store: FrameStore | None = None) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "frame": self.frame.to_dict(store),
            "visible": [o.to_dict() for o in sorted(self.visible)],
            "pose": self.pose.to_dict(),
            "action": self.action.to_dict(),
            "bbox": self.bbox.to_dict() if self.bbox else None,
            "result": self.result.value,
            "subgoal": self.subgoal.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], store: FrameStore | None = None) -> "MemoryStep":
        return cls(
            step_index=int(d["step_index"]),
            frame=Frame.from_dict(d["frame"], store),
            visible=frozenset(ObjectRef.from_dict(o) for o in d["visible"]),
            pose=Pose.from_dict(d["pose"]),
            action=Action.from_dict(d["action"]),
            bbox=BoundingBox.from_dict(d["bbox"]) if d.get("bbox") else None,
            result=ActionResult(d["result"]),
            subgoal=Subgoal.from_dict(d["subgoal"]),
        )


@dataclass(frozen=True)
class Memory:
    """Ordered step history for one episode, indices contiguous from 1."""

    goal: Task
    steps: tuple[MemoryStep, ...] = ()

    def __post_init__(self) -> None:
        for i, step in enumerate(self.steps, start=1):
            if step.step_index != i:
                raise ValueError(
                    f"step at position {i} carries index {step.step_index}"
                )

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, t: int) -> MemoryStep:
        if not 1 <= t <= len(self.steps):
            raise IndexError(f"no step {t} in a memory of {len(self.steps)} steps")
        return self.steps[t - 1]

    def append(self, step: MemoryStep) -> "Memory":
        return Memory(goal=self.goal, steps=self.steps + (step,))

    def prefix(self, length: int) -> "Memory":
        return Memory(goal=self.goal, steps=self.steps[:length])

    def to_dict(self, store: FrameStore | None = None) -> dict[str, Any]:
        return {
            "goal": self.goal.to_dict(),
            "steps": [s.to_dict(store) for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], store: FrameStore | None = None) -> "Memory":
        return cls(
            goal=Task.from_dict(d["goal"]),
            steps=tuple(MemoryStep.from_dict(s, store) for s in d["steps"]),
        )


def memory_window(memory: Memory, t: int, k: int) -> tuple[MemoryStep, ...]:
    """Steps with indices in [max(1, t-k), t-1], oldest first; empty at t=1."""
    if t < 1 or t > len(memory) + 1:
        raise ValueError(f"t={t} outside 1..{len(memory) + 1}")
    if k < 0:
        raise ValueError("window size must be nonnegative")
    lo = max(1, t - k)
    return tuple(memory.steps[lo - 1 : t - 1])


# ---------------------------------------------------------------------------
# Skill outputs


@dataclass(frozen=True)
class ObjectSet:
    """OR answer: the set of visible object class names."""

    names: frozenset[str]

    def to_dict(self) -> dict[str, Any]:
        return {"type": "object_set", "names": sorted(self.names)}


@dataclass(frozen=True)
class Box:
    """OD answer: one bounding box."""

    box: BoundingBox

    def to_dict(self) -> dict[str, Any]:
        return {"type": "box", "box": self.box.to_dict()}


@dataclass(frozen=True)
class SubgoalList:
    """STP answer: ordered subgoal texts."""

    texts: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"type": "subgoal_list", "texts": list(self.texts)}


@dataclass(frozen=True)
class ActionChoice:
    """SAP answer: an action kind plus the object it acts on (none for navigation)."""

    kind: ActionKind
    object_name: str | None = None

    def __post_init__(self) -> None:
        if self.kind.is_interaction and not self.object_name:
            raise ValueError(f"{self.kind.value} requires an object name")
        if self.kind.is_navigation and self.object_name:
            raise ValueError(f"{self.kind.value} takes no object")

    def to_dict(self) -> dict[str, Any]:
        return {"type": "action_choice", "kind": self.kind.value, "object_name": self.object_name}


@dataclass(frozen=True)
class YesNo:
    """ASP / goal-recognition answer."""

    value: bool

    def to_dict(self) -> dict[str, Any]:
        return {"type": "yes_no", "value": self.value}


@dataclass(frozen=True)
class Caption:
    """FSC answer: free text describing the outcome of an action."""

    text: str

    def to_dict(self) -> dict[str, Any]:
        return {"type": "caption", "text": self.text}


@dataclass(frozen=True)
class ActionWithBox:
    """AG answer: the action executed between two frames, with its target box."""

    kind: ActionKind
    object_name: str | None = None
    box: BoundingBox | None = None

    def __post_init__(self) -> None:
        if self.kind.is_interaction and not (self.object_name and self.box):
            raise ValueError(f"{self.kind.value} requires an object name and a box")
        if self.kind.is_navigation and (self.object_name or self.box):
            raise ValueError(f"{self.kind.value} takes no object or box")

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "action_with_box",
            "kind": self.kind.value,
            "object_name": self.object_name,
            "box": self.box.to_dict() if self.box else None,
        }


SkillOutput = ObjectSet | Box | SubgoalList | ActionChoice | YesNo | Caption | ActionWithBox

_OUTPUT_VARIANTS: dict[SkillKind, type] = {
    SkillKind.OR: ObjectSet,
    SkillKind.OD: Box,
    SkillKind.STP: SubgoalList,
    SkillKind.SAP: ActionChoice,
    SkillKind.ASP: YesNo,
    SkillKind.FSC: Caption,
    SkillKind.AG: ActionWithBox,
    SkillKind.GR_MAIN: YesNo,
    SkillKind.GR_SUB: YesNo,
}


def output_variant(kind: SkillKind) -> type:
    return _OUTPUT_VARIANTS[kind]


def skill_output_from_dict(d: dict[str, Any]) -> SkillOutput:
    t = d["type"]
    if t == "object_set":
        return ObjectSet(frozenset(d["names"]))
    if t == "box":
        return Box(BoundingBox.from_dict(d["box"]))
    if t == "subgoal_list":
        return SubgoalList(tuple(d["texts"]))
    if t == "action_choice":
        return ActionChoice(ActionKind(d["kind"]), d.get("object_name"))
    if t == "yes_no":
        return YesNo(bool(d["value"]))
    if t == "caption":
        return Caption(d["text"])
    if t == "action_with_box":
        box = BoundingBox.from_dict(d["box"]) if d.get("box") else None
        return ActionWithBox(ActionKind(d["kind"]), d.get("object_name"), box)
    raise ValueError(f"unknown skill output type {t!r}")


_FRAME_ARITY_EXACT = {
    SkillKind.OR: 1,
    SkillKind.OD: 1,
    SkillKind.ASP: 1,
    SkillKind.FSC: 1,
    SkillKind.AG: 2,
}


@dataclass(frozen=True)
class SkillInstance:
    """One serialized skill query with its ground-truth answer."""

    id: str
    kind: SkillKind
    prompt_text: str
    frames: tuple[Frame, ...]
    ground_truth: SkillOutput
    scene_id: str
    split: Split

    def __post_init__(self) -> None:
        expected = _FRAME_ARITY_EXACT.get(self.kind)
        if expected is not None and len(self.frames) != expected:
            raise ValueError(
                f"{self.kind.value} instances carry {expected} frame(s), got {len(self.frames)}"
            )
        if expected is None and not self.frames:
            raise ValueError(f"{self.kind.value} instances need at least one frame")
        if not isinstance(self.ground_truth, output_variant(self.kind)):
            raise ValueError(
                f"{self.kind.value} ground truth must be {output_variant(self.kind).__name__}"
            )

    def to_dict(self, store: FrameStore | None = None) -> dict[str, Any]:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "prompt_text": self.prompt_text,
            "frames": [f.to_dict(store) for f in self.frames],
            "ground_truth": self.ground_truth.to_dict(),
            "scene_id": self.scene_id,
            "split": self.split.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], store: FrameStore | None = None) -> "SkillInstance":
        return cls(
            id=d["id"],
            kind=SkillKind(d["kind"]),
            prompt_text=d["prompt_text"],
            frames=tuple(Frame.from_dict(f, store) for f in d["frames"]),
            ground_truth=skill_output_from_dict(d["ground_truth"]),
            scene_id=d["scene_id"],
            split=Split(d["split"]),
        )


def exact_fraction(numerator: int, denominator: int) -> Fraction:
    """Exact ratio helper so goal-condition rates never pick up float error."""
    if denominator == 0:
        return Fraction(0)
    return Fraction(numerator, denominator)


def canonical_json(obj: Any) -> str:
    """Stable JSON rendering used for all persisted records."""
    import json

    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
