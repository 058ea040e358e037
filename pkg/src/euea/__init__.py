"""Embodied-agent skill harness: simulator, prompts, runtime, datasets, evaluation."""

__version__ = "0.1.0"

from .core import (
    Action,
    ActionKind,
    ActionResult,
    BoundingBox,
    Frame,
    Memory,
    MemoryStep,
    ObjectRef,
    Pose,
    SkillInstance,
    SkillKind,
    Split,
    Subgoal,
    Task,
    TaskType,
    memory_window,
)

__all__ = [
    "Action",
    "ActionKind",
    "ActionResult",
    "BoundingBox",
    "Frame",
    "Memory",
    "MemoryStep",
    "ObjectRef",
    "Pose",
    "SkillInstance",
    "SkillKind",
    "Split",
    "Subgoal",
    "Task",
    "TaskType",
    "memory_window",
    "__version__",
]
