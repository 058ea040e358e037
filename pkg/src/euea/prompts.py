"""Skill prompt construction and answer parsing.

Each skill has a fixed instruction template with named placeholders; answers
use a small machine-parseable grammar so that parse(render(x)) == x for every
well-formed output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .core import (
    Action,
    ActionChoice,
    ActionKind,
    ActionResult,
    ActionWithBox,
    BoundingBox,
    Box,
    Caption,
    Frame,
    Memory,
    MemoryStep,
    ObjectRef,
    ObjectSet,
    Pose,
    SkillKind,
    SkillOutput,
    Subgoal,
    SubgoalList,
    YesNo,
    memory_window,
)

RECOVERY_NOTE = (
    'Your previous attempt "{failed}" failed. '
    "Sample a different action that still works toward the given goal."
)
FEEDBACK_NOTE = 'Note: the last action "{failed}" failed.'

DEFAULT_FRAME_BUDGET = 8


class MissingContext(ValueError):
    """The memory lacks a field the requested skill's prompt needs."""

    def __init__(self, field_name: str) -> None:
        super().__init__(f"missing context field: {field_name}")
        self.field_name = field_name


class ParseFailure(ValueError):
    """Model text did not match the answer grammar for the skill."""

    def __init__(self, kind: SkillKind, text: str) -> None:
        super().__init__(f"cannot parse {kind.value} answer from {text!r}")
        self.kind = kind
        self.text = text


def load_templates(path: str | None = None) -> dict[SkillKind, str]:
    """Read the template file; sections are introduced by a [KIND] header line."""
    if path is None:
        raw = resources.files("euea.templates").joinpath("skill_prompts.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    sections: dict[SkillKind, str] = {}
    current: SkillKind | None = None
    lines: list[str] = []
    for line in raw.splitlines():
        header = re.fullmatch(r"\[(\w+)\]", line.strip())
        if header:
            if current is not None:
                sections[current] = "\n".join(lines).strip()
            current = SkillKind(header.group(1))
            lines = []
        else:
            lines.append(line)
    if current is not None:
        sections[current] = "\n".join(lines).strip()
    missing = [k.value for k in SkillKind if k not in sections]
    if missing:
        raise ValueError(f"template file lacks sections for: {', '.join(missing)}")
    return sections


_DEFAULT_TEMPLATES: dict[SkillKind, str] | None = None


def default_templates() -> dict[SkillKind, str]:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = load_templates()
    return _DEFAULT_TEMPLATES


# ---------------------------------------------------------------------------
# Context serialization


def describe_pose(pose: Pose) -> str:
    return f"({pose.x}, {pose.y}) facing {pose.heading.value}"


def describe_visible(visible: frozenset[ObjectRef]) -> str:
    names = sorted({ref.name for ref in visible})
    return ", ".join(names) if names else "(nothing)"


def describe_action(action: Action) -> str:
    if action.target is None:
        return action.kind.value
    return f"{action.kind.value} {action.target.name}"


def describe_box(box: BoundingBox | None) -> str:
    if box is None:
        return "none"
    x0, y0, x1, y1 = box.as_tuple()
    return f"[{x0}, {y0}, {x1}, {y1}]"


def describe_step(step: MemoryStep) -> str:
    outcome = "succeeded" if step.result is ActionResult.SUCCEEDED else "failed"
    return (
        f"step {step.step_index}: at {describe_pose(step.pose)}; "
        f"saw {describe_visible(step.visible)}; "
        f"subgoal '{step.subgoal.text}'; "
        f"did {describe_action(step.action)}; {outcome}"
    )


def describe_steps(steps: tuple[MemoryStep, ...]) -> str:
    if not steps:
        return "(no steps yet)"
    return "\n".join(describe_step(s) for s in steps)


def _subsample_frames(frames: list[Frame], budget: int) -> tuple[Frame, ...]:
    if budget <= 0 or len(frames) <= budget:
        return tuple(frames)
    if budget == 1:
        return (frames[-1],)
    picks = sorted({round(i * (len(frames) - 1) / (budget - 1)) for i in range(budget)})
    return tuple(frames[i] for i in picks)


# ---------------------------------------------------------------------------
# Prompt builders (context-level, shared by the dataset path and the runtime)


@dataclass(frozen=True)
class StepContext:
    """Observation for a step that has not been acted on yet."""

    frame: Frame
    visible: frozenset[ObjectRef]
    pose: Pose
    subgoal: Subgoal


def or_prompt(frame: Frame, templates: dict[SkillKind, str] | None = None):
    t = (templates or default_templates())[SkillKind.OR]
    return t, (frame,)


def od_prompt(
    subgoal: Subgoal, action_kind: ActionKind, object_name: str, frame: Frame,
    templates: dict[SkillKind, str] | None = None,
):
    t = (templates or default_templates())[SkillKind.OD]
    text = t.format(subgoal=subgoal.text, action=action_kind.value, object=object_name)
    return text, (frame,)


def sap_prompt(
    ctx: StepContext,
    window: tuple[MemoryStep, ...],
    recovery_of: str | None = None,
    failure_note: str | None = None,
    templates: dict[SkillKind, str] | None = None,
):
    t = (templates or default_templates())[SkillKind.SAP]
    text = t.format(
        subgoal=ctx.subgoal.text,
        pose=describe_pose(ctx.pose),
        visible=describe_visible(ctx.visible),
        memory=describe_steps(window),
    )
    if failure_note is not None:
        text += "\n" + FEEDBACK_NOTE.format(failed=failure_note)
    if recovery_of is not None:
        text += "\n" + RECOVERY_NOTE.format(failed=recovery_of)
    frames = tuple(s.frame for s in window) + (ctx.frame,)
    return text, frames


def asp_prompt(
    action: Action, box: BoundingBox, frame: Frame,
    templates: dict[SkillKind, str] | None = None,
):
    t = (templates or default_templates())[SkillKind.ASP]
    assert action.target is not None
    text = t.format(
        action=action.kind.value, object=action.target.name, bbox=describe_box(box)
    )
    return text, (frame,)


def fsc_prompt(
    action: Action, box: BoundingBox | None, frame: Frame,
    templates: dict[SkillKind, str] | None = None,
):
    t = (templates or default_templates())[SkillKind.FSC]
    target = action.target.name if action.target else "none"
    text = t.format(action=action.kind.value, object=target, bbox=describe_box(box))
    return text, (frame,)


def ag_prompt(frame_before: Frame, frame_after: Frame, templates: dict[SkillKind, str] | None = None):
    t = (templates or default_templates())[SkillKind.AG]
    return t, (frame_before, frame_after)


def stp_prompt(
    goal_text: str, steps: tuple[MemoryStep, ...],
    templates: dict[SkillKind, str] | None = None,
    frame_budget: int = DEFAULT_FRAME_BUDGET,
):
    t = (templates or default_templates())[SkillKind.STP]
    text = t.format(main_goal=goal_text, memory=describe_steps(steps))
    frames = _subsample_frames([s.frame for s in steps], frame_budget)
    return text, frames


def gr_main_prompt(
    goal_text: str, steps: tuple[MemoryStep, ...],
    templates: dict[SkillKind, str] | None = None,
    frame_budget: int = DEFAULT_FRAME_BUDGET,
):
    t = (templates or default_templates())[SkillKind.GR_MAIN]
    text = t.format(main_goal=goal_text, memory=describe_steps(steps))
    frames = _subsample_frames([s.frame for s in steps], frame_budget)
    return text, frames


def gr_sub_prompt(
    subgoal: Subgoal, steps: tuple[MemoryStep, ...],
    templates: dict[SkillKind, str] | None = None,
    frame_budget: int = DEFAULT_FRAME_BUDGET,
):
    t = (templates or default_templates())[SkillKind.GR_SUB]
    text = t.format(subgoal=subgoal.text, memory=describe_steps(steps))
    frames = _subsample_frames([s.frame for s in steps], frame_budget)
    return text, frames


def subgoal_run(memory: Memory, t: int) -> tuple[MemoryStep, ...]:
    """All steps of the contiguous subgoal run that step t belongs to, up to t."""
    anchor = memory.step(t)
    start = t
    while start > 1 and memory.step(start - 1).subgoal == anchor.subgoal:
        start -= 1
    return memory.steps[start - 1 : t]


def build_prompt(
    kind: SkillKind,
    memory: Memory,
    t: int,
    k: int = 4,
    templates: dict[SkillKind, str] | None = None,
    frame_budget: int = DEFAULT_FRAME_BUDGET,
) -> tuple[str, tuple[Frame, ...]]:
    """Prompt text and frame list for a skill query anchored at step t of a memory."""
    step = memory.step(t)
    if kind is SkillKind.OR:
        return or_prompt(step.frame, templates)
    if kind is SkillKind.OD:
        if step.action.target is None:
            raise MissingContext("object")
        return od_prompt(step.subgoal, step.action.kind, step.action.target.name, step.frame, templates)
    if kind is SkillKind.SAP:
        ctx = StepContext(step.frame, step.visible, step.pose, step.subgoal)
        return sap_prompt(ctx, memory_window(memory, t, k), templates=templates)
    if kind is SkillKind.ASP:
        if step.action.target is None:
            raise MissingContext("object")
        if step.bbox is None:
            raise MissingContext("bbox")
        return asp_prompt(step.action, step.bbox, step.frame, templates)
    if kind is SkillKind.FSC:
        return fsc_prompt(step.action, step.bbox, step.frame, templates)
    if kind is SkillKind.AG:
        if t < 2:
            raise MissingContext("previous frame")
        return ag_prompt(memory.step(t - 1).frame, step.frame, templates)
    if kind is SkillKind.STP:
        return stp_prompt(memory.goal.instruction, memory.steps[:t], templates, frame_budget)
    if kind is SkillKind.GR_MAIN:
        return gr_main_prompt(memory.goal.instruction, memory.steps[:t], templates, frame_budget)
    if kind is SkillKind.GR_SUB:
        return gr_sub_prompt(step.subgoal, subgoal_run(memory, t), templates, frame_budget)
    raise ValueError(f"unknown skill kind {kind}")  # pragma: no cover


# ---------------------------------------------------------------------------
# Answer grammar

_KIND_LOOKUP = {k.value.casefold(): k for k in ActionKind}
_BOX_RE = re.compile(r"\[\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\]")
_INT_RE = re.compile(r"-?\d+")
_LIST_PREFIX_RE = re.compile(r"^\s*(?:\d+[.)]\s*|-\s+)")


def render_answer(output: SkillOutput) -> str:
    """Canonical answer text; the oracle emits these and datasets store them."""
    if isinstance(output, ObjectSet):
        return ", ".join(sorted(output.names))
    if isinstance(output, Box):
        return describe_box(output.box)
    if isinstance(output, SubgoalList):
        return "\n".join(f"{i}. {text}" for i, text in enumerate(output.texts, start=1))
    if isinstance(output, ActionChoice):
        if output.object_name is None:
            return output.kind.value
        return f"{output.kind.value} {output.object_name}"
    if isinstance(output, YesNo):
        return "Yes" if output.value else "No"
    if isinstance(output, Caption):
        return output.text
    if isinstance(output, ActionWithBox):
        if output.object_name is None:
            return output.kind.value
        return f"{output.kind.value} {output.object_name} {describe_box(output.box)}"
    raise TypeError(f"not a skill output: {output!r}")


def _parse_box(kind: SkillKind, text: str) -> BoundingBox:
    ints = _INT_RE.findall(text)
    if len(ints) != 4:
        raise ParseFailure(kind, text)
    try:
        return BoundingBox(*(int(v) for v in ints))
    except ValueError as exc:
        raise ParseFailure(kind, text) from exc


def _parse_yes_no(kind: SkillKind, text: str) -> YesNo:
    word = text.strip().strip('."!').casefold()
    if word.startswith("yes"):
        return YesNo(True)
    if word.startswith("no"):
        return YesNo(False)
    raise ParseFailure(kind, text)


def _parse_action_pair(kind: SkillKind, text: str) -> tuple[ActionKind, str | None]:
    body = text.strip()
    if not body:
        raise ParseFailure(kind, text)
    head, _, rest = body.partition(" ")
    action_kind = _KIND_LOOKUP.get(head.strip().casefold())
    if action_kind is None:
        raise ParseFailure(kind, text)
    rest = rest.strip()
    if action_kind.is_navigation:
        if rest:
            raise ParseFailure(kind, text)
        return action_kind, None
    if not rest:
        raise ParseFailure(kind, text)
    return action_kind, rest


def parse_response(kind: SkillKind, text: str) -> SkillOutput:
    """Parse model text into the typed output for the given skill."""
    if kind is SkillKind.OR:
        names = [part.strip() for part in text.split(",")]
        return ObjectSet(frozenset(n for n in names if n))
    if kind is SkillKind.OD:
        return Box(_parse_box(kind, text))
    if kind is SkillKind.STP:
        items = []
        for line in text.splitlines():
            stripped = _LIST_PREFIX_RE.sub("", line, count=1).strip()
            if stripped:
                items.append(stripped)
        if not items:
            raise ParseFailure(kind, text)
        return SubgoalList(tuple(items))
    if kind is SkillKind.SAP:
        action_kind, obj = _parse_action_pair(kind, text)
        return ActionChoice(action_kind, obj)
    if kind in (SkillKind.ASP, SkillKind.GR_MAIN, SkillKind.GR_SUB):
        return _parse_yes_no(kind, text)
    if kind is SkillKind.FSC:
        if not text.strip():
            raise ParseFailure(kind, text)
        return Caption(text.strip())
    if kind is SkillKind.AG:
        body = text.strip()
        match = _BOX_RE.search(body)
        if match is None:
            action_kind, obj = _parse_action_pair(kind, body)
            if obj is not None:
                raise ParseFailure(kind, text)
            return ActionWithBox(action_kind)
        box = _parse_box(kind, match.group(0))
        action_kind, obj = _parse_action_pair(kind, body[: match.start()].strip())
        if obj is None:
            raise ParseFailure(kind, text)
        return ActionWithBox(action_kind, obj, box)
    raise ValueError(f"unknown skill kind {kind}")  # pragma: no cover
