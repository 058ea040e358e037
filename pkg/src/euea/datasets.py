"""Skill-dataset construction: trajectories, emission rules, splits, variance filter."""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .backends import Backend, BackendError, GenerationRequest
from .core import (
    Action,
    ActionChoice,
    ActionKind,
    ActionResult,
    ActionWithBox,
    Box,
    Caption,
    FrameStore,
    Memory,
    MemoryStep,
    ObjectSet,
    SkillInstance,
    SkillKind,
    Split,
    Subgoal,
    SubgoalPhase,
    SubgoalList,
    Task,
    TaskType,
    YesNo,
    canonical_json,
)
from .prompts import build_prompt
from .rewards import DEFAULT_SCALES, RewardBreakdown, RewardScale
from .sim import (
    SceneSpec,
    expert_plan,
    goal_satisfied,
    reset,
    state_diff_caption,
    step,
    visible_objects,
)


class TooFewScenes(ValueError):
    """A scene split needs at least two scenes."""


class EmptyOutput(ValueError):
    """No trajectory supports any requested skill kind."""


class TrajectorySource(Enum):
    EXPERT = "Expert"
    RANDOM_EXPLORATION = "RandomExploration"
    INGESTED = "Ingested"


@dataclass(frozen=True)
class Trajectory:
    """One executed episode plus the labels the builder needs.

    step_captions[i] describes the state change caused by the action at
    step i+1 (the canonical no-change caption when that action failed).
    """

    scene_id: str
    task: Task
    steps: Memory
    source: TrajectorySource
    step_captions: tuple[str, ...]
    goal_achieved: bool
    completed_subgoals: frozenset[int]

    def __post_init__(self) -> None:
        if len(self.step_captions) != len(self.steps):
            raise ValueError("one caption per step is required")

    def to_dict(self, store: FrameStore | None = None) -> dict[str, Any]:
        return {
            "scene_id": self.scene_id,
            "task": self.task.to_dict(),
            "steps": self.steps.to_dict(store),
            "source": self.source.value,
            "step_captions": list(self.step_captions),
            "goal_achieved": self.goal_achieved,
            "completed_subgoals": sorted(self.completed_subgoals),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], store: FrameStore | None = None) -> "Trajectory":
        return cls(
            scene_id=d["scene_id"],
            task=Task.from_dict(d["task"]),
            steps=Memory.from_dict(d["steps"], store),
            source=TrajectorySource(d["source"]),
            step_captions=tuple(d["step_captions"]),
            goal_achieved=bool(d["goal_achieved"]),
            completed_subgoals=frozenset(int(i) for i in d["completed_subgoals"]),
        )


T = TypeVar("T")


def split_scenes(scenes: Sequence[T], holdout_fraction: float, seed: int) -> tuple[list[T], list[T]]:
    """Deterministic (train, eval) partition with |eval| = round(fraction * n)."""
    if len(scenes) < 2:
        raise TooFewScenes(f"cannot split {len(scenes)} scene(s)")
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout fraction must lie strictly between 0 and 1")
    eval_count = round(holdout_fraction * len(scenes))
    indices = list(range(len(scenes)))
    random.Random(seed).shuffle(indices)
    eval_idx = set(indices[:eval_count])
    train = [s for i, s in enumerate(scenes) if i not in eval_idx]
    held = [s for i, s in enumerate(scenes) if i in eval_idx]
    return train, held


# ---------------------------------------------------------------------------
# Trajectory generation


def expert_trajectory(scene: SceneSpec, task: Task, rng_seed: int = 0) -> Trajectory:
    """Replay the expert plan into a fully labeled trajectory."""
    state, frame = reset(scene, task, rng_seed)
    plan = expert_plan(state, task)
    memory = Memory(goal=task)
    captions: list[str] = []
    sg_by_index = {sg.index: sg for sg in plan.subgoals}
    for t, plan_step in enumerate(plan.steps, start=1):
        visible = frozenset(visible_objects(state))
        pre_state, pre_frame, pre_pose = state, frame, state.agent
        state, frame, result = step(state, plan_step.action, plan_step.bbox)
        if result is not ActionResult.SUCCEEDED:  # pragma: no cover - plans are verified
            raise RuntimeError("expert step failed during trajectory generation")
        captions.append(state_diff_caption(pre_state, state))
        memory = memory.append(
            MemoryStep(
                step_index=t,
                frame=pre_frame,
                visible=visible,
                pose=pre_pose,
                action=plan_step.action,
                bbox=plan_step.bbox,
                result=result,
                subgoal=sg_by_index[plan_step.subgoal_index],
            )
        )
    achieved = goal_satisfied(state, task)[0]
    completed = frozenset(s.subgoal.index for s in memory.steps)
    return Trajectory(
        scene_id=scene.scene_id,
        task=task,
        steps=memory,
        source=TrajectorySource.EXPERT,
        step_captions=tuple(captions),
        goal_achieved=achieved,
        completed_subgoals=completed,
    )


def _synthetic_task(scene: SceneSpec) -> Task:
    """A schema-valid placeholder goal for exploration episodes."""
    from .core import GoalCondition

    pickupable = next((p.ref for p in scene.placements if p.flags.pickupable), None)
    if pickupable is None:
        raise ValueError(f"scene {scene.scene_id} has nothing pickupable")
    recep = next(
        (p.ref for p in scene.placements if p.flags.receptacle and not p.flags.openable),
        None,
    ) or next((p.ref for p in scene.placements if p.flags.receptacle), None)
    if recep is not None:
        return Task(
            TaskType.PICK,
            f"put a {pickupable.name} on the {recep.name}",
            (GoalCondition("object_in_receptacle", pickupable, recep),),
        )
    lamp = next(
        (p.ref for p in scene.placements if p.flags.toggleable and not p.flags.receptacle),
        None,
    )
    if lamp is None:
        raise ValueError(f"scene {scene.scene_id} has no receptacle or lamp to anchor a goal")
    return Task(
        TaskType.LOOK,
        f"examine the {pickupable.name} under the {lamp.name}",
        (
            GoalCondition("object_held", pickupable),
            GoalCondition("object_toggled_on", lamp),
        ),
    )


_EXPLORE_SUBGOAL = Subgoal("explore the scene", SubgoalPhase.INTERACTION, 1)


def random_exploration(
    scene: SceneSpec, episodes: int, steps_per_episode: int, seed: int
) -> list[Trajectory]:
    """Uniformly random actions, executed and labeled; failure-rich by design.

    Interaction targets are drawn from the currently visible objects with
    their ground-truth boxes; when nothing is visible the draw falls back to
    a navigation action.
    """
    if episodes < 1 or steps_per_episode < 1:
        raise ValueError("episodes and steps_per_episode must be >= 1")
    rng = random.Random(seed)
    task = _synthetic_task(scene)
    kinds = list(ActionKind)
    nav_kinds = [k for k in kinds if k.is_navigation]
    out: list[Trajectory] = []
    for ep in range(episodes):
        state, frame = reset(scene, task, rng_seed=seed + ep)
        memory = Memory(goal=task)
        captions: list[str] = []
        failures = 0
        for t in range(1, steps_per_episode + 1):
            visible = visible_objects(state)
            kind = rng.choice(kinds)
            if kind.is_interaction:
                refs = sorted(visible)
                if refs:
                    target = rng.choice(refs)
                    action = Action(kind, target)
                    bbox = visible[target]
                else:
                    action = Action(rng.choice(nav_kinds))
                    bbox = None
            else:
                action = Action(kind)
                bbox = None
            pre_state, pre_frame, pre_pose = state, frame, state.agent
            state, frame, result = step(state, action, bbox)
            if result is ActionResult.FAILED:
                failures += 1
            captions.append(state_diff_caption(pre_state, state))
            memory = memory.append(
                MemoryStep(
                    step_index=t,
                    frame=pre_frame,
                    visible=frozenset(visible),
                    pose=pre_pose,
                    action=action,
                    bbox=bbox if action.kind.is_interaction else None,
                    result=result,
                    subgoal=_EXPLORE_SUBGOAL,
                )
            )
        out.append(
            Trajectory(
                scene_id=scene.scene_id,
                task=task,
                steps=memory,
                source=TrajectorySource.RANDOM_EXPLORATION,
                step_captions=tuple(captions),
                goal_achieved=goal_satisfied(state, task)[0],
                completed_subgoals=frozenset(),
            )
        )
    if not any(
        s.result is ActionResult.FAILED for tr in out for s in tr.steps.steps
    ):  # pragma: no cover - vanishingly unlikely on any cluttered scene
        raise RuntimeError("exploration batch contains no failed step; raise the step count")
    return out


# ---------------------------------------------------------------------------
# Emission rules


def _subgoal_runs(memory: Memory) -> list[tuple[Subgoal, int, int]]:
    """Contiguous (subgoal, first_t, last_t) runs in step order."""
    runs: list[tuple[Subgoal, int, int]] = []
    for s in memory.steps:
        if runs and runs[-1][0] == s.subgoal:
            sg, first, _ = runs[-1]
            runs[-1] = (sg, first, s.step_index)
        else:
            runs.append((s.subgoal, s.step_index, s.step_index))
    return runs


def expected_counts(trajectory: Trajectory, kinds: set[SkillKind]) -> dict[SkillKind, int]:
    """Closed-form instance counts the emission rules must produce."""
    memory = trajectory.steps
    total = len(memory)
    interactions = sum(1 for s in memory.steps if s.action.kind.is_interaction)
    runs = _subgoal_runs(memory)
    counts: dict[SkillKind, int] = {}
    if SkillKind.OR in kinds:
        counts[SkillKind.OR] = total
    for kind in (SkillKind.OD, SkillKind.ASP):
        if kind in kinds:
            counts[kind] = interactions
    if SkillKind.SAP in kinds:
        counts[SkillKind.SAP] = (
            0 if trajectory.source is TrajectorySource.RANDOM_EXPLORATION else interactions
        )
    if SkillKind.STP in kinds:
        counts[SkillKind.STP] = 1 if total else 0
    if SkillKind.FSC in kinds:
        counts[SkillKind.FSC] = max(0, total - 1)
    if SkillKind.AG in kinds:
        counts[SkillKind.AG] = sum(
            1 for s in memory.steps[:-1] if s.result is ActionResult.SUCCEEDED
        )
    if SkillKind.GR_MAIN in kinds:
        if not total:
            counts[SkillKind.GR_MAIN] = 0
        elif trajectory.goal_achieved:
            counts[SkillKind.GR_MAIN] = 2 if (
                total >= 2 and trajectory.source is TrajectorySource.EXPERT
            ) else 1
        else:
            counts[SkillKind.GR_MAIN] = 1
    if SkillKind.GR_SUB in kinds:
        n = 0
        for sg, first, last in runs:
            if sg.index in trajectory.completed_subgoals:
                n += 1
                if last > first:
                    n += 1
            else:
                n += 1
        counts[SkillKind.GR_SUB] = n
    return counts


def build_skill_dataset(
    trajectories: Sequence[Trajectory],
    kinds: Iterable[SkillKind],
    split: Split,
    k: int = 4,
    templates=None,
    frame_budget: int = 8,
) -> list[SkillInstance]:
    """Emit skill instances from trajectories under the closed-form rules.

    Per trajectory of length T: OR one per step; OD/SAP/ASP one per
    interaction step; STP one; FSC one per consecutive step pair; AG one per
    successful step pair; GRMain a positive for achieved goals (plus a
    truncated-prefix negative on expert data) or a single negative otherwise;
    GRSub a positive at each completed subgoal boundary plus a mid-run
    negative, or a single negative for unfinished subgoals.

    Random-exploration trajectories emit no SAP instances: a uniformly random
    action is not planning ground truth, and two episodes can pose the exact
    same planning context with different drawn actions.
    """
    if not trajectories:
        raise EmptyOutput("no trajectories given")
    kind_set = set(kinds)
    out: list[SkillInstance] = []

    for ti, tr in enumerate(trajectories):
        memory = tr.steps
        total = len(memory)
        seq = 0

        def emit(kind: SkillKind, ground_truth, anchor_memory: Memory, t: int) -> None:
            nonlocal seq
            prompt, frames = build_prompt(
                kind, anchor_memory, t, k, templates=templates, frame_budget=frame_budget
            )
            seq += 1
            out.append(
                SkillInstance(
                    id=f"{tr.scene_id}:{ti:04d}:{kind.value}:{seq:04d}",
                    kind=kind,
                    prompt_text=prompt,
                    frames=frames,
                    ground_truth=ground_truth,
                    scene_id=tr.scene_id,
                    split=split,
                )
            )

        for s in memory.steps:
            t = s.step_index
            if SkillKind.OR in kind_set:
                emit(SkillKind.OR, ObjectSet(frozenset(r.name for r in s.visible)), memory, t)
            if s.action.kind.is_interaction:
                assert s.action.target is not None and s.bbox is not None
                if SkillKind.OD in kind_set:
                    emit(SkillKind.OD, Box(s.bbox), memory, t)
                if (
                    SkillKind.SAP in kind_set
                    and tr.source is not TrajectorySource.RANDOM_EXPLORATION
                ):
                    emit(
                        SkillKind.SAP,
                        ActionChoice(s.action.kind, s.action.target.name),
                        memory,
                        t,
                    )
                if SkillKind.ASP in kind_set:
                    emit(SkillKind.ASP, YesNo(s.result is ActionResult.SUCCEEDED), memory, t)
            if SkillKind.FSC in kind_set and t <= total - 1:
                emit(SkillKind.FSC, Caption(tr.step_captions[t - 1]), memory, t)
            if (
                SkillKind.AG in kind_set
                and t >= 2
                and memory.step(t - 1).result is ActionResult.SUCCEEDED
            ):
                prev = memory.step(t - 1)
                if prev.action.target is not None:
                    gt = ActionWithBox(prev.action.kind, prev.action.target.name, prev.bbox)
                else:
                    gt = ActionWithBox(prev.action.kind)
                emit(SkillKind.AG, gt, memory, t)

        if SkillKind.STP in kind_set and total:
            texts: list[str] = []
            for s in memory.steps:
                if not texts or texts[-1] != s.subgoal.text:
                    texts.append(s.subgoal.text)
            emit(SkillKind.STP, SubgoalList(tuple(texts)), memory, total)

        if SkillKind.GR_MAIN in kind_set and total:
            if tr.goal_achieved:
                emit(SkillKind.GR_MAIN, YesNo(True), memory, total)
                if total >= 2 and tr.source is TrajectorySource.EXPERT:
                    prefix = memory.prefix(total - 1)
                    emit(SkillKind.GR_MAIN, YesNo(False), prefix, total - 1)
            else:
                emit(SkillKind.GR_MAIN, YesNo(False), memory, total)

        if SkillKind.GR_SUB in kind_set:
            for sg, first, last in _subgoal_runs(memory):
                if sg.index in tr.completed_subgoals:
                    emit(SkillKind.GR_SUB, YesNo(True), memory, last)
                    if last > first:
                        emit(SkillKind.GR_SUB, YesNo(False), memory, last - 1)
                else:
                    emit(SkillKind.GR_SUB, YesNo(False), memory, last)

    if not out:
        raise EmptyOutput(f"no trajectory supports any of {[k.value for k in kind_set]}")
    return out


# ---------------------------------------------------------------------------
# Variance filter


@dataclass(frozen=True)
class GrpoFilterConfig:
    samples_per_instance: int = 8
    tau: float = 0.2
    temperature: float = 0.7
    scales: dict[SkillKind, RewardScale] = field(default_factory=lambda: dict(DEFAULT_SCALES))

    def __post_init__(self) -> None:
        if self.samples_per_instance < 2:
            raise ValueError("need at least two samples per instance")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")


@dataclass(frozen=True)
class SampleStats:
    instance_id: str
    rewards: tuple[float, ...]
    correct_count: int
    normalized_std: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "rewards": list(self.rewards),
            "correct_count": self.correct_count,
            "normalized_std": self.normalized_std,
        }


def normalized_reward_std(rewards: Sequence[float], scale: RewardScale) -> float:
    """Population standard deviation divided by the skill's reward range."""
    if scale.span <= 0:
        raise ValueError("reward scale has no range")
    return statistics.pstdev(rewards) / scale.span


def sample_stats(
    instance_id: str, rewards: Sequence[float], scale: RewardScale
) -> SampleStats:
    correct = sum(1 for r in rewards if abs(r - scale.r_max) <= 1e-12)
    return SampleStats(
        instance_id=instance_id,
        rewards=tuple(rewards),
        correct_count=correct,
        normalized_std=normalized_reward_std(rewards, scale),
    )


def filter_grpo(
    instances: Sequence[SkillInstance],
    backend: Backend,
    reward_fn: Callable[[SkillInstance, str], RewardBreakdown],
    config: GrpoFilterConfig | None = None,
) -> tuple[list[SkillInstance], list[SampleStats]]:
    """Keep instances whose sampled rewards spread beyond the threshold.

    For each instance: draw the configured number of responses, score each
    with the rule-based reward, and select the instance exactly when the
    range-normalized population standard deviation exceeds tau. Input order
    is preserved among the selected.
    """
    config = config or GrpoFilterConfig()
    selected: list[SkillInstance] = []
    stats: list[SampleStats] = []
    for inst in instances:
        request = GenerationRequest(
            inst.prompt_text,
            inst.frames,
            temperature=config.temperature,
            sample_count=config.samples_per_instance,
        )
        try:
            completions = backend.generate(request)
        except BackendError as exc:
            raise type(exc)(f"instance {inst.id}: {exc}") from exc
        rewards = [reward_fn(inst, c.text).r_total for c in completions]
        scale = config.scales.get(inst.kind, RewardScale())
        st = sample_stats(inst.id, rewards, scale)
        stats.append(st)
        if st.normalized_std > config.tau:
            selected.append(inst)
    return selected, stats


# ---------------------------------------------------------------------------
# Persistence


def write_jsonl(records: Iterable[dict], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(canonical_json(record) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    import json

    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_instances(instances: Sequence[SkillInstance], path: Path, store: FrameStore) -> None:
    write_jsonl((inst.to_dict(store) for inst in instances), path)


def read_instances(path: Path, store: FrameStore) -> list[SkillInstance]:
    return [SkillInstance.from_dict(d, store) for d in read_jsonl(path)]


def write_trajectories(trajectories: Sequence[Trajectory], path: Path, store: FrameStore) -> None:
    write_jsonl((tr.to_dict(store) for tr in trajectories), path)


def read_trajectories(path: Path, store: FrameStore) -> list[Trajectory]:
    return [Trajectory.from_dict(d, store) for d in read_jsonl(path)]
