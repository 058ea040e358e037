"""Episode runtime: expert-guided navigation, skill-driven interaction, recovery."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any

from .backends import Backend, EpisodeView, GenerationRequest, Unsupported
from .core import (
    Action,
    ActionChoice,
    ActionResult,
    BoundingBox,
    Box,
    Frame,
    FrameStore,
    Memory,
    MemoryStep,
    ObjectRef,
    ObjectSet,
    SkillKind,
    Subgoal,
    SubgoalPhase,
    Task,
    YesNo,
    memory_window,
)
from .prompts import (
    ParseFailure,
    StepContext,
    describe_action,
    gr_sub_prompt,
    od_prompt,
    or_prompt,
    parse_response,
    sap_prompt,
)
from .sim import SceneSpec, expert_plan, goal_satisfied, reset, step


class DimensionMismatch(ValueError):
    """Frames being compared have different dimensions."""


class RecoveryExhausted(RuntimeError):
    """No recovery sample, across both routes, could be parsed and scored."""


@dataclass(frozen=True)
class AgentConfig:
    memory_window: int = 4
    recovery_samples: int = 10
    recovery_enabled: bool = True
    env_feedback: bool = False
    max_steps: int = 80
    parse_retry_limit: int = 3
    recovery_temperature: float = 0.7
    length_normalized_scores: bool = False
    frame_budget: int = 8

    def __post_init__(self) -> None:
        if self.memory_window < 0:
            raise ValueError("memory window must be >= 0")
        if self.recovery_samples < 1:
            raise ValueError("recovery sample count must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max steps must be >= 1")


@dataclass(frozen=True)
class RecoveryCandidate:
    index: int
    choice: ActionChoice | Box
    score: float

    def __post_init__(self) -> None:
        if not (self.score == self.score and abs(self.score) != float("inf")):
            raise ValueError("candidate scores must be finite")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    goal_condition_rate: Fraction
    steps_taken: int
    failures: int
    recoveries_attempted: int
    recoveries_succeeded: int
    transcript: Memory

    def __post_init__(self) -> None:
        if not (self.recoveries_succeeded <= self.recoveries_attempted <= self.failures):
            raise ValueError("recovery counters are inconsistent")

    def to_summary(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "goal_condition_rate": float(self.goal_condition_rate),
            "steps_taken": self.steps_taken,
            "failures": self.failures,
            "recoveries_attempted": self.recoveries_attempted,
            "recoveries_succeeded": self.recoveries_succeeded,
            "task_type": self.transcript.goal.task_type.value,
            "instruction": self.transcript.goal.instruction,
        }

    def write_transcript(self, path, store: FrameStore | None = None) -> None:
        from .core import canonical_json
        from pathlib import Path

        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", encoding="utf-8") as fh:
            for s in self.transcript.steps:
                fh.write(canonical_json(s.to_dict(store)) + "\n")


def detect_failure(frame_before: Frame, frame_after: Frame) -> bool:
    """An action failed exactly when the image did not change."""
    if (frame_before.width, frame_before.height) != (frame_after.width, frame_after.height):
        raise DimensionMismatch(
            f"{frame_before.width}x{frame_before.height} vs "
            f"{frame_after.width}x{frame_after.height}"
        )
    return frame_before.hash == frame_after.hash


def _normalized(score: float, target_text: str, config: AgentConfig) -> float:
    if not config.length_normalized_scores:
        return score
    from .backends import tokenize

    return score / max(1, len(tokenize(target_text)))


class _SkillCaller:
    """Prompt/parse plumbing with bounded re-sampling on parse failures."""

    def __init__(self, backend: Backend, config: AgentConfig, templates) -> None:
        self.backend = backend
        self.config = config
        self.templates = templates

    def ask(self, kind: SkillKind, prompt: str, frames, temperature: float = 0.0):
        last_exc: Exception | None = None
        for _ in range(max(1, self.config.parse_retry_limit)):
            request = GenerationRequest(
                prompt, tuple(frames), temperature=temperature, sample_count=1
            )
            completion = self.backend.generate(request)[0]
            try:
                return parse_response(kind, completion.text)
            except ParseFailure as exc:
                last_exc = exc
        raise last_exc  # type: ignore[misc]


def recover(
    failed: tuple[Action, ObjectRef | None, BoundingBox | None],
    memory: Memory,
    ctx: StepContext,
    backend: Backend,
    config: AgentConfig,
    templates=None,
) -> tuple[tuple[ActionChoice, BoundingBox], list[RecoveryCandidate]]:
    """Sample alternatives for a failed interaction and pick the most confident.

    Draws n action-plan samples with a prompt that names the failed pair and
    asks for a different action; each sample is scored by the negative log
    likelihood of its rendered answer. If every sample repeats the failed pair,
    the box is treated as the culprit instead: n detection samples are drawn
    and scored the same way. The minimum-score candidate wins, ties broken by
    the lowest sampling index. A winning action pair gets its box from one
    extra detection call.
    """
    failed_action, _, _ = failed
    failed_choice = ActionChoice(
        failed_action.kind,
        failed_action.target.name if failed_action.target else None,
    )
    failed_text = describe_action(failed_action)
    n = config.recovery_samples

    sap_text, sap_frames = sap_prompt(
        ctx,
        memory_window(memory, len(memory) + 1, config.memory_window),
        recovery_of=failed_text,
        templates=templates,
    )
    pair_candidates = _sample_candidates(
        backend, SkillKind.SAP, sap_text, sap_frames, n, config
    )

    parsed_pairs = [c for c in pair_candidates if isinstance(c.choice, ActionChoice)]
    all_repeat = bool(parsed_pairs) and all(
        c.choice == failed_choice for c in parsed_pairs
    )

    if parsed_pairs and not all_repeat:
        winner = min(parsed_pairs, key=lambda c: (c.score, c.index))
        choice = winner.choice
        assert isinstance(choice, ActionChoice)
        box = _one_detection(backend, ctx, choice, config, templates)
        return (choice, box), pair_candidates

    # every sampled pair repeats the failed action: re-detect the box instead
    od_text, od_frames = od_prompt(
        ctx.subgoal,
        failed_choice.kind,
        failed_choice.object_name or "",
        ctx.frame,
        templates=templates,
    )
    box_candidates = _sample_candidates(
        backend, SkillKind.OD, od_text, od_frames, n, config
    )
    parsed_boxes = [c for c in box_candidates if isinstance(c.choice, Box)]
    if not parsed_boxes:
        raise RecoveryExhausted(
            f"no scoreable candidate among {2 * n} recovery samples for {failed_text!r}"
        )
    winner = min(parsed_boxes, key=lambda c: (c.score, c.index))
    assert isinstance(winner.choice, Box)
    return (failed_choice, winner.choice.box), pair_candidates + box_candidates


def _sample_candidates(
    backend: Backend, kind: SkillKind, prompt: str, frames, n: int, config: AgentConfig
) -> list[RecoveryCandidate]:
    from .prompts import render_answer

    request = GenerationRequest(
        prompt, tuple(frames), temperature=config.recovery_temperature, sample_count=n
    )
    completions = backend.generate(request)
    candidates: list[RecoveryCandidate] = []
    for index, completion in enumerate(completions, start=1):
        text = completion.text
        parsed = None
        for _ in range(max(1, config.parse_retry_limit)):
            try:
                parsed = parse_response(kind, text)
                break
            except ParseFailure:
                retry = backend.generate(
                    GenerationRequest(
                        prompt, tuple(frames), temperature=config.recovery_temperature,
                        sample_count=1,
                    )
                )
                text = retry[0].text
        if parsed is None:
            continue
        answer_text = render_answer(parsed)
        try:
            raw_score = backend.score(prompt, tuple(frames), answer_text)
        except Unsupported:
            continue  # a candidate the backend cannot score cannot be ranked
        candidates.append(
            RecoveryCandidate(index, parsed, _normalized(raw_score, answer_text, config))
        )
    return candidates


def _one_detection(
    backend: Backend, ctx: StepContext, choice: ActionChoice, config: AgentConfig, templates
) -> BoundingBox:
    od_text, od_frames = od_prompt(
        ctx.subgoal, choice.kind, choice.object_name or "", ctx.frame, templates=templates
    )
    caller = _SkillCaller(backend, config, templates)
    parsed = caller.ask(SkillKind.OD, od_text, od_frames)
    assert isinstance(parsed, Box)
    return parsed.box


def run_episode(
    scene: SceneSpec,
    task: Task,
    backend: Backend,
    config: AgentConfig | None = None,
    templates=None,
    rng_seed: int = 0,
) -> EpisodeResult:
    """Drive one instruction-following episode.

    Navigation subgoals replay expert actions while the backend's object
    recognition fills the visible set for memory. Interaction subgoals loop
    action planning, detection, and execution; after every successful
    interaction the backend's subgoal recognition decides whether to advance.
    Failures trigger the recovery step when enabled, or append a textual
    failure notice to the next planning prompt when env feedback is on.
    Running out of steps is recorded as a failure, not raised.
    """
    config = config or AgentConfig()
    state, frame = reset(scene, task, rng_seed)
    plan = expert_plan(state, task)
    memory = Memory(goal=task)
    view = EpisodeView(state=state, task=task, plan=plan, memory=memory)
    begin = getattr(backend, "begin_episode", None)
    if begin is not None:
        begin(view)
    caller = _SkillCaller(backend, config, templates)

    failures = 0
    recoveries_attempted = 0
    recoveries_succeeded = 0
    t = 1
    budget_hit = False

    def observe() -> frozenset[ObjectRef]:
        text, frames = or_prompt(frame, templates)
        try:
            parsed = caller.ask(SkillKind.OR, text, frames)
        except ParseFailure:
            return frozenset()
        assert isinstance(parsed, ObjectSet)
        return frozenset(ObjectRef(name) for name in parsed.names)

    def execute(
        action: Action, bbox: BoundingBox | None, visible: frozenset[ObjectRef], sg: Subgoal
    ) -> ActionResult:
        nonlocal state, frame, memory, t, failures
        pre_frame, pre_pose = frame, state.agent
        state, frame, result = step(state, action, bbox)
        if detect_failure(pre_frame, frame) != (result is ActionResult.FAILED):
            raise AssertionError("frame-change rule disagrees with the step result")
        memory = memory.append(
            MemoryStep(
                step_index=t,
                frame=pre_frame,
                visible=visible,
                pose=pre_pose,
                action=action,
                bbox=bbox if action.kind.is_interaction else None,
                result=result,
                subgoal=sg,
            )
        )
        t += 1
        view.state, view.memory = state, memory
        if result is ActionResult.FAILED:
            failures += 1
        return result

    def expert_matches(action: Action) -> bool:
        remaining = view.remaining_block()
        if not remaining:
            return False
        nxt = remaining[0].action
        return nxt.kind == action.kind and (
            (nxt.target is None) == (action.target is None)
            and (nxt.target is None or nxt.target.name == action.target.name)
        )

    for sg_pos, sg in enumerate(plan.subgoals):
        if budget_hit:
            break
        view.subgoal_pos = sg_pos
        view.block_progress = 0

        if sg.phase is SubgoalPhase.NAVIGATION:
            # one attempt per expert action; expert navigation cannot fail in-sim
            for plan_step in plan.steps_for(sg.index):
                if t > config.max_steps:
                    budget_hit = True
                    break
                visible = observe()
                matched = expert_matches(plan_step.action)
                result = execute(plan_step.action, None, visible, sg)
                if result is ActionResult.SUCCEEDED and matched:
                    view.block_progress += 1
            continue

        # interaction phase
        failure_note: str | None = None
        forced: tuple[ActionChoice, BoundingBox] | None = None
        while not budget_hit:
            if t > config.max_steps:
                budget_hit = True
                break
            visible = observe()
            ctx = StepContext(frame, visible, state.agent, sg)

            try:
                if forced is not None:
                    choice, box = forced
                    forced = None
                else:
                    window = memory_window(memory, t, config.memory_window)
                    sap_text, sap_frames = sap_prompt(
                        ctx, window, failure_note=failure_note, templates=templates
                    )
                    choice = caller.ask(SkillKind.SAP, sap_text, sap_frames)
                    assert isinstance(choice, ActionChoice)
                    if choice.kind.is_interaction:
                        box = _one_detection(backend, ctx, choice, config, templates)
                    else:
                        box = None
            except ParseFailure:
                budget_hit = True  # the model cannot produce an action; give up
                break

            target = ObjectRef(choice.object_name) if choice.object_name else None
            action = Action(choice.kind, target)
            was_recovery = memory.steps and memory.steps[-1].result is ActionResult.FAILED

            matched = expert_matches(action)
            result = execute(action, box, visible, sg)

            if result is ActionResult.SUCCEEDED:
                failure_note = None
                if was_recovery and recoveries_attempted > recoveries_succeeded:
                    recoveries_succeeded += 1
                if matched:
                    view.block_progress += 1
                gr_text, gr_frames = gr_sub_prompt(
                    sg, _subgoal_steps(memory, sg), templates=templates,
                    frame_budget=config.frame_budget,
                )
                try:
                    answer = caller.ask(SkillKind.GR_SUB, gr_text, gr_frames)
                except ParseFailure:
                    answer = YesNo(False)
                assert isinstance(answer, YesNo)
                if answer.value:
                    break
            else:
                if config.recovery_enabled:
                    recoveries_attempted += 1
                    post_ctx = StepContext(frame, visible, state.agent, sg)
                    try:
                        (rec_choice, rec_box), _ = recover(
                            (action, target, box), memory, post_ctx, backend, config, templates
                        )
                        forced = (rec_choice, rec_box)
                    except (RecoveryExhausted, Unsupported, ParseFailure):
                        forced = None  # unusable round; the loop replans normally
                elif config.env_feedback:
                    failure_note = describe_action(action)

    all_done, fraction = goal_satisfied(state, task)
    return EpisodeResult(
        success=all_done,
        goal_condition_rate=fraction,
        steps_taken=len(memory),
        failures=failures,
        recoveries_attempted=recoveries_attempted,
        recoveries_succeeded=recoveries_succeeded,
        transcript=memory,
    )


def _subgoal_steps(memory: Memory, sg: Subgoal) -> tuple[MemoryStep, ...]:
    run = []
    for s in reversed(memory.steps):
        if s.subgoal == sg:
            run.append(s)
        else:
            break
    return tuple(reversed(run))
