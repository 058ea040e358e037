"""Policy backends: text+image prompt in, completions with token logprobs out.

Implementations: an HTTP chat-completion client, a deterministic scripted
oracle bound to a live simulator episode, an echo oracle bound to a dataset,
and small stubs for tests.
"""

from __future__ import annotations

import base64
import io
import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

from .core import (
    Action,
    ActionChoice,
    Box,
    BoundingBox,
    Frame,
    Memory,
    ObjectSet,
    SkillInstance,
    SkillKind,
    Task,
    YesNo,
)
from .prompts import RECOVERY_NOTE, default_templates, render_answer
from .sim import RASTER_SIZE, ExpertPlan, WorldState, goal_satisfied, visible_objects

_MISMATCH_NLL = math.log(50.0)


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """The remote endpoint could not be reached."""


class ProtocolError(BackendError):
    """The remote endpoint answered outside the expected wire shape."""


class Unsupported(BackendError):
    """The backend cannot serve this request (e.g. scoring without logprobs)."""


@dataclass(frozen=True)
class GenerationRequest:
    """One policy query.

    With temperature 0 and sample_count > 1, whether the draws are identical
    repeats is backend-defined; the scripted backends here return identical
    completions.
    """

    prompt_text: str
    frames: tuple[Frame, ...] = ()
    max_tokens: int = 256
    temperature: float = 0.0
    sample_count: int = 1
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: tuple[tuple[str, float], ...]
    finish_reason: str = "stop"

    def __post_init__(self) -> None:
        for token, lp in self.token_logprobs:
            if lp > 0:
                raise ValueError(f"logprob for {token!r} is positive")

    @property
    def total_logprob(self) -> float:
        return sum(lp for _, lp in self.token_logprobs)


def tokenize(text: str) -> list[str]:
    """Whitespace-attached token pieces whose concatenation reproduces the text."""
    return re.findall(r"\s*\S+", text)


def certain_completion(text: str, sample_count: int = 1) -> list[Completion]:
    tokens = tuple((tok, 0.0) for tok in tokenize(text))
    return [Completion(text, tokens) for _ in range(sample_count)]


def _mismatch_score(target: str, canonical: str) -> float:
    """Deterministic pseudo-NLL: 0 when equal, one penalty per differing token."""
    t_tokens, c_tokens = tokenize(target), tokenize(canonical)
    misses = sum(1 for a, b in zip(t_tokens, c_tokens) if a.strip() != b.strip())
    misses += abs(len(t_tokens) - len(c_tokens))
    return misses * _MISMATCH_NLL


class Backend(Protocol):
    def generate(self, request: GenerationRequest) -> list[Completion]: ...

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float: ...


def score_from_completion(completion: Completion) -> float:
    """Negative sum of the completion's token logprobs."""
    return -completion.total_logprob


# ---------------------------------------------------------------------------
# Fault injection


class Corruption(Enum):
    WRONG_BOX = "WrongBox"
    REPEAT_FAILED_ACTION = "RepeatFailedAction"
    WRONG_OBJECT = "WrongObject"


@dataclass(frozen=True)
class FaultRule:
    subgoal_index: int
    attempt_number: int
    corruption: Corruption

    def __post_init__(self) -> None:
        if self.attempt_number < 1:
            raise ValueError("attempt numbers start at 1")


@dataclass(frozen=True)
class FaultSchedule:
    rules: tuple[FaultRule, ...] = ()

    def rule_for(self, subgoal_index: int, attempt: int) -> FaultRule | None:
        for rule in self.rules:
            if rule.subgoal_index == subgoal_index and rule.attempt_number == attempt:
                return rule
        return None


def off_target_box(box: BoundingBox, raster: int = RASTER_SIZE) -> BoundingBox:
    """A decoy answer that cannot hit anything clickable.

    Rendered ground-truth boxes never enter the top raster rows, so a corner
    box is disjoint from every one of them. Merely shifting the true box
    sideways is not enough: on scenes with duplicate object classes a shifted
    box can land on a sibling instance and accidentally succeed.
    """
    return BoundingBox(0, 0, 8, 8)


# ---------------------------------------------------------------------------
# Scripted oracle over a live episode


@dataclass
class EpisodeView:
    """Mutable episode context the runtime shares with the scripted oracle."""

    state: WorldState
    task: Task
    plan: ExpertPlan
    memory: Memory
    subgoal_pos: int = 0  # 0-based position within plan.subgoals
    block_progress: int = 0  # successful interactions completed in the current subgoal

    @property
    def current_subgoal_index(self) -> int:
        return self.plan.subgoals[self.subgoal_pos].index

    def remaining_block(self):
        steps = self.plan.steps_for(self.current_subgoal_index)
        return steps[self.block_progress :]


class SimOracleBackend:
    """Answers every runtime skill query from simulator ground truth.

    Skill kinds are recognized by each template's final instruction line, so
    oracle runs exercise the real prompt text and answer parser. A fault
    schedule can corrupt normal-path answers; recovery-path requests (marked
    by the recovery note in the prompt) are never corrupted, and each recovery
    round retires the active fault rule for that subgoal.
    """

    def __init__(self, schedule: FaultSchedule | None = None, templates=None) -> None:
        self.schedule = schedule or FaultSchedule()
        self.templates = templates or default_templates()
        self._markers = {
            kind: text.splitlines()[-1].split("{")[0].strip()
            for kind, text in self.templates.items()
        }
        self._recovery_marker = RECOVERY_NOTE.split("{")[0].strip().rstrip('"').strip()
        self.view: EpisodeView | None = None
        self._recovery_rounds: dict[int, int] = {}

    def begin_episode(self, view: EpisodeView) -> None:
        self.view = view
        self._recovery_rounds = {}

    # -- helpers

    def _detect_kind(self, prompt: str) -> SkillKind:
        for kind, marker in self._markers.items():
            if marker and marker in prompt:
                return kind
        raise Unsupported("oracle cannot tell which skill this prompt asks for")

    def _is_recovery(self, prompt: str) -> bool:
        return self._recovery_marker in prompt

    def _active_corruption(self) -> Corruption | None:
        assert self.view is not None
        sg = self.view.current_subgoal_index
        rule = self.schedule.rule_for(sg, self._recovery_rounds.get(sg, 0) + 1)
        return rule.corruption if rule else None

    def _next_expert_step(self):
        assert self.view is not None
        remaining = self.view.remaining_block()
        if not remaining:
            raise Unsupported("no expert action remains in the current subgoal")
        return remaining[0]

    def _answer(self, kind: SkillKind, recovery: bool) -> str:
        view = self.view
        if view is None:
            raise Unsupported("oracle is not bound to an episode")
        corruption = None if recovery else self._active_corruption()

        if kind is SkillKind.OR:
            names = frozenset(ref.name for ref in visible_objects(view.state))
            return render_answer(ObjectSet(names))

        if kind is SkillKind.SAP:
            plan_step = self._next_expert_step()
            action = plan_step.action
            if corruption is Corruption.REPEAT_FAILED_ACTION:
                repeat = self._last_interaction(view.memory)
                if repeat is not None:
                    action = repeat
            elif corruption is Corruption.WRONG_OBJECT and action.target is not None:
                other_names = sorted(
                    ref.name for ref in visible_objects(view.state)
                    if ref.name != action.target.name
                )
                if other_names:
                    return render_answer(ActionChoice(action.kind, other_names[0]))
            choice = ActionChoice(action.kind, action.target.name if action.target else None)
            return render_answer(choice)

        if kind is SkillKind.OD:
            plan_step = self._next_expert_step()
            target = plan_step.action.target
            assert target is not None
            boxes = visible_objects(view.state)
            if target not in boxes:
                raise Unsupported(f"{target.key()} is not visible to the oracle")
            box = boxes[target]
            if corruption is Corruption.WRONG_BOX:
                box = off_target_box(box)
            return render_answer(Box(box))

        if kind is SkillKind.GR_SUB:
            done = not view.remaining_block()
            return render_answer(YesNo(done))

        if kind is SkillKind.GR_MAIN:
            return render_answer(YesNo(goal_satisfied(view.state, view.task)[0]))

        raise Unsupported(f"the episode oracle does not serve {kind.value}")

    @staticmethod
    def _last_interaction(memory: Memory) -> Action | None:
        for step in reversed(memory.steps):
            if step.action.kind.is_interaction:
                return step.action
        return None

    # -- Backend protocol

    def generate(self, request: GenerationRequest) -> list[Completion]:
        kind = self._detect_kind(request.prompt_text)
        recovery = self._is_recovery(request.prompt_text)
        if recovery and self.view is not None:
            sg = self.view.current_subgoal_index
            self._recovery_rounds[sg] = self._recovery_rounds.get(sg, 0) + 1
        text = self._answer(kind, recovery)
        return certain_completion(text, request.sample_count)

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float:
        kind = self._detect_kind(prompt_text)
        canonical = self._answer(kind, recovery=True)
        return _mismatch_score(target_text, canonical)


# ---------------------------------------------------------------------------
# Echo oracle over a dataset


class EchoBackend:
    """Answers each known query with its instance's rendered ground truth.

    Queries are keyed on the full multimodal input: prompt text plus the
    ordered frame digests.
    """

    @staticmethod
    def _key(prompt_text: str, frames: tuple[Frame, ...]) -> tuple:
        return (prompt_text, tuple(f.hash for f in frames))

    def __init__(self, instances: list[SkillInstance]) -> None:
        self._answers: dict[tuple, str] = {}
        for inst in instances:
            text = render_answer(inst.ground_truth)
            key = self._key(inst.prompt_text, inst.frames)
            existing = self._answers.get(key)
            if existing is not None and existing != text:
                raise ValueError(
                    f"two instances share an input but disagree on ground truth "
                    f"(instance {inst.id})"
                )
            self._answers[key] = text

    def _lookup(self, prompt_text: str, frames: tuple[Frame, ...]) -> str:
        answer = self._answers.get(self._key(prompt_text, frames))
        if answer is None:
            raise Unsupported("echo oracle has no ground truth for this query")
        return answer

    def generate(self, request: GenerationRequest) -> list[Completion]:
        answer = self._lookup(request.prompt_text, request.frames)
        return certain_completion(answer, request.sample_count)

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float:
        return _mismatch_score(target_text, self._lookup(prompt_text, frames))


# ---------------------------------------------------------------------------
# Stubs for tests and baselines


class FixedTextBackend:
    """Always answers with the same text (e.g. an always-\"No\" baseline)."""

    def __init__(self, text: str) -> None:
        self.text = text

    def generate(self, request: GenerationRequest) -> list[Completion]:
        return certain_completion(self.text, request.sample_count)

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float:
        raise Unsupported("fixed-text backend cannot score")


class StubBackend:
    """Scripted backend with explicit per-target token logprobs."""

    def __init__(
        self,
        responder: Callable[[GenerationRequest], list[Completion]] | None = None,
        logprob_table: dict[str, tuple[float, ...]] | None = None,
    ) -> None:
        self.responder = responder
        self.logprob_table = logprob_table or {}

    def _completion_for(self, target_text: str) -> Completion:
        lps = self.logprob_table.get(target_text)
        if lps is None:
            raise Unsupported(f"no scripted logprobs for {target_text!r}")
        tokens = tokenize(target_text)
        if len(tokens) != len(lps):
            raise ValueError(
                f"{target_text!r} tokenizes into {len(tokens)} pieces, "
                f"but {len(lps)} logprobs are scripted"
            )
        return Completion(target_text, tuple(zip(tokens, lps)))

    def generate(self, request: GenerationRequest) -> list[Completion]:
        if self.responder is None:
            raise Unsupported("stub backend has no generation script")
        return self.responder(request)

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float:
        return score_from_completion(self._completion_for(target_text))


# ---------------------------------------------------------------------------
# HTTP chat-completion client


def _frame_to_data_url(frame: Frame) -> str:
    from PIL import Image

    img = Image.frombytes("RGB", (frame.width, frame.height), frame.pixels)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class HttpBackend:
    """Client for the common chat-completion JSON protocol, logprobs requested."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        log_path: Path | None = None,
        transport=None,
    ) -> None:
        import httpx

        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.model = model
        self.log_path = Path(log_path) if log_path else None
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: GenerationRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt_text}]
        for frame in request.frames:
            content.append(
                {"type": "image_url", "image_url": {"url": _frame_to_data_url(frame)}}
            )
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "n": request.sample_count,
            "logprobs": True,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def _log(self, payload: dict, body: dict) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"request": payload, "response": body}) + "\n")

    def generate(self, request: GenerationRequest) -> list[Completion]:
        import httpx

        payload = self._payload(request)
        try:
            resp = self._client.post("/chat/completions", json=payload)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code != 200:
            raise ProtocolError(f"endpoint answered {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            self._log(payload, body)
            completions = []
            for choice in body["choices"]:
                text = choice["message"]["content"] or ""
                logprobs = choice.get("logprobs")
                if not logprobs or logprobs.get("content") is None:
                    raise ProtocolError("response carries no token logprobs")
                tokens = tuple(
                    (tok["token"], min(0.0, float(tok["logprob"])))
                    for tok in logprobs["content"]
                )
                completions.append(
                    Completion(text, tokens, choice.get("finish_reason") or "stop")
                )
            if len(completions) != request.sample_count:
                raise ProtocolError(
                    f"asked for {request.sample_count} samples, got {len(completions)}"
                )
            return completions
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed chat-completion response: {exc}") from exc

    def score(self, prompt_text: str, frames: tuple[Frame, ...], target_text: str) -> float:
        if not target_text:
            raise ValueError("target text must be nonempty")
        request = GenerationRequest(prompt_text, frames, temperature=0.0, sample_count=1)
        for completion in self.generate(request):
            if completion.text.strip() == target_text.strip():
                return score_from_completion(completion)
        raise Unsupported("backend cannot score: no sampled completion matches the target")
