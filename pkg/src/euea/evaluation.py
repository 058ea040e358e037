"""Skill benchmark metrics and task-evaluation aggregation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Sequence

from .backends import Backend, BackendError, GenerationRequest
from .core import (
    ActionChoice,
    ActionWithBox,
    Box,
    Caption,
    ObjectSet,
    SkillInstance,
    SkillKind,
    SubgoalList,
    TaskType,
    YesNo,
)
from .prompts import ParseFailure, parse_response
from .rewards import caption_implies_change, iou, jaccard, pair_matches
from .runtime import AgentConfig, EpisodeResult, run_episode
from .scenes import SuiteItem

AG_IOU_THRESHOLD = 0.5


class EmbedderUnavailable(RuntimeError):
    """The embedding service cannot be reached or answered malformed data."""


class EmbedClient:
    """Client for the embedding microservice's POST /embed endpoint."""

    def __init__(self, base_url: str, token: str | None = None, timeout: float = 10.0) -> None:
        import httpx

        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), timeout=timeout, headers=headers
        )

    def embed(self, texts: list[str]) -> list[list[float]]:
        import httpx

        try:
            resp = self._client.post("/embed", json={"texts": texts})
        except httpx.HTTPError as exc:
            raise EmbedderUnavailable(str(exc)) from exc
        if resp.status_code != 200:
            raise EmbedderUnavailable(f"embed endpoint answered {resp.status_code}")
        try:
            vectors = resp.json()["vectors"]
        except (KeyError, ValueError) as exc:
            raise EmbedderUnavailable(f"malformed embed response: {exc}") from exc
        if len(vectors) != len(texts):
            raise EmbedderUnavailable("embed response length mismatch")
        return vectors

    def close(self) -> None:
        self._client.close()


def _token_overlap(a: str, b: str) -> float:
    ta = {w for w in a.casefold().split() if w}
    tb = {w for w in b.casefold().split() if w}
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def _cosine(u: Sequence[float], v: Sequence[float]) -> float:
    import math

    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u)) or 1.0
    nv = math.sqrt(sum(b * b for b in v)) or 1.0
    return dot / (nu * nv)


class PlanningSimilarity:
    """Cosine similarity via an embedder, degrading to token overlap.

    Once the embedder fails, the fallback is used for the rest of the run and
    the mode is reported so results are labeled with the similarity used.
    """

    def __init__(self, embedder: EmbedClient | None = None) -> None:
        self.embedder = embedder
        self.mode = "embedding" if embedder is not None else "token_overlap"

    def __call__(self, pred: str, gt: str) -> float:
        if not pred or not gt:
            raise ValueError("similarity needs nonempty strings")
        if self.mode == "embedding" and self.embedder is not None:
            try:
                u, v = self.embedder.embed([pred, gt])
                return _cosine(u, v)
            except EmbedderUnavailable:
                self.mode = "token_overlap"
        return _token_overlap(pred, gt)


def planning_similarity(pred: str, gt: str, embedder: EmbedClient | None = None) -> float:
    return PlanningSimilarity(embedder)(pred, gt)


# ---------------------------------------------------------------------------
# Skill evaluation

_METRIC_OF_KIND: dict[SkillKind, str] = {
    SkillKind.OR: "grounding",
    SkillKind.OD: "detection",
    SkillKind.STP: "planning",
    SkillKind.SAP: "step_by_step",
    SkillKind.ASP: "action_prediction",
    SkillKind.FSC: "captioning",
    SkillKind.AG: "action_grounding",
    SkillKind.GR_MAIN: "gr_main",
    SkillKind.GR_SUB: "gr_sub",
}

_PERCENT_METRICS = frozenset(
    {
        "grounding",
        "detection",
        "gr_main",
        "gr_sub",
        "action_prediction",
        "action_grounding",
        "step_by_step",
        "captioning",
    }
)

METRIC_ORDER = [
    "grounding",
    "detection",
    "gr_main",
    "gr_sub",
    "action_prediction",
    "action_grounding",
    "planning",
    "step_by_step",
    "captioning",
]


@dataclass(frozen=True)
class SkillReport:
    """Per-metric means; percentage metrics are reported x100, planning raw."""

    means: dict[str, float]
    counts: dict[str, int]
    planning_mode: str = "token_overlap"

    def to_dict(self) -> dict[str, Any]:
        return {
            "means": dict(self.means),
            "counts": dict(self.counts),
            "planning_mode": self.planning_mode,
        }

    def render_markdown(self) -> str:
        cols = [m for m in METRIC_ORDER if m in self.means]
        header = "| " + " | ".join(cols) + " |"
        sep = "|" + "|".join(["---"] * len(cols)) + "|"
        cells = []
        for m in cols:
            value = self.means[m]
            cells.append(f"{value:.2f}" if m in _PERCENT_METRICS else f"{value:.3f}")
        return "\n".join([header, sep, "| " + " | ".join(cells) + " |"])

    def render_csv(self) -> str:
        cols = [m for m in METRIC_ORDER if m in self.means]
        lines = ["metric,mean,count"]
        for m in cols:
            lines.append(f"{m},{self.means[m]},{self.counts[m]}")
        return "\n".join(lines)


def _score_instance(inst: SkillInstance, text: str, similarity: PlanningSimilarity) -> float:
    """Metric contribution of one response in [0, 1]; unparseable scores 0."""
    try:
        parsed = parse_response(inst.kind, text)
    except ParseFailure:
        return 0.0
    gt = inst.ground_truth
    if inst.kind is SkillKind.OR:
        assert isinstance(parsed, ObjectSet) and isinstance(gt, ObjectSet)
        return jaccard(parsed.names, gt.names)
    if inst.kind is SkillKind.OD:
        assert isinstance(parsed, Box) and isinstance(gt, Box)
        return iou(parsed.box, gt.box)
    if inst.kind is SkillKind.STP:
        assert isinstance(parsed, SubgoalList) and isinstance(gt, SubgoalList)
        return similarity("; ".join(parsed.texts), "; ".join(gt.texts))
    if inst.kind is SkillKind.SAP:
        assert isinstance(parsed, ActionChoice) and isinstance(gt, ActionChoice)
        return 1.0 if pair_matches(parsed.kind, parsed.object_name, gt.kind, gt.object_name) else 0.0
    if inst.kind in (SkillKind.ASP, SkillKind.GR_MAIN, SkillKind.GR_SUB):
        assert isinstance(parsed, YesNo) and isinstance(gt, YesNo)
        return 1.0 if parsed.value == gt.value else 0.0
    if inst.kind is SkillKind.FSC:
        assert isinstance(parsed, Caption) and isinstance(gt, Caption)
        return 1.0 if caption_implies_change(parsed.text) == caption_implies_change(gt.text) else 0.0
    if inst.kind is SkillKind.AG:
        assert isinstance(parsed, ActionWithBox) and isinstance(gt, ActionWithBox)
        pair = pair_matches(parsed.kind, parsed.object_name, gt.kind, gt.object_name)
        if parsed.box is not None and gt.box is not None:
            box_ok = iou(parsed.box, gt.box) >= AG_IOU_THRESHOLD
        else:
            box_ok = parsed.box is None and gt.box is None
        return 1.0 if pair and box_ok else 0.0
    raise ValueError(f"unknown kind {inst.kind}")  # pragma: no cover


def evaluate_skills(
    dataset: Sequence[SkillInstance],
    backend: Backend,
    embedder: EmbedClient | None = None,
) -> SkillReport:
    """One temperature-0 completion per instance, aggregated per metric family."""
    similarity = PlanningSimilarity(embedder)
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for inst in dataset:
        request = GenerationRequest(inst.prompt_text, inst.frames, temperature=0.0)
        try:
            completion = backend.generate(request)[0]
        except BackendError as exc:
            raise type(exc)(f"instance {inst.id}: {exc}") from exc
        value = _score_instance(inst, completion.text, similarity)
        metric = _METRIC_OF_KIND[inst.kind]
        sums[metric] = sums.get(metric, 0.0) + value
        counts[metric] = counts.get(metric, 0) + 1
    means = {}
    for metric, total in sums.items():
        mean = total / counts[metric]
        means[metric] = mean * 100.0 if metric in _PERCENT_METRICS else mean
    return SkillReport(means=means, counts=counts, planning_mode=similarity.mode)


# ---------------------------------------------------------------------------
# Task evaluation

_TYPE_ORDER = [t.value for t in TaskType]


@dataclass(frozen=True)
class TaskReport:
    """Success and goal-condition aggregates over an episode batch."""

    per_type_success: dict[str, Fraction]
    per_type_counts: dict[str, int]
    average_success: Fraction
    average_goal_condition: Fraction
    episodes: int
    failures: int
    recoveries_attempted: int
    recoveries_succeeded: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_type_success": {k: float(v) for k, v in self.per_type_success.items()},
            "per_type_counts": dict(self.per_type_counts),
            "average_success": float(self.average_success),
            "average_goal_condition": float(self.average_goal_condition),
            "episodes": self.episodes,
            "failures": self.failures,
            "recoveries_attempted": self.recoveries_attempted,
            "recoveries_succeeded": self.recoveries_succeeded,
        }

    def render_markdown(self) -> str:
        types = [t for t in _TYPE_ORDER if t in self.per_type_success]
        header = "| Avg. | " + " | ".join(types) + " | Goal Condition |"
        sep = "|" + "|".join(["---"] * (len(types) + 2)) + "|"
        row = [f"{float(self.average_success) * 100:.2f}"]
        row += [f"{float(self.per_type_success[t]) * 100:.2f}" for t in types]
        row.append(f"{float(self.average_goal_condition) * 100:.2f}")
        return "\n".join([header, sep, "| " + " | ".join(row) + " |"])

    def render_csv(self) -> str:
        lines = ["column,value"]
        lines.append(f"average_success,{float(self.average_success)}")
        for t in _TYPE_ORDER:
            if t in self.per_type_success:
                lines.append(f"success_{t},{float(self.per_type_success[t])}")
        lines.append(f"average_goal_condition,{float(self.average_goal_condition)}")
        lines.append(f"episodes,{self.episodes}")
        lines.append(f"recoveries_attempted,{self.recoveries_attempted}")
        lines.append(f"recoveries_succeeded,{self.recoveries_succeeded}")
        return "\n".join(lines)


def aggregate_task_report(
    items: Sequence[SuiteItem], results: Sequence[EpisodeResult]
) -> TaskReport:
    """Exact-rational aggregation of per-episode outcomes."""
    assert len(items) == len(results)
    by_type_success: dict[str, int] = {}
    by_type_count: dict[str, int] = {}
    for item, result in zip(items, results):
        t = item.task.task_type.value
        by_type_count[t] = by_type_count.get(t, 0) + 1
        by_type_success[t] = by_type_success.get(t, 0) + (1 if result.success else 0)
    n = len(results)
    total_success = sum(1 for r in results if r.success)
    goal_sum = sum((r.goal_condition_rate for r in results), Fraction(0))
    return TaskReport(
        per_type_success={
            t: Fraction(by_type_success[t], by_type_count[t]) for t in by_type_count
        },
        per_type_counts=by_type_count,
        average_success=Fraction(total_success, n) if n else Fraction(0),
        average_goal_condition=goal_sum / n if n else Fraction(0),
        episodes=n,
        failures=sum(r.failures for r in results),
        recoveries_attempted=sum(r.recoveries_attempted for r in results),
        recoveries_succeeded=sum(r.recoveries_succeeded for r in results),
    )


def evaluate_tasks(
    items: Sequence[SuiteItem],
    backend_factory: Callable[[], Backend],
    config: AgentConfig | None = None,
    templates=None,
    workers: int = 1,
    rng_seed: int = 0,
) -> tuple[TaskReport, list[EpisodeResult]]:
    """Run one episode per suite item and aggregate; results keep input order."""
    config = config or AgentConfig()

    def one(index_item: tuple[int, SuiteItem]) -> tuple[int, EpisodeResult]:
        index, item = index_item
        backend = backend_factory()
        result = run_episode(
            item.scene, item.task, backend, config, templates=templates, rng_seed=rng_seed
        )
        return index, result

    indexed = list(enumerate(items))
    if workers <= 1:
        pairs = [one(pair) for pair in indexed]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, indexed))
    pairs.sort(key=lambda p: p[0])
    results = [r for _, r in pairs]
    return aggregate_task_report(items, results), results
