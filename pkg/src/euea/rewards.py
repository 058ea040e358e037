"""Rule-based reward functions and the metric kernels they share."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .core import (
    ActionChoice,
    ActionWithBox,
    BoundingBox,
    Box,
    Caption,
    ObjectSet,
    SkillInstance,
    SkillKind,
    SkillOutput,
    SubgoalList,
    YesNo,
    output_variant,
)

NO_CHANGE_CAPTION = "Nothing changes."


class VariantMismatch(ValueError):
    """Raised when a response variant does not fit the instance's skill."""


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, exact integer areas."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def jaccard(pred: Iterable[str], gt: Iterable[str]) -> float:
    """Jaccard index over name sets; two empty sets count as a perfect match."""
    p, g = set(pred), set(gt)
    if not p and not g:
        return 1.0
    return len(p & g) / len(p | g)


def _canon_subgoal(text: str) -> str:
    return " ".join(text.split()).casefold()


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def sequence_order_score(pred: Iterable[str], gt: Iterable[str]) -> float:
    """Order-sensitive credit for a predicted subgoal sequence.

    Exact element-wise match scores 1.0; otherwise the longest common
    subsequence length over canonicalized texts, divided by the ground-truth
    length.
    """
    p = [_canon_subgoal(t) for t in pred]
    g = [_canon_subgoal(t) for t in gt]
    if not g:
        raise ValueError("ground-truth subgoal list must be nonempty")
    if p == g:
        return 1.0
    return _lcs_length(p, g) / len(g)


def caption_implies_change(text: str) -> bool:
    """Reduce a caption to its changed / no-change implication."""
    return " ".join(text.split()).casefold() != NO_CHANGE_CAPTION.casefold()


def pair_matches(pred_kind, pred_object: str | None, gt_kind, gt_object: str | None) -> bool:
    """Step-by-step correctness: both the action and the object must match."""
    if pred_kind != gt_kind:
        return False
    pn = (pred_object or "").casefold()
    gn = (gt_object or "").casefold()
    return pn == gn


@dataclass(frozen=True)
class RewardScale:
    """Reward range for one skill, used by the variance filter's normalization."""

    r_min: float = 0.0
    r_max: float = 1.0

    @property
    def span(self) -> float:
        return self.r_max - self.r_min


DEFAULT_SCALES: dict[SkillKind, RewardScale] = {kind: RewardScale() for kind in SkillKind}

# Which total-reward component each skill feeds. Object perception covers
# OR and OD, task planning covers SAP and STP, action understanding covers
# ASP, FSC and AG, goal recognition covers both GR variants.
_COMPONENT_OF: dict[SkillKind, str] = {
    SkillKind.OR: "r_op",
    SkillKind.OD: "r_op",
    SkillKind.SAP: "r_tp",
    SkillKind.STP: "r_tp",
    SkillKind.ASP: "r_au",
    SkillKind.FSC: "r_au",
    SkillKind.AG: "r_au",
    SkillKind.GR_MAIN: "r_gr",
    SkillKind.GR_SUB: "r_gr",
}


@dataclass(frozen=True)
class RewardBreakdown:
    r_op: float
    r_tp: float
    r_au: float
    r_gr: float
    active_skill: SkillKind

    @property
    def r_total(self) -> float:
        return self.r_op + self.r_tp + self.r_au + self.r_gr

    def to_dict(self) -> dict:
        return {
            "r_op": self.r_op,
            "r_tp": self.r_tp,
            "r_au": self.r_au,
            "r_gr": self.r_gr,
            "r_total": self.r_total,
            "active_skill": self.active_skill.value,
        }


def component_of(kind: SkillKind) -> str:
    return _COMPONENT_OF[kind]


def _breakdown(kind: SkillKind, value: float) -> RewardBreakdown:
    parts = {"r_op": 0.0, "r_tp": 0.0, "r_au": 0.0, "r_gr": 0.0}
    parts[_COMPONENT_OF[kind]] = value
    return RewardBreakdown(active_skill=kind, **parts)


def reward(instance: SkillInstance, response: SkillOutput) -> RewardBreakdown:
    """Score one response against an instance's ground truth.

    Only the component belonging to the instance's skill can be nonzero; the
    other three are exactly 0.
    """
    kind = instance.kind
    if not isinstance(response, output_variant(kind)):
        raise VariantMismatch(
            f"{kind.value} expects {output_variant(kind).__name__}, "
            f"got {type(response).__name__}"
        )
    gt = instance.ground_truth

    if kind is SkillKind.OR:
        assert isinstance(response, ObjectSet) and isinstance(gt, ObjectSet)
        value = jaccard(response.names, gt.names)
    elif kind is SkillKind.OD:
        assert isinstance(response, Box) and isinstance(gt, Box)
        value = iou(response.box, gt.box)
    elif kind is SkillKind.SAP:
        assert isinstance(response, ActionChoice) and isinstance(gt, ActionChoice)
        value = 1.0 if pair_matches(response.kind, response.object_name, gt.kind, gt.object_name) else 0.0
    elif kind is SkillKind.STP:
        assert isinstance(response, SubgoalList) and isinstance(gt, SubgoalList)
        value = sequence_order_score(response.texts, gt.texts)
    elif kind is SkillKind.ASP or kind in (SkillKind.GR_MAIN, SkillKind.GR_SUB):
        assert isinstance(response, YesNo) and isinstance(gt, YesNo)
        value = 1.0 if response.value == gt.value else 0.0
    elif kind is SkillKind.FSC:
        assert isinstance(response, Caption) and isinstance(gt, Caption)
        value = 1.0 if caption_implies_change(response.text) == caption_implies_change(gt.text) else 0.0
    elif kind is SkillKind.AG:
        assert isinstance(response, ActionWithBox) and isinstance(gt, ActionWithBox)
        pair = pair_matches(response.kind, response.object_name, gt.kind, gt.object_name)
        if response.box is not None and gt.box is not None:
            overlap = iou(response.box, gt.box)
        elif response.box is None and gt.box is None:
            overlap = 1.0
        else:
            overlap = 0.0
        value = 0.5 * (1.0 if pair else 0.0) + 0.5 * overlap
    else:  # pragma: no cover - the kinds above are exhaustive
        raise VariantMismatch(f"no reward rule for {kind}")

    return _breakdown(kind, value)


def zero_reward(kind: SkillKind) -> RewardBreakdown:
    """Breakdown for an unparseable response: every component zero."""
    return _breakdown(kind, 0.0)


def reward_text(instance: SkillInstance, response_text: str) -> RewardBreakdown:
    """Parse raw model text and score it; parse failures earn zero."""
    from .prompts import ParseFailure, parse_response

    try:
        parsed = parse_response(instance.kind, response_text)
    except ParseFailure:
        return zero_reward(instance.kind)
    return reward(instance, parsed)
