from fractions import Fraction

import pytest

from euea.backends import (
    Completion,
    EchoBackend,
    FixedTextBackend,
    SimOracleBackend,
    StubBackend,
    tokenize,
)
from euea.core import SkillKind, Split
from euea.datasets import build_skill_dataset, random_exploration
from euea.evaluation import (
    EmbedClient,
    PlanningSimilarity,
    evaluate_skills,
    evaluate_tasks,
    planning_similarity,
)
from euea.rewards import iou, jaccard
from euea.runtime import AgentConfig
from euea.prompts import parse_response, render_answer


@pytest.fixture(scope="module")
def eval_dataset(expert_trajectories):
    return build_skill_dataset(expert_trajectories, set(SkillKind), Split.EVAL)


class TestCeilingAndFloor:
    def test_oracle_scores_perfectly(self, eval_dataset):
        report = evaluate_skills(eval_dataset, EchoBackend(eval_dataset))
        for metric, mean in report.means.items():
            if metric == "planning":
                assert mean == pytest.approx(1.0, abs=1e-9)
            else:
                assert mean == pytest.approx(100.0, abs=1e-9)
        assert report.planning_mode == "token_overlap"

    def test_repeat_evaluation_is_identical(self, eval_dataset):
        backend = EchoBackend(eval_dataset)
        a = evaluate_skills(eval_dataset, backend)
        b = evaluate_skills(eval_dataset, backend)
        assert a == b

    def test_always_no_matches_label_fraction(self, suite_one_per_type, expert_trajectories):
        exploration = random_exploration(
            suite_one_per_type[1].scene, episodes=4, steps_per_episode=25, seed=9
        )
        dataset = build_skill_dataset(
            list(expert_trajectories) + exploration,
            {SkillKind.ASP, SkillKind.GR_MAIN, SkillKind.GR_SUB},
            Split.EVAL,
        )
        report = evaluate_skills(dataset, FixedTextBackend("No"))
        for kind, metric in (
            (SkillKind.ASP, "action_prediction"),
            (SkillKind.GR_MAIN, "gr_main"),
            (SkillKind.GR_SUB, "gr_sub"),
        ):
            labels = [i.ground_truth.value for i in dataset if i.kind is kind]
            no_fraction = sum(1 for v in labels if not v) / len(labels)
            assert report.means[metric] == pytest.approx(no_fraction * 100.0, abs=1e-9)
            assert report.counts[metric] == len(labels)

    def test_empty_or_responses_ground_to_zero(self, eval_dataset):
        # empty answers against non-empty ground-truth sets
        or_only = [
            i for i in eval_dataset if i.kind is SkillKind.OR and i.ground_truth.names
        ]
        assert or_only
        report = evaluate_skills(or_only, FixedTextBackend(""))
        assert report.means["grounding"] == 0.0


class TestMetricRewardCoherence:
    def test_means_equal_reward_kernels(self, eval_dataset):
        # a backend that always answers with the first instance's ground truth,
        # producing imperfect but parseable answers everywhere else
        subset = [i for i in eval_dataset if i.kind in (SkillKind.OR, SkillKind.OD, SkillKind.SAP)]
        canned = {
            SkillKind.OR: render_answer(next(i for i in subset if i.kind is SkillKind.OR).ground_truth),
            SkillKind.OD: render_answer(next(i for i in subset if i.kind is SkillKind.OD).ground_truth),
            SkillKind.SAP: render_answer(next(i for i in subset if i.kind is SkillKind.SAP).ground_truth),
        }

        def responder(request):
            for kind, text in canned.items():
                probe = {
                    SkillKind.OR: "object class names",
                    SkillKind.OD: "bounding box",
                    SkillKind.SAP: "single next action",
                }[kind]
                if probe in request.prompt_text:
                    return [Completion(text, tuple((tok, 0.0) for tok in tokenize(text)))]
            raise AssertionError("unexpected prompt")

        backend = StubBackend(responder=responder)
        report = evaluate_skills(subset, backend)

        by_kind = {k: [] for k in canned}
        for inst in subset:
            parsed = parse_response(inst.kind, canned[inst.kind])
            if inst.kind is SkillKind.OR:
                by_kind[inst.kind].append(jaccard(parsed.names, inst.ground_truth.names))
            elif inst.kind is SkillKind.OD:
                by_kind[inst.kind].append(iou(parsed.box, inst.ground_truth.box))
            else:
                match = (
                    parsed.kind == inst.ground_truth.kind
                    and parsed.object_name == inst.ground_truth.object_name
                )
                by_kind[inst.kind].append(1.0 if match else 0.0)
        assert report.means["grounding"] == pytest.approx(
            100 * sum(by_kind[SkillKind.OR]) / len(by_kind[SkillKind.OR])
        )
        assert report.means["detection"] == pytest.approx(
            100 * sum(by_kind[SkillKind.OD]) / len(by_kind[SkillKind.OD])
        )
        assert report.means["step_by_step"] == pytest.approx(
            100 * sum(by_kind[SkillKind.SAP]) / len(by_kind[SkillKind.SAP])
        )


class TestActionGroundingThreshold:
    def test_raising_threshold_never_increases_rate(self, eval_dataset, monkeypatch):
        import euea.evaluation as evaluation
        from euea.core import ActionWithBox, BoundingBox

        ag = [i for i in eval_dataset if i.kind is SkillKind.AG]
        answers = {}
        for inst in ag:
            gt = inst.ground_truth
            if gt.box is None:
                answers[tuple(f.hash for f in inst.frames)] = render_answer(gt)
                continue
            # nudge each predicted box so thresholds actually discriminate
            b = gt.box
            dx = 4 if b.x_max + 4 <= 64 else -4
            shifted = BoundingBox(b.x_min + dx, b.y_min, b.x_max + dx, b.y_max)
            answers[tuple(f.hash for f in inst.frames)] = render_answer(
                ActionWithBox(gt.kind, gt.object_name, shifted)
            )

        def responder(request):
            text = answers[tuple(f.hash for f in request.frames)]
            return [Completion(text, tuple((tok, 0.0) for tok in tokenize(text)))]

        backend = StubBackend(responder=responder)
        rates = []
        for threshold in (0.25, 0.5, 0.75, 1.0):
            monkeypatch.setattr(evaluation, "AG_IOU_THRESHOLD", threshold)
            report = evaluate_skills(ag, backend)
            rates.append(report.means["action_grounding"])
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[0] > rates[-1]  # the jitter separates at least one pair


class TestPlanningSimilarity:
    def test_identity_and_symmetry(self):
        a = "go to the apple; pick up the apple"
        b = "pick up the mug"
        assert planning_similarity(a, a) == pytest.approx(1.0, abs=1e-6)
        assert planning_similarity(a, b) == planning_similarity(b, a)

    def test_disjoint_tokens_fallback_zero(self):
        assert planning_similarity("alpha beta", "gamma delta") == 0.0

    def test_unreachable_embedder_falls_back(self):
        client = EmbedClient("http://127.0.0.1:1", timeout=0.2)
        sim = PlanningSimilarity(client)
        value = sim("same text", "same text")
        assert value == pytest.approx(1.0)
        assert sim.mode == "token_overlap"

    def test_empty_strings_rejected(self):
        with pytest.raises(ValueError):
            planning_similarity("", "x")


class TestTaskAggregation:
    def test_oracle_batch_all_types(self, suite_one_per_type):
        report, results = evaluate_tasks(
            suite_one_per_type, lambda: SimOracleBackend(), AgentConfig()
        )
        assert report.average_success == 1
        assert set(report.per_type_success) == {i.task.task_type.value for i in suite_one_per_type}
        assert all(v == 1 for v in report.per_type_success.values())
        assert report.average_goal_condition == 1
        assert report.recoveries_attempted == 0

    def test_average_is_exact_episode_mean(self, suite_one_per_type):
        report, results = evaluate_tasks(
            suite_one_per_type[:3], lambda: SimOracleBackend(), AgentConfig()
        )
        booleans = [Fraction(1 if r.success else 0) for r in results]
        assert report.average_success == sum(booleans, Fraction(0)) / len(booleans)

    def test_absent_type_not_reported(self, suite_one_per_type):
        report, _ = evaluate_tasks(
            suite_one_per_type[:2], lambda: SimOracleBackend(), AgentConfig()
        )
        assert len(report.per_type_success) == 2

    def test_parallel_matches_sequential(self, suite_one_per_type):
        seq, _ = evaluate_tasks(suite_one_per_type, lambda: SimOracleBackend(), AgentConfig())
        par, _ = evaluate_tasks(
            suite_one_per_type, lambda: SimOracleBackend(), AgentConfig(), workers=4
        )
        assert seq == par

    def test_markdown_rendering(self, suite_one_per_type):
        report, _ = evaluate_tasks(
            suite_one_per_type, lambda: SimOracleBackend(), AgentConfig()
        )
        text = report.render_markdown()
        assert "Avg." in text and "100.00" in text
