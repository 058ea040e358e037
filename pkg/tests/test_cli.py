import json

import pytest

from euea.cli import dispatch


def run(*argv) -> int:
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def suite_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    code = run("gen-scenes", "--count-per-type", 1, "--seed", 5, "--out", out)
    assert code == 0
    return out


class TestGenScenes:
    def test_outputs_and_run_record(self, suite_dir):
        suite = json.loads((suite_dir / "scenes" / "suite.json").read_text())
        assert len(suite) == 6
        record = json.loads((suite_dir / "run.json").read_text())
        assert record["verb"] == "gen-scenes"
        assert record["options"]["seed"] == 5

    def test_rerun_is_byte_identical(self, suite_dir, tmp_path):
        code = run("gen-scenes", "--count-per-type", 1, "--seed", 5, "--out", tmp_path)
        assert code == 0
        assert (tmp_path / "scenes" / "suite.json").read_bytes() == (
            suite_dir / "scenes" / "suite.json"
        ).read_bytes()


class TestEvalTasks:
    def test_oracle_happy_path(self, suite_dir, tmp_path, capsys):
        code = run(
            "eval-tasks", "--suite", suite_dir / "scenes" / "suite.json",
            "--backend", "oracle", "--out", tmp_path,
        )
        assert code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["average_success"] == 1.0
        index = (tmp_path / "transcripts" / "index.jsonl").read_text().splitlines()
        assert len(index) == 6
        assert "100.00" in capsys.readouterr().out

    def test_no_recovery_flag_disables_recovery(self, suite_dir, tmp_path):
        code = run(
            "run-agent", "--suite", suite_dir / "scenes" / "suite.json",
            "--backend", "oracle", "--fault-wrongbox-first", "--no-recovery",
            "--max-steps", 30, "--out", tmp_path,
        )
        assert code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["recoveries_attempted"] == 0
        assert summary["average_success"] == 0.0

    def test_recovery_on_fault_suite_succeeds(self, suite_dir, tmp_path):
        code = run(
            "run-agent", "--suite", suite_dir / "scenes" / "suite.json",
            "--backend", "oracle", "--fault-wrongbox-first", "--out", tmp_path,
        )
        assert code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["average_success"] == 1.0
        assert summary["recoveries_succeeded"] > 0


class TestDatasetVerbs:
    def test_build_dataset_and_reward_flow(self, suite_dir, tmp_path):
        out = tmp_path / "build"
        code = run(
            "build-dataset", "--suite", suite_dir / "scenes" / "suite.json",
            "--kinds", "OR,OD,SAP,ASP", "--split", "Eval", "--out", out,
        )
        assert code == 0
        stats = json.loads((out / "datasets" / "stats.json").read_text())
        assert stats["kind_counts"]["SAP/Eval"] > 0

        dataset = out / "datasets" / "sap_eval.jsonl"
        rows = [json.loads(line) for line in dataset.read_text().splitlines()]
        responses = tmp_path / "responses.jsonl"
        with responses.open("w") as fh:
            for row in rows[:3]:
                fh.write(json.dumps({
                    "instance_id": row["id"],
                    "response_text": "PickupObject Apple",
                }) + "\n")
        reward_out = tmp_path / "rewards"
        code = run(
            "grpo-reward", "--dataset", dataset, "--responses", responses, "--out", reward_out,
        )
        assert code == 0
        scored = [json.loads(l) for l in (reward_out / "reports" / "rewards.jsonl").read_text().splitlines()]
        assert len(scored) == 3
        assert all(set(s) >= {"instance_id", "r_op", "r_tp", "r_au", "r_gr", "r_total"} for s in scored)

    def test_grpo_filter_with_echo_oracle_selects_nothing(self, suite_dir, tmp_path):
        out = tmp_path / "build"
        run(
            "build-dataset", "--suite", suite_dir / "scenes" / "suite.json",
            "--kinds", "ASP", "--split", "Validation", "--out", out,
        )
        code = run(
            "grpo-filter", "--dataset", out / "datasets" / "asp_validation.jsonl",
            "--backend", "oracle", "--out", tmp_path / "filtered",
        )
        assert code == 0
        stats = json.loads(
            (tmp_path / "filtered" / "datasets" / "grpo_stats.json").read_text()
        )
        assert stats["selected"] == 0  # a deterministic oracle never disagrees with itself
        assert set(stats["correct_count_histogram"]) == {"8"}

    def test_explore_writes_trajectories(self, suite_dir, tmp_path):
        code = run(
            "explore", "--suite", suite_dir / "scenes" / "suite.json",
            "--episodes", 2, "--steps", 25, "--seed", 2, "--out", tmp_path,
        )
        assert code == 0
        lines = (tmp_path / "datasets" / "exploration.jsonl").read_text().splitlines()
        assert len(lines) == 12  # one scene per task type, two episodes each


class TestEvalSkills:
    def test_oracle_ceiling(self, suite_dir, tmp_path, capsys):
        out = tmp_path / "build"
        run(
            "build-dataset", "--suite", suite_dir / "scenes" / "suite.json",
            "--kinds", "OR,OD,STP", "--split", "Eval", "--out", out,
        )
        code = run(
            "eval-skills", "--dataset", out / "datasets" / "or_eval.jsonl",
            "--backend", "oracle", "--out", tmp_path / "report",
        )
        assert code == 0
        report = json.loads(
            (tmp_path / "report" / "reports" / "skill_report.json").read_text()
        )
        assert report["means"]["grounding"] == 100.0


class TestReportVerb:
    def test_render_stored_task_report(self, suite_dir, tmp_path, capsys):
        run(
            "eval-tasks", "--suite", suite_dir / "scenes" / "suite.json",
            "--backend", "oracle", "--out", tmp_path,
        )
        capsys.readouterr()
        code = run("report", "--from", tmp_path / "summary.json", "--format", "csv")
        assert code == 0
        assert "average_success,1" in capsys.readouterr().out


class TestErrors:
    def test_unknown_verb_exits_two(self, capsys):
        assert run("frobnicate") == 2

    def test_missing_file_single_line_error(self, tmp_path, capsys):
        code = run("eval-skills", "--dataset", tmp_path / "nope.jsonl", "--out", tmp_path)
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("error:") and "\n" not in err

    def test_http_backend_requires_endpoint(self, suite_dir, tmp_path, capsys):
        code = run(
            "eval-tasks", "--suite", suite_dir / "scenes" / "suite.json",
            "--backend", "http", "--out", tmp_path,
        )
        assert code == 1
        assert "base-url" in capsys.readouterr().err

    def test_config_file_provides_defaults(self, suite_dir, tmp_path):
        config = tmp_path / "euea.yaml"
        config.write_text("backend: oracle\n")
        code = run(
            "--config", config, "eval-tasks",
            "--suite", suite_dir / "scenes" / "suite.json", "--out", tmp_path / "o",
        )
        assert code == 0

    def test_unknown_config_key_rejected(self, suite_dir, tmp_path, capsys):
        config = tmp_path / "euea.yaml"
        config.write_text("backnd: oracle\n")
        code = run(
            "--config", config, "eval-tasks",
            "--suite", suite_dir / "scenes" / "suite.json", "--out", tmp_path / "o",
        )
        assert code == 1
        assert "backnd" in capsys.readouterr().err


class TestReplayability:
    def test_oracle_rerun_reproduces_outputs(self, suite_dir, tmp_path):
        for name in ("r1", "r2"):
            code = run(
                "eval-tasks", "--suite", suite_dir / "scenes" / "suite.json",
                "--backend", "oracle", "--seed", 9, "--out", tmp_path / name,
            )
            assert code == 0
        for rel in ("summary.json", "run.json", "transcripts/index.jsonl"):
            assert (tmp_path / "r1" / rel).read_bytes() == (tmp_path / "r2" / rel).read_bytes()


class TestRewardScales:
    def test_scale_table_loading(self, tmp_path):
        from euea.cli import load_reward_scales
        from euea.core import SkillKind

        table = tmp_path / "scales.yaml"
        table.write_text("OD: [0.0, 2.0]\n")
        scales = load_reward_scales(str(table))
        assert scales[SkillKind.OD].r_max == 2.0
        assert scales[SkillKind.OR].r_max == 1.0  # untouched default

    def test_bad_scale_rejected(self, tmp_path):
        from euea.cli import ConfigError, load_reward_scales

        table = tmp_path / "scales.yaml"
        table.write_text("OD: [1.0, 1.0]\n")
        with pytest.raises(ConfigError):
            load_reward_scales(str(table))
