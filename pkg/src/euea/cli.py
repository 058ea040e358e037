"""Command-line entry point wiring scenes, episodes, datasets, rewards, and reports."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from .backends import (
    Corruption,
    EchoBackend,
    FaultRule,
    FaultSchedule,
    FixedTextBackend,
    HttpBackend,
    SimOracleBackend,
)
from .core import FrameStore, SkillKind, Split, canonical_json
from .datasets import (
    GrpoFilterConfig,
    build_skill_dataset,
    expert_trajectory,
    filter_grpo,
    random_exploration,
    read_instances,
    read_trajectories,
    split_scenes,
    write_instances,
    write_jsonl,
    write_trajectories,
)
from .evaluation import EmbedClient, TaskReport, evaluate_skills, evaluate_tasks
from .prompts import load_templates
from .rewards import reward_text
from .runtime import AgentConfig
from .scenes import SuiteItem, generate_suite

ENV_PREFIX = "EUEA_"
_MAX_FAULT_SUBGOALS = 64


class UsageError(ValueError):
    """Unknown verb or malformed flags."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_KNOWN_CONFIG_KEYS = {
    "backend", "base_url", "model", "api_key", "templates", "embedder",
    "seed", "k", "n", "max_steps", "scales", "log_requests", "workers",
}
_PATH_CONFIG_KEYS = ("templates", "scales")


class HarnessConfig:
    """Validated key-value configuration merged under environment and flags."""

    def __init__(self, values: dict[str, Any]) -> None:
        unknown = set(values) - _KNOWN_CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in _PATH_CONFIG_KEYS:
            if values.get(key) and not Path(values[key]).exists():
                raise ConfigError(f"config path for {key!r} does not exist: {values[key]}")
        for key, minimum in (("k", 0), ("n", 1), ("max_steps", 1)):
            if values.get(key) is not None and int(values[key]) < minimum:
                raise ConfigError(f"config key {key!r} must be >= {minimum}")
        self.values = values

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @classmethod
    def load(cls, path: str | None) -> "HarnessConfig":
        if path is None:
            return cls({})
        import yaml

        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with p.open(encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls(data)


def load_reward_scales(path: str) -> dict[SkillKind, "RewardScale"]:
    """Reward-scale table: {"OD": [0.0, 1.0], ...}; missing kinds keep defaults."""
    from .rewards import DEFAULT_SCALES, RewardScale

    import yaml

    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    scales = dict(DEFAULT_SCALES)
    for name, bounds in raw.items():
        try:
            kind = SkillKind(name)
            lo, hi = float(bounds[0]), float(bounds[1])
        except (ValueError, TypeError, IndexError) as exc:
            raise ConfigError(f"bad reward scale entry {name!r}: {exc}") from exc
        if hi <= lo:
            raise ConfigError(f"reward scale for {name} has no range")
        scales[kind] = RewardScale(lo, hi)
    return scales


def _merged_option(args: argparse.Namespace, config: HarnessConfig, key: str, env_key: str | None = None):
    """Precedence: config file < environment < flags."""
    value = config.get(key)
    if env_key:
        env_value = os.environ.get(ENV_PREFIX + env_key)
        if env_value is not None:
            value = env_value
    flag_value = getattr(args, key, None)
    if flag_value is not None:
        value = flag_value
    return value


def _agent_config(args: argparse.Namespace, config: HarnessConfig) -> AgentConfig:
    return AgentConfig(
        memory_window=int(_merged_option(args, config, "k") or 4),
        recovery_samples=int(_merged_option(args, config, "n") or 10),
        recovery_enabled=not getattr(args, "no_recovery", False),
        env_feedback=getattr(args, "env_feedback", False),
        max_steps=int(_merged_option(args, config, "max_steps") or 80),
    )


def _make_backend_factory(
    args: argparse.Namespace, config: HarnessConfig, instances=None
) -> Callable[[], Any]:
    kind = _merged_option(args, config, "backend") or "oracle"
    templates_path = _merged_option(args, config, "templates")
    templates = load_templates(templates_path) if templates_path else None
    if kind == "oracle":
        if instances is not None:
            echo = EchoBackend(instances)
            return lambda: echo
        schedule = FaultSchedule()
        if getattr(args, "fault_wrongbox_first", False):
            schedule = FaultSchedule(
                tuple(
                    FaultRule(i, 1, Corruption.WRONG_BOX)
                    for i in range(1, _MAX_FAULT_SUBGOALS + 1)
                )
            )
        return lambda: SimOracleBackend(schedule=schedule, templates=templates)
    if kind == "http":
        base_url = _merged_option(args, config, "base_url", env_key="BASE_URL")
        model = _merged_option(args, config, "model", env_key="MODEL")
        api_key = _merged_option(args, config, "api_key", env_key="API_KEY")
        if not base_url or not model:
            raise ConfigError("http backend needs --base-url and --model")
        log_requests = _merged_option(args, config, "log_requests")
        return lambda: HttpBackend(
            base_url=base_url, model=model, api_key=api_key,
            log_path=Path(log_requests) if log_requests else None,
        )
    if kind.startswith("fixed:"):
        text = kind.split(":", 1)[1]
        return lambda: FixedTextBackend(text)
    raise ConfigError(f"unknown backend kind: {kind}")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(getattr(args, "out", None) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_record(out: Path, verb: str, args: argparse.Namespace) -> None:
    # the output directory is where this record lives; only semantic inputs
    # belong in it, so reruns into a fresh directory stay byte-identical
    options = {
        key: value
        for key, value in sorted(vars(args).items())
        if key not in ("func", "verb", "out", "config") and value is not None
    }
    (out / "run.json").write_text(
        canonical_json({"verb": verb, "options": options}) + "\n", encoding="utf-8"
    )


def _load_suite(path: str) -> list[SuiteItem]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"suite file not found: {p}")
    data = json.loads(p.read_text(encoding="utf-8"))
    return [SuiteItem.from_dict(d) for d in data]


def _parse_kinds(raw: str | None) -> set[SkillKind]:
    if not raw or raw.lower() == "all":
        return set(SkillKind)
    try:
        return {SkillKind(name.strip()) for name in raw.split(",") if name.strip()}
    except ValueError as exc:
        raise ConfigError(f"unknown skill kind in --kinds: {exc}") from exc


# ---------------------------------------------------------------------------
# Verbs


def _cmd_gen_scenes(args, config) -> int:
    out = _out_dir(args)
    suite = generate_suite(
        count_per_type=args.count_per_type,
        seed=int(_merged_option(args, config, "seed") or 0),
        grid=args.grid,
    )
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    (scenes_dir / "suite.json").write_text(
        canonical_json([item.to_dict() for item in suite]) + "\n", encoding="utf-8"
    )
    _write_run_record(out, "gen-scenes", args)
    print(f"wrote {len(suite)} scene/task pairs to {scenes_dir / 'suite.json'}")
    return 0


def _cmd_explore(args, config) -> int:
    out = _out_dir(args)
    suite = _load_suite(args.suite)
    seen: set[str] = set()
    trajectories = []
    seed = int(_merged_option(args, config, "seed") or 0)
    for item in suite:
        if item.scene.scene_id in seen:
            continue
        seen.add(item.scene.scene_id)
        trajectories.extend(
            random_exploration(item.scene, args.episodes, args.steps, seed=seed)
        )
    dataset_dir = out / "datasets"
    store = FrameStore(dataset_dir)
    write_trajectories(trajectories, dataset_dir / "exploration.jsonl", store)
    _write_run_record(out, "explore", args)
    print(f"wrote {len(trajectories)} exploration trajectories")
    return 0


def _cmd_run_agent(args, config) -> int:
    out = _out_dir(args)
    suite = _load_suite(args.suite)
    factory = _make_backend_factory(args, config)
    agent_config = _agent_config(args, config)
    report, results = evaluate_tasks(
        suite, factory, agent_config, workers=args.workers,
        rng_seed=int(_merged_option(args, config, "seed") or 0),
    )
    transcripts = out / "transcripts"
    store = FrameStore(transcripts)
    index = []
    for i, (item, result) in enumerate(zip(suite, results)):
        rel = f"episode_{i:04d}.jsonl"
        result.write_transcript(transcripts / rel, store)
        index.append({"episode": i, "scene_id": item.scene.scene_id, **result.to_summary()})
    write_jsonl(index, transcripts / "index.jsonl")
    (out / "summary.json").write_text(canonical_json(report.to_dict()) + "\n", encoding="utf-8")
    _write_run_record(out, "run-agent", args)
    print(report.render_markdown())
    return 0


def _cmd_build_dataset(args, config) -> int:
    out = _out_dir(args)
    dataset_dir = out / "datasets"
    store = FrameStore(dataset_dir)
    kinds = _parse_kinds(args.kinds)
    seed = int(_merged_option(args, config, "seed") or 0)

    trajectories = []
    if args.trajectories:
        for path in args.trajectories:
            in_store = FrameStore(Path(path).parent)
            trajectories.extend(read_trajectories(Path(path), in_store))
    if args.suite:
        for item in _load_suite(args.suite):
            trajectories.append(expert_trajectory(item.scene, item.task))
    if not trajectories:
        raise ConfigError("build-dataset needs --trajectories and/or --suite")

    stats: dict[str, Any] = {"kind_counts": {}, "splits": {}}
    if args.holdout is not None:
        scene_ids = sorted({tr.scene_id for tr in trajectories})
        train_ids, eval_ids = split_scenes(scene_ids, args.holdout, seed)
        groups = {
            Split.TRAIN: [tr for tr in trajectories if tr.scene_id in set(train_ids)],
            Split.EVAL: [tr for tr in trajectories if tr.scene_id in set(eval_ids)],
        }
    else:
        groups = {Split(args.split): list(trajectories)}

    for split, trs in groups.items():
        if not trs:
            continue
        instances = build_skill_dataset(trs, kinds, split, k=args.k)
        per_kind: dict[SkillKind, list] = {}
        for inst in instances:
            per_kind.setdefault(inst.kind, []).append(inst)
        for kind, insts in sorted(per_kind.items(), key=lambda kv: kv[0].value):
            name = f"{kind.value.lower()}_{split.value.lower()}.jsonl"
            write_instances(insts, dataset_dir / name, store)
            stats["kind_counts"][f"{kind.value}/{split.value}"] = len(insts)
        stats["splits"][split.value] = len(instances)

    failed = sum(
        1 for tr in trajectories for s in tr.steps.steps if s.result.value == "Failed"
    )
    total = sum(len(tr.steps) for tr in trajectories)
    stats["step_failure_rate"] = failed / total if total else 0.0
    (dataset_dir / "stats.json").write_text(canonical_json(stats) + "\n", encoding="utf-8")
    _write_run_record(out, "build-dataset", args)
    print(canonical_json(stats))
    return 0


def _cmd_grpo_filter(args, config) -> int:
    out = _out_dir(args)
    dataset_path = Path(args.dataset)
    store = FrameStore(dataset_path.parent)
    instances = read_instances(dataset_path, store)
    factory = _make_backend_factory(args, config, instances=instances)
    scales_path = _merged_option(args, config, "scales")
    if scales_path:
        filter_config = GrpoFilterConfig(
            samples_per_instance=args.samples, tau=args.tau, temperature=args.temperature,
            scales=load_reward_scales(scales_path),
        )
    else:
        filter_config = GrpoFilterConfig(
            samples_per_instance=args.samples, tau=args.tau, temperature=args.temperature
        )
    selected, stats = filter_grpo(instances, factory(), reward_text, filter_config)
    if args.cap is not None and len(selected) > args.cap:
        by_std = {s.instance_id: s.normalized_std for s in stats}
        selected = sorted(selected, key=lambda i: -by_std[i.id])[: args.cap]
        keep = {i.id for i in selected}
        selected = [i for i in instances if i.id in keep]
    dataset_dir = out / "datasets"
    out_store = FrameStore(dataset_dir)
    write_instances(selected, dataset_dir / "grpo_selected.jsonl", out_store)
    histogram: dict[int, int] = {}
    for s in stats:
        histogram[s.correct_count] = histogram.get(s.correct_count, 0) + 1
    payload = {
        "selected": len(selected),
        "total": len(instances),
        "tau": args.tau,
        "correct_count_histogram": {str(k): v for k, v in sorted(histogram.items())},
        "stats": [s.to_dict() for s in stats],
    }
    (dataset_dir / "grpo_stats.json").write_text(canonical_json(payload) + "\n", encoding="utf-8")
    _write_run_record(out, "grpo-filter", args)
    print(f"selected {len(selected)} of {len(instances)} instances")
    return 0


def _cmd_grpo_reward(args, config) -> int:
    out = _out_dir(args)
    dataset_path = Path(args.dataset)
    store = FrameStore(dataset_path.parent)
    instances = {inst.id: inst for inst in read_instances(dataset_path, store)}
    rows = []
    with Path(args.responses).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            inst = instances.get(record["instance_id"])
            if inst is None:
                raise ConfigError(f"no instance with id {record['instance_id']!r}")
            breakdown = reward_text(inst, record["response_text"])
            rows.append({"instance_id": inst.id, **breakdown.to_dict()})
    reports = out / "reports"
    write_jsonl(rows, reports / "rewards.jsonl")
    _write_run_record(out, "grpo-reward", args)
    print(f"scored {len(rows)} responses")
    return 0


def _cmd_eval_skills(args, config) -> int:
    out = _out_dir(args)
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    store = FrameStore(dataset_path.parent)
    instances = read_instances(dataset_path, store)
    factory = _make_backend_factory(args, config, instances=instances)
    embedder_url = _merged_option(args, config, "embedder", env_key="EMBEDDER")
    embedder = EmbedClient(embedder_url) if embedder_url else None
    report = evaluate_skills(instances, factory(), embedder)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "skill_report.json").write_text(
        canonical_json(report.to_dict()) + "\n", encoding="utf-8"
    )
    (reports / "skill_report.md").write_text(report.render_markdown() + "\n", encoding="utf-8")
    (reports / "skill_report.csv").write_text(report.render_csv() + "\n", encoding="utf-8")
    _write_run_record(out, "eval-skills", args)
    print(report.render_markdown())
    return 0


def _cmd_eval_tasks(args, config) -> int:
    return _cmd_run_agent(args, config)


def _cmd_report(args, config) -> int:
    path = Path(getattr(args, "from_path"))
    if not path.exists():
        raise ConfigError(f"report file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if "per_type_success" in data:
        from fractions import Fraction

        report = TaskReport(
            per_type_success={k: Fraction(v).limit_denominator(10**9)
                              for k, v in data["per_type_success"].items()},
            per_type_counts=data["per_type_counts"],
            average_success=Fraction(data["average_success"]).limit_denominator(10**9),
            average_goal_condition=Fraction(
                data["average_goal_condition"]
            ).limit_denominator(10**9),
            episodes=data["episodes"],
            failures=data["failures"],
            recoveries_attempted=data["recoveries_attempted"],
            recoveries_succeeded=data["recoveries_succeeded"],
        )
        print(report.render_csv() if args.format == "csv" else report.render_markdown())
    elif "means" in data:
        from .evaluation import SkillReport

        report = SkillReport(
            means=data["means"], counts=data["counts"],
            planning_mode=data.get("planning_mode", "token_overlap"),
        )
        print(report.render_csv() if args.format == "csv" else report.render_markdown())
    else:
        raise ConfigError(f"{path} is not a recognized report file")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="euea", description="Embodied-agent skill harness"
    )
    parser.add_argument("--config", help="YAML config file (lowest precedence)")
    sub = parser.add_subparsers(dest="verb")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--templates", help="alternate prompt template file")

    p = sub.add_parser("gen-scenes", help="generate achievable scene/task suites")
    common(p)
    p.add_argument("--count-per-type", type=int, default=10)
    p.add_argument("--grid", type=int, default=7)
    p.set_defaults(func=_cmd_gen_scenes)

    p = sub.add_parser("explore", help="random exploration trajectories")
    common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--steps", type=int, default=30)
    p.set_defaults(func=_cmd_explore)

    for verb in ("run-agent", "eval-tasks"):
        p = sub.add_parser(verb, help="run instruction-following episodes")
        common(p)
        p.add_argument("--suite", required=True)
        p.add_argument("--backend", default=None)
        p.add_argument("--base-url", dest="base_url")
        p.add_argument("--model")
        p.add_argument("--api-key", dest="api_key")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-recovery", dest="no_recovery", action="store_true")
        p.add_argument("--env-feedback", dest="env_feedback", action="store_true")
        p.add_argument(
            "--fault-wrongbox-first", dest="fault_wrongbox_first", action="store_true",
            help="oracle answers a wrong box on each subgoal's first attempt",
        )
        p.add_argument("--log-requests", dest="log_requests", default=None,
                       help="JSONL file recording http request/response pairs")
        p.set_defaults(func=_cmd_run_agent if verb == "run-agent" else _cmd_eval_tasks)

    p = sub.add_parser("build-dataset", help="emit skill datasets from trajectories")
    common(p)
    p.add_argument("--trajectories", nargs="*", default=[])
    p.add_argument("--suite", help="also derive expert trajectories from this suite")
    p.add_argument("--kinds", default="all")
    p.add_argument("--split", default="Train", choices=[s.value for s in Split])
    p.add_argument("--holdout", type=float, default=None)
    p.add_argument("--k", type=int, default=4)
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("grpo-filter", help="variance-filter instances for refinement")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", default=None)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--api-key", dest="api_key")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.2)
    p.add_argument("--temperature", type=float, default=0.7)
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--scales", default=None, help="reward-scale table (YAML)")
    p.set_defaults(func=_cmd_grpo_filter)

    p = sub.add_parser("grpo-reward", help="score a response file against a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--responses", required=True)
    p.set_defaults(func=_cmd_grpo_reward)

    p = sub.add_parser("eval-skills", help="skill benchmark over a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", default=None)
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model")
    p.add_argument("--api-key", dest="api_key")
    p.add_argument("--embedder", default=None)
    p.set_defaults(func=_cmd_eval_skills)

    p = sub.add_parser("report", help="render a stored report")
    common(p)
    p.add_argument("--from", dest="from_path", required=True)
    p.add_argument("--format", choices=["md", "csv"], default="md")
    p.set_defaults(func=_cmd_report)

    return parser


def dispatch(argv: Sequence[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "verb", None):
        parser.print_help()
        return 2
    try:
        config = HarnessConfig.load(args.config)
        return args.func(args, config)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surfaced as a single machine-parseable line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
