"""Acceptance: the embedding contract plus live integration with the harness."""

import math
import socket
import threading
import time
from contextlib import contextmanager

import httpx
import pytest
import uvicorn

from embed_service import create_app


@contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {label}")
        raise
    print(f"[PASS] criterion {number}: {label}")


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def live_server():
    port = _free_port()
    config = uvicorn.Config(create_app(), host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 10
    while time.monotonic() < deadline:
        try:
            if httpx.get(base + "/health", timeout=1.0).status_code == 200:
                break
        except httpx.HTTPError:
            time.sleep(0.05)
    else:
        raise RuntimeError("embed service did not come up")
    yield base
    server.should_exit = True
    thread.join(timeout=5)


TRIPLET = (
    "put the apple on the table",
    "place the apple onto the table",
    "quantum chromodynamics lecture notes",
)


def test_criterion_9_embed_service_contract(live_server):
    with criterion(9, "embed service: unit vectors, determinism, ordering, live planning metric"):
        with httpx.Client(base_url=live_server, timeout=5.0) as client:
            first = client.post("/embed", json={"texts": list(TRIPLET)}).json()["vectors"]
            second = client.post("/embed", json={"texts": list(TRIPLET)}).json()["vectors"]
            assert first == second
            for v in first:
                assert abs(math.sqrt(sum(x * x for x in v)) - 1.0) < 1e-6

            self_pair = client.post(
                "/embed", json={"texts": [TRIPLET[0], TRIPLET[0]]}
            ).json()["vectors"]
            self_cos = sum(a * b for a, b in zip(*self_pair))
            assert abs(self_cos - 1.0) < 1e-6

            base, paraphrase, unrelated = first
            cos_para = sum(a * b for a, b in zip(base, paraphrase))
            cos_unrel = sum(a * b for a, b in zip(base, unrelated))
            assert cos_para > cos_unrel

        # the harness's planning metric, end to end against the live service
        from euea.evaluation import EmbedClient, PlanningSimilarity

        similarity = PlanningSimilarity(EmbedClient(live_server))
        live_para = similarity(TRIPLET[0], TRIPLET[1])
        live_unrel = similarity(TRIPLET[0], TRIPLET[2])
        assert similarity.mode == "embedding"
        assert live_para > live_unrel
        assert similarity(TRIPLET[0], TRIPLET[0]) == pytest.approx(1.0, abs=1e-6)


def test_live_planning_metric_over_dataset(live_server):
    """evaluate_skills consumes the service for STP instances."""
    from euea.backends import EchoBackend
    from euea.core import SkillKind, Split, TaskType
    from euea.datasets import build_skill_dataset, expert_trajectory
    from euea.evaluation import EmbedClient, evaluate_skills
    from euea.scenes import generate_scene

    items = [generate_scene(f"emb_{t.value}", t, seed=90) for t in TaskType]
    trajectories = [expert_trajectory(i.scene, i.task) for i in items]
    dataset = build_skill_dataset(trajectories, {SkillKind.STP}, Split.EVAL)
    report = evaluate_skills(dataset, EchoBackend(dataset), EmbedClient(live_server))
    assert report.planning_mode == "embedding"
    assert report.means["planning"] == pytest.approx(1.0, abs=1e-6)
    assert report.counts["planning"] == len(dataset)
