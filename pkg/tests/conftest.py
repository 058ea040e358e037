import pytest

from euea.core import TaskType
from euea.datasets import expert_trajectory
from euea.scenes import generate_scene


@pytest.fixture(scope="session")
def suite_one_per_type():
    return [generate_scene(f"fix_{tt.value.lower()}", tt, seed=41) for tt in TaskType]


@pytest.fixture(scope="session")
def expert_trajectories(suite_one_per_type):
    return [expert_trajectory(item.scene, item.task) for item in suite_one_per_type]


@pytest.fixture(scope="session")
def pick_item():
    return generate_scene("fix_pick_small", TaskType.PICK, seed=13)
