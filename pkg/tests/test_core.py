import pytest
from hypothesis import given, strategies as st

from euea.core import (
    Action,
    ActionChoice,
    ActionKind,
    ActionResult,
    BoundingBox,
    Frame,
    GoalCondition,
    Heading,
    Memory,
    MemoryStep,
    ObjectRef,
    Pose,
    SkillInstance,
    SkillKind,
    Split,
    Subgoal,
    SubgoalPhase,
    Task,
    TaskType,
    memory_window,
    skill_output_from_dict,
)

names = st.from_regex(r"[A-Za-z][A-Za-z0-9]{0,9}", fullmatch=True)


@st.composite
def boxes(draw):
    x0 = draw(st.integers(0, 62))
    y0 = draw(st.integers(0, 62))
    x1 = draw(st.integers(x0 + 1, 64))
    y1 = draw(st.integers(y0 + 1, 64))
    return BoundingBox(x0, y0, x1, y1)


def make_frame(seed: int = 0, size: int = 4) -> Frame:
    pixels = bytes((seed + i) % 256 for i in range(3 * size * size))
    return Frame.from_pixels(size, size, pixels)


def make_step(t: int, kind=ActionKind.MOVE_AHEAD, result=ActionResult.SUCCEEDED) -> MemoryStep:
    if kind.is_navigation:
        action, bbox = Action(kind), None
    else:
        action, bbox = Action(kind, ObjectRef("Apple")), BoundingBox(1, 1, 5, 5)
    return MemoryStep(
        step_index=t,
        frame=make_frame(t),
        visible=frozenset({ObjectRef("Apple"), ObjectRef("Table")}),
        pose=Pose(1, 2, Heading.EAST),
        action=action,
        bbox=bbox,
        result=result,
        subgoal=Subgoal("go to the Apple", SubgoalPhase.NAVIGATION, 1),
    )


def make_task() -> Task:
    return Task(
        TaskType.PICK,
        "put a Apple on the Table",
        (GoalCondition("object_in_receptacle", ObjectRef("Apple", "1"), ObjectRef("Table", "1")),),
    )


def make_memory(n: int) -> Memory:
    return Memory(goal=make_task(), steps=tuple(make_step(t) for t in range(1, n + 1)))


class TestInvariants:
    def test_box_rejects_degenerate(self):
        with pytest.raises(ValueError):
            BoundingBox(5, 5, 5, 10)
        with pytest.raises(ValueError):
            BoundingBox(-1, 0, 4, 4)

    def test_box_area(self):
        assert BoundingBox(0, 0, 10, 10).area == 100

    def test_navigation_action_takes_no_target(self):
        with pytest.raises(ValueError):
            Action(ActionKind.MOVE_AHEAD, ObjectRef("Apple"))
        with pytest.raises(ValueError):
            Action(ActionKind.PICKUP_OBJECT)

    def test_memory_indices_contiguous(self):
        with pytest.raises(ValueError):
            Memory(goal=make_task(), steps=(make_step(2),))

    def test_step_bbox_matches_kind(self):
        with pytest.raises(ValueError):
            MemoryStep(
                step_index=1,
                frame=make_frame(),
                visible=frozenset(),
                pose=Pose(0, 0, Heading.NORTH),
                action=Action(ActionKind.PICKUP_OBJECT, ObjectRef("Apple")),
                bbox=None,
                result=ActionResult.FAILED,
                subgoal=Subgoal("x", SubgoalPhase.INTERACTION, 1),
            )

    def test_frame_length_checked(self):
        with pytest.raises(ValueError):
            Frame.from_pixels(4, 4, b"\x00" * 10)

    def test_instance_frame_arity(self):
        with pytest.raises(ValueError):
            SkillInstance(
                id="x",
                kind=SkillKind.AG,
                prompt_text="p",
                frames=(make_frame(),),
                ground_truth=ActionChoice(ActionKind.MOVE_AHEAD),
                scene_id="s",
                split=Split.TRAIN,
            )


class TestMemoryWindow:
    def test_full_window_exactly_fits(self):
        mem = make_memory(10)
        window = memory_window(mem, 5, 4)
        assert [s.step_index for s in window] == [1, 2, 3, 4]

    def test_no_history_at_start(self):
        assert memory_window(make_memory(10), 1, 4) == ()

    def test_window_near_end(self):
        # indices enumerated by hand: [max(1, 10-4), 9] = 6..9
        window = memory_window(make_memory(10), 10, 4)
        assert [s.step_index for s in window] == [6, 7, 8, 9]

    @given(st.integers(0, 12), st.integers(1, 11))
    def test_window_bounds(self, k, t):
        mem = make_memory(10)
        window = memory_window(mem, t, k)
        assert len(window) <= k
        assert all(s.step_index < t for s in window)


class TestFrames:
    def test_hash_tracks_content(self):
        a, b = make_frame(0), make_frame(1)
        assert a.hash != b.hash
        assert make_frame(0).hash == a.hash

    def test_png_round_trip(self, tmp_path):
        frame = make_frame(7, size=16)
        frame.save_png(tmp_path / "f.png")
        back = Frame.load_png(tmp_path / "f.png")
        assert back == frame


class TestSerialization:
    @given(boxes())
    def test_box_round_trip(self, box):
        assert BoundingBox.from_dict(box.to_dict()) == box

    @given(names, st.one_of(st.none(), names))
    def test_object_ref_round_trip(self, name, instance):
        ref = ObjectRef(name, instance)
        assert ObjectRef.from_dict(ref.to_dict()) == ref

    def test_memory_round_trip_inline_frames(self):
        mem = make_memory(3)
        assert Memory.from_dict(mem.to_dict()) == mem

    def test_memory_round_trip_via_store(self, tmp_path):
        from euea.core import FrameStore

        store = FrameStore(tmp_path)
        mem = make_memory(2)
        data = mem.to_dict(store)
        assert Memory.from_dict(data, store) == mem

    def test_task_round_trip(self):
        task = make_task()
        assert Task.from_dict(task.to_dict()) == task

    def test_skill_instance_round_trip(self):
        inst = SkillInstance(
            id="i1",
            kind=SkillKind.SAP,
            prompt_text="prompt",
            frames=(make_frame(),),
            ground_truth=ActionChoice(ActionKind.PICKUP_OBJECT, "Apple"),
            scene_id="s",
            split=Split.EVAL,
        )
        assert SkillInstance.from_dict(inst.to_dict()) == inst

    def test_output_variant_tagging(self):
        out = ActionChoice(ActionKind.MOVE_AHEAD)
        assert skill_output_from_dict(out.to_dict()) == out
