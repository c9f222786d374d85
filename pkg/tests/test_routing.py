import pytest
from hypothesis import given, settings, strategies as st

from conftest import answer_turn, save_image_call
from twirl.errors import AnnotationError, DomainError
from twirl.filters import FAIL, PASS, FilterReport, Verdict
from twirl.protocol import render_tool_call
from twirl.routing import annotate_loss_mask, assistant_mask, group_by_sample, route_sample, stratify, strip_tool_turns


def report(overall):
    status = {"keep": PASS, "route_candidate": FAIL, "reject": FAIL}[overall]
    dim = "redundancy" if overall == "reject" else "key_information"
    return FilterReport("s1", {dim: Verdict(status)}, overall)


def has_tool_blocks(traj) -> bool:
    text = "".join(m.text for m in traj.messages)
    return any(tag in text for tag in ("<tool_call>", "</tool_call>", "<tool_response>", "</tool_response>"))


def test_keep_is_identity(run_script):
    traj = run_script([save_image_call("a"), answer_turn(4)])
    routed = route_sample(traj, report("keep"))
    assert routed.decision == "keep_twi" and routed.converted_trajectory is traj


def test_convert_strips_tools(run_script):
    traj = run_script([
        save_image_call("a", think="Look at the left half first."),
        save_image_call("b", seed=2, think="Now the right half."),
        answer_turn(4, think="Two marks on each side."),
    ])
    routed = route_sample(traj, report("route_candidate"))
    assert routed.decision == "convert_reasoning"
    conv = routed.converted_trajectory
    assert not has_tool_blocks(conv)
    assert conv.final_answer == traj.final_answer
    assert conv.messages[-1].text.endswith(traj.final_answer)
    assert conv.n == 0 and [m.role for m in conv.messages] == ["system", "user", "assistant"]
    assert "Look at the left half first.\n\nNow the right half.\n\nTwo marks on each side." in conv.messages[-1].text


def test_degenerate_conversion_drops(run_script):
    traj = run_script([save_image_call("a", think=""), answer_turn(4, think="")])
    routed = route_sample(traj, report("route_candidate"))
    assert routed.decision == "drop" and routed.converted_trajectory is None


def test_reject_is_precondition_violation(run_script):
    with pytest.raises(DomainError):
        route_sample(run_script([answer_turn(4)]), report("reject"))


def test_conversion_idempotent(run_script):
    traj = run_script([save_image_call("a", think="a fairly long piece of reasoning"), answer_turn(4)])
    once = strip_tool_turns(traj)
    twice = route_sample(once, report("route_candidate")).converted_trajectory
    assert twice.to_dict() == once.to_dict()


@pytest.mark.parametrize(
    "tools,expected",
    [(3, [0, 0, 1, 1]), (0, [1]), (1, [1, 1])],
)
def test_loss_mask_positions(run_script, tools, expected):
    turns = [render_tool_call(f"print({i})", think="t") for i in range(tools)] + [answer_turn(4)]
    traj = annotate_loss_mask(run_script(turns))
    assert assistant_mask(traj) == expected
    # non-assistant messages are never supervised
    assert all(bit == 0 for bit, m in zip(traj.loss_mask, traj.messages) if m.role != "assistant")
    assert len(traj.loss_mask) == len(traj.messages)


def test_loss_mask_needs_answer(run_script):
    with pytest.raises(AnnotationError):
        annotate_loss_mask(run_script([render_tool_call("print(1)", think="t")] * 3, max_turns=2))


@settings(max_examples=25, deadline=None)
@given(tools=st.integers(0, 8), nudge=st.booleans())
def test_mask_popcount(tmp_path_factory, tools, nudge):
    from conftest import answer_turn as ans
    from twirl.backends.policy import ReplayPolicy
    from twirl.rollout import RolloutConfig, Sample, run_episode
    from twirl.sandbox import SandboxConfig, SandboxManager

    turns = [render_tool_call(f"print({i})", think="t") for i in range(tools)]
    if nudge:
        turns.insert(0, "<think>unclosed")
    turns.append(ans(4))
    m = SandboxManager(SandboxConfig(image_root=str(tmp_path_factory.mktemp("sb")), backend="inprocess"))
    traj = run_episode(Sample("p", "q", (), "4"), ReplayPolicy({"p": turns}), m, RolloutConfig(record_wall_time=False))
    bits = assistant_mask(annotate_loss_mask(traj))
    assert sum(bits) == (1 if tools == 0 else 2)
    assert bits[-1] == 1


# ---------------------------------------------------------------- stratify

def group(run_script, sid, passes, k):
    return [run_script([answer_turn(4 if r < passes else 5)], sample_id=sid) for r in range(k)]


def test_stratify_boundaries(run_script):
    hard = stratify(group(run_script, "h", 3, 10))
    assert (hard.bucket.bucket, hard.bucket.pass_rate, len(hard.correct)) == ("rl_hard", 0.3, 3)
    edge = stratify(group(run_script, "e", 4, 10))
    assert edge.bucket.bucket == "sft_pool" and edge.bucket.pass_rate == 0.4
    none = stratify(group(run_script, "n", 0, 16), mode="all_fail")
    assert none.bucket.bucket == "discard_all_fail"
    assert stratify(group(run_script, "n", 0, 16)).bucket.bucket == "rl_hard"


def test_stratify_errors(run_script):
    with pytest.raises(DomainError):
        stratify([])
    mixed = group(run_script, "a", 1, 1) + group(run_script, "b", 1, 1)
    with pytest.raises(DomainError):
        stratify(mixed)


@given(passes=st.integers(0, 16), extra=st.integers(0, 16), th=st.floats(0.05, 0.95))
def test_bucket_partition(passes, extra, th):
    from twirl.rollout import Trajectory

    k = passes + extra
    if k == 0:
        return
    trajs = [Trajectory("x", [], [], "answered", final_answer="4" if i < passes else "5", gold="4") for i in range(k)]
    for mode in ("curriculum", "all_fail"):
        b = stratify(trajs, hard_threshold=th, mode=mode).bucket
        assert b.pass_rate == passes / k
        if mode == "all_fail" and passes == 0:
            assert b.bucket == "discard_all_fail"
        else:
            assert (b.bucket == "rl_hard") == (passes / k < th)


def test_group_by_sample(run_script):
    trajs = group(run_script, "a", 1, 2) + group(run_script, "b", 1, 1)
    assert {k: len(v) for k, v in group_by_sample(trajs).items()} == {"a": 2, "b": 1}


def test_tool_free_conversion_swaps_prompt(run_script):
    traj = run_script([answer_turn(4, think="plain reasoning about the count")])
    conv = route_sample(traj, report("route_candidate")).converted_trajectory
    assert conv.messages[0].text == "You are a helpful assistant."
    assert conv.messages[1:] == traj.messages[1:]
    assert strip_tool_turns(conv) is conv
