import re
from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import answer_turn, make_image
from twirl.backends import HashEmbedder, ScriptedEmbedder, ScriptedJudge
from twirl.errors import BackendError, ConfigError
from twirl.filters import (
    FAIL,
    PASS,
    SKIPPED,
    FilterReport,
    FilterThresholds,
    Verdict,
    aggregate,
    check_think_format,
    detect_multiline_anomaly,
    detect_numeric_repetition,
    detect_phrase_repetition,
    detect_wait_tokens,
    extract_rectangles,
    iou,
    perceptual_similarity,
    reasoning_filter_pipeline,
    semantic_redundancy,
    summary_tsv,
    twi_filter_pipeline,
)
from twirl.protocol import ImageRef, render_tool_call

TH = FilterThresholds()


# ---------------------------------------------------------------- text detectors

def test_wait_tokens():
    assert detect_wait_tokens("wait " * 30).status == FAIL
    assert detect_wait_tokens("Assume x > 0. Wait, then x^2 > 0 follows directly from the definition.").status == PASS
    assert detect_wait_tokens("").status == PASS


def test_wait_tokens_window():
    cluster = "Hmm. Wait. Let me think."
    assert detect_wait_tokens(cluster).status == FAIL
    spread = (" filler text" * 30).join(["wait", "wait", "wait"])
    assert detect_wait_tokens(spread).status == PASS


def test_wait_tokens_are_whole_words():
    assert detect_wait_tokens("awaited " * 20 + "umbrella " * 20).status == PASS


def test_phrase_repetition():
    assert detect_phrase_repetition("the answer is clear " * 40).status == FAIL
    steps = "\n".join(f"Let x{i} = {i}. Then y = x{i} + {i}." for i in range(12))
    assert detect_phrase_repetition(steps).status == PASS
    assert detect_phrase_repetition("too short").status == PASS


def test_phrase_repetition_ignores_quoted_problem():
    problem = "count the red dots in the grid " * 12
    assert detect_phrase_repetition(problem + " so there are 4", problem=problem).status == PASS
    assert detect_phrase_repetition(f'"{problem}" so there are 4').status == PASS


def test_multiline_anomaly():
    assert detect_multiline_anomaly("\n".join(["word"] * 50)).status == FAIL
    items = "\n".join(f"{i}. Compute the partial sum for index {i} carefully." for i in range(8))
    assert detect_multiline_anomaly(items).status == PASS
    assert detect_multiline_anomaly("One paragraph of prose that keeps going.").status == PASS
    assert detect_multiline_anomaly("a long line of text here\n" + "\n" * 7 + "another long line of text").status == FAIL


def test_numeric_repetition():
    assert detect_numeric_repetition("1 2 3 " * 12).status == FAIL
    assert detect_numeric_repetition("1234 / 7 = 176 remainder 2; 176 * 7 = 1232; 1232 + 2 = 1234").status == PASS
    assert detect_numeric_repetition("no digits at all").status == PASS


def _numeric_oracle(nums, th):
    """Longest back-to-back repetition of any block of >= block_min numbers, by brute force."""
    best = 0
    for size in range(th.numeric_block_min, min(64, len(nums) // 2) + 1):
        for start in range(len(nums) - size + 1):
            block = nums[start : start + size]
            reps = 1
            while nums[start + reps * size : start + (reps + 1) * size] == block:
                reps += 1
            best = max(best, reps)
    return best > th.numeric_run_max


@settings(max_examples=150, deadline=None)
@given(
    prefix=st.lists(st.integers(0, 99), max_size=6),
    block=st.lists(st.integers(0, 99), min_size=3, max_size=5),
    reps=st.integers(1, 10),
    suffix=st.lists(st.integers(0, 99), max_size=6),
)
def test_numeric_repetition_matches_oracle(prefix, block, reps, suffix):
    nums = [str(x) for x in prefix + block * reps + suffix]
    got = detect_numeric_repetition(" ".join(nums)).failed
    assert got == _numeric_oracle(nums, TH)


def _ngram_oracle(text, th):
    words = re.findall(r"\w+", text.lower())
    grams = Counter(tuple(words[i : i + th.ngram_len]) for i in range(len(words) - th.ngram_len + 1))
    return bool(grams) and max(grams.values()) > th.ngram_repeat_max


@given(st.lists(st.sampled_from(["a", "b", "the", "x", "y"]), max_size=120))
def test_phrase_repetition_matches_oracle(words):
    text = " ".join(words)
    assert detect_phrase_repetition(text).failed == _ngram_oracle(text, TH)


# ---------------------------------------------------------------- threshold monotonicity

TEXT = st.lists(st.sampled_from(["a", "b", "1", "2", " ", "\n", "wait ", "hmm ", "the cat "]), max_size=150).map("".join)


@settings(max_examples=200, deadline=None)
@given(text=TEXT, shrink=st.integers(1, 5))
def test_tightening_never_unfails(text, shrink):
    tight = FilterThresholds(
        wait_token_max=max(1, TH.wait_token_max - shrink),
        ngram_repeat_max=max(1, TH.ngram_repeat_max - shrink),
        blankline_run_max=max(1, TH.blankline_run_max - shrink),
        empty_line_run_max=max(1, TH.empty_line_run_max - shrink),
        numeric_run_max=max(1, TH.numeric_run_max - shrink),
    )
    for fn in (detect_wait_tokens, detect_phrase_repetition, detect_multiline_anomaly, detect_numeric_repetition):
        if fn(text, TH).failed:
            assert fn(text, tight).failed, fn.__name__


@settings(max_examples=100, deadline=None)
@given(steps=st.lists(st.sampled_from(["alpha beta", "beta gamma", "alpha beta", "delta", "gamma delta eps"]), min_size=3, max_size=7),
       sim=st.floats(0.05, 0.99))
def test_similarity_tightening(steps, sim):
    e = HashEmbedder(64)
    if semantic_redundancy(steps, e, FilterThresholds(similarity_max=sim)).failed:
        assert semantic_redundancy(steps, e, FilterThresholds(similarity_max=sim * 0.9)).failed


# ---------------------------------------------------------------- semantic redundancy

def test_semantic_redundancy():
    e = HashEmbedder()
    dup = ["compute the area of the square", "now something else", "compute the area of the square"]
    assert semantic_redundancy(dup, e).status == FAIL
    orth = ScriptedEmbedder({"a": [1, 0, 0], "b": [0, 1, 0], "c": [0, 0, 1]})
    assert semantic_redundancy(["a", "b", "c"], orth).status == PASS
    para = ScriptedEmbedder({"p": [1.0, 0.0], "m": [0.0, 1.0], "q": [0.97, (1 - 0.97**2) ** 0.5]})
    assert semantic_redundancy(["p", "m", "q"], para).status == FAIL


def test_adjacent_duplicates_are_allowed():
    e = HashEmbedder()
    assert semantic_redundancy(["same step", "same step", "other words"], e).status == PASS


def test_embedder_failure_skips():
    class Down:
        def embed(self, texts):
            raise BackendError("io", "down")

    assert semantic_redundancy(["a", "b", "c"], Down()).status == SKIPPED
    assert semantic_redundancy(["a", "b", "c"], None).status == SKIPPED


# ---------------------------------------------------------------- trajectory-level

def test_think_format(run_script):
    assert check_think_format(run_script([answer_turn(4)])).status == PASS
    assert check_think_format(run_script(["<think>oops\nThe answer is 4", answer_turn(4)])).status == FAIL
    capped = run_script([render_tool_call("print(1)", think="t")] * 2, max_turns=1)
    assert check_think_format(capped).status == FAIL


def test_reasoning_pipeline_clean(run_script):
    traj = run_script([answer_turn(4, think="Count the rows.\n\nThere are two rows of two.\n\nSo four in total.")])
    report = reasoning_filter_pipeline(traj, HashEmbedder())
    assert report.overall == "keep", report.to_dict()
    assert set(report.verdicts) == {"wait_tokens", "phrase_repetition", "multiline_anomaly", "numeric_repetition", "think_format", "semantic_redundancy"}


def test_reasoning_pipeline_flags_fillers(run_script):
    traj = run_script([answer_turn(4, think="wait " * 20)])
    report = reasoning_filter_pipeline(traj)
    assert report.overall == "reject" and report.verdicts["wait_tokens"].failed


def _crop(rect, name, src="$IMAGE_0", think="zoom in"):
    code = f"from PIL import Image\nimport os\np = os.path.join(WORKDIR, '{name}.png')\nImage.open('{src}').crop({rect}).save(p)\nprint(p)"
    return render_tool_call(code, think=think)


def _blank(name):
    code = f"from PIL import Image\nimport os\np = os.path.join(WORKDIR, '{name}.png')\nImage.new('RGB', (64, 64), 'white').save(p)\nprint(p)"
    return render_tool_call(code, think="draw")


@pytest.fixture
def source(tmp_path):
    return ImageRef(str(make_image(tmp_path / "src.png", size=(256, 256), seed=5)), 256, 256)


def test_twi_clean_keep(run_script, source):
    traj = run_script([_crop((0, 0, 128, 128), "a"), _crop((128, 128, 256, 256), "b"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, ScriptedJudge(default=1.0))
    assert report.overall == "keep", report.to_dict()


def test_twi_blank_image_rejects(run_script, source):
    traj = run_script([_blank("w"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, ScriptedJudge(default=1.0))
    assert report.overall == "reject"
    assert report.verdicts["image_validity"].failed
    assert all(report.verdicts[d].status == SKIPPED for d in ("image_text_alignment", "key_information", "redundancy"))


def test_twi_identical_crop_rejects(run_script, source):
    traj = run_script([_crop((10, 10, 90, 90), "a"), _crop((10, 10, 90, 90), "b"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, ScriptedJudge(default=1.0))
    assert report.overall == "reject" and report.verdicts["redundancy"].failed
    assert "IoU 1.000" in report.verdicts["redundancy"].evidence


def test_twi_soft_failure_routes(run_script, source):
    traj = run_script([_crop((0, 0, 128, 128), "a"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, ScriptedJudge({"image_text_alignment": 0.1}))
    assert report.overall == "route_candidate"


def test_twi_format_short_circuits(run_script, source):
    traj = run_script([render_tool_call("x = (", think="bad code"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, ScriptedJudge())
    assert report.verdicts["format"].failed and report.overall == "reject"
    assert {v.status for d, v in report.verdicts.items() if d != "format"} == {SKIPPED}


def test_twi_judges_off(run_script, source):
    traj = run_script([_crop((0, 0, 128, 128), "a"), answer_turn(4)], images=[source])
    report = twi_filter_pipeline(traj, None)
    assert report.overall == "keep"
    for d in ("reasoning_answer_consistency", "image_text_alignment", "key_information"):
        assert report.verdicts[d].status == SKIPPED


def test_twi_filter_deterministic(run_script, source):
    traj = run_script([_crop((0, 0, 128, 128), "a"), answer_turn(4)], images=[source])
    j = ScriptedJudge({"image_text_alignment": 0.3})
    assert twi_filter_pipeline(traj, j).to_dict() == twi_filter_pipeline(traj, j).to_dict()


# ---------------------------------------------------------------- helpers

def test_extract_rectangles_and_iou():
    code = "img.crop((10, 20, 110, 220))\nbox = [0, 0, 5, 5]\nsize = (3, 3, 1, 1)"
    assert extract_rectangles(code) == [(10, 20, 110, 220), (0, 0, 5, 5)]
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (10, 10, 20, 20)) == 0.0
    assert iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(50 / 150)


@given(st.tuples(*[st.integers(0, 50)] * 4), st.tuples(*[st.integers(0, 50)] * 4))
def test_iou_symmetric_and_bounded(a, b):
    a = (min(a[0], a[2]), min(a[1], a[3]), max(a[0], a[2]) + 1, max(a[1], a[3]) + 1)
    b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]) + 1, max(b[1], b[3]) + 1)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0


def test_perceptual_similarity(tmp_path):
    a = make_image(tmp_path / "a.png", seed=1)
    b = make_image(tmp_path / "b.png", seed=2)
    assert perceptual_similarity(a, a) == pytest.approx(1.0)
    assert perceptual_similarity(a, b) < 0.5


def test_aggregate_rules():
    p, f = Verdict(PASS), Verdict(FAIL)
    assert aggregate({"format": p, "key_information": p}) == "keep"
    assert aggregate({"format": p, "key_information": f}) == "route_candidate"
    assert aggregate({"redundancy": f, "key_information": f}) == "reject"


def test_report_round_trip_and_summary():
    r = FilterReport("s", {"format": Verdict(PASS, "ok"), "redundancy": Verdict(FAIL, "dup")}, "reject")
    assert FilterReport.from_dict(r.to_dict()).to_dict() == r.to_dict()
    tsv = summary_tsv([r])
    assert "redundancy\t1\t0\t0" in tsv and "overall:reject\t1" in tsv


def test_thresholds_validation():
    with pytest.raises(ConfigError):
        FilterThresholds(ngram_len=0)
    with pytest.raises(ConfigError):
        FilterThresholds(similarity_max=1.5)
    with pytest.raises(ConfigError):
        FilterThresholds.from_dict({"unknown": 1})
    th = FilterThresholds.from_dict(replace(TH, wait_token_max=3).to_dict())
    assert th.wait_token_max == 3
