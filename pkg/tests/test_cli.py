import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import answer_turn
from twirl.cli import main
from twirl.corpus import read_jsonl
from twirl.protocol import render_tool_call


@pytest.fixture(autouse=True)
def no_endpoint_env(monkeypatch):
    for var in ("MODEL_ENDPOINT", "JUDGE_ENDPOINT", "EMBED_ENDPOINT", "API_KEY"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def small_corpus(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    replay = tmp_path / "replay.jsonl"
    rows, scripts = [], []
    for i in range(5):
        sid = f"s{i}"
        rows.append({"sample_id": sid, "question": f"q{i}", "gold": str(i)})
        turns = [render_tool_call(f"print({i})", think="t")] * i + [answer_turn(i)]
        scripts.append({"sample_id": sid, "turns": turns})
    corpus.write_text("".join(json.dumps(r) + "\n" for r in rows))
    replay.write_text("".join(json.dumps(r) + "\n" for r in scripts))
    return corpus, replay


def rollout(corpus, replay, out, *extra):
    return main(["rollout", str(corpus), "--backend", f"replay:{replay}", "--sandbox", "inprocess", "--out", str(out), *extra])


def test_rollout_k(small_corpus, tmp_path):
    corpus, replay = small_corpus
    assert rollout(corpus, replay, tmp_path / "out" / "t.jsonl", "--k", "3") == 0
    rows = list(read_jsonl(tmp_path / "out" / "t.jsonl"))
    assert len(rows) == 15
    assert {r["terminal"] for r in rows} == {"answered"}


def test_rollout_max_turns(small_corpus, tmp_path):
    corpus, replay = small_corpus
    assert rollout(corpus, replay, tmp_path / "t.jsonl", "--max-turns", "1") == 0
    assert all(r["n"] <= 1 for r in read_jsonl(tmp_path / "t.jsonl"))


def test_rollout_missing_out(small_corpus):
    corpus, replay = small_corpus
    with pytest.raises(SystemExit) as info:
        main(["rollout", str(corpus), "--backend", f"replay:{replay}"])
    assert info.value.code == 2


def test_rollout_unreadable_corpus(tmp_path, capsys):
    assert main(["rollout", str(tmp_path / "nope.jsonl"), "--backend", "replay:x", "--out", str(tmp_path / "o.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_rollout_unreachable_model(small_corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("MODEL_ENDPOINT", "http://127.0.0.1:9/v1")
    corpus, _ = small_corpus
    assert main(["rollout", str(corpus), "--backend", "http", "--out", str(tmp_path / "o.jsonl")]) == 3


def test_rollout_no_endpoint_is_config_error(small_corpus, tmp_path):
    corpus, _ = small_corpus
    assert main(["rollout", str(corpus), "--backend", "http", "--out", str(tmp_path / "o.jsonl")]) == 2


def test_rollout_rerun_byte_identical(small_corpus, tmp_path):
    corpus, replay = small_corpus
    out = tmp_path / "r" / "t.jsonl"
    rollout(corpus, replay, out, "--k", "2", "--sandbox", "subprocess")
    first = out.read_bytes()
    rollout(corpus, replay, out, "--k", "2", "--sandbox", "subprocess")
    assert out.read_bytes() == first


def _oracle_total(c, variant):
    if c["r_fmt"] == 0:
        return -1.0
    if variant == "hacked":
        return 0.5 * c["r_acc"] + 0.3 * c["r_con"] + 0.2 * c["r_tool"]
    if c["r_acc"] == 0:
        return 0.0
    return 0.5 * c["r_acc"] + 0.3 * c["r_con"] + 0.1 * c["r_tool"] + 0.1 * c["r_bonus"]


@pytest.fixture(scope="module")
def demo_rollout(tmp_path_factory, fixtures_dir=Path(__file__).resolve().parents[1] / "fixtures"):
    out = tmp_path_factory.mktemp("demo") / "t.jsonl"
    demo = fixtures_dir / "demo"
    code = main(["rollout", str(demo / "corpus.jsonl"), "--backend", f"replay:{demo / 'replay.jsonl'}", "--k", "4",
                 "--sandbox", "inprocess", "--out", str(out)])
    assert code == 0
    return out, demo


@pytest.mark.parametrize("variant", ["final", "hacked"])
def test_score_matches_oracle(demo_rollout, tmp_path, variant):
    traj, demo = demo_rollout
    out = tmp_path / "s.jsonl"
    assert main(["score", str(traj), "--variant", variant, "--judge-script", str(demo / "judges.jsonl"), "--out", str(out)]) == 0
    rows = list(read_jsonl(out))
    assert len(rows) == 80
    for r in rows:
        c = r["components"]
        if c["r_con"] is None:
            c = dict(c, r_con=0.0)  # gated rows skip the judges
        assert r["total"] == pytest.approx(_oracle_total(c, variant), abs=1e-12)


def test_hacked_differs_only_where_expected(demo_rollout, tmp_path):
    traj, demo = demo_rollout
    totals = {}
    for v in ("final", "hacked"):
        out = tmp_path / f"{v}.jsonl"
        main(["score", str(traj), "--variant", v, "--judge-script", str(demo / "judges.jsonl"), "--out", str(out)])
        totals[v] = {(r["sample_id"], r["replicate"]): r for r in read_jsonl(out)}
    direct = [k for k, r in totals["final"].items() if r["components"]["n"] == 0 and r["components"]["r_acc"] == 1]
    assert direct
    for k in direct:
        assert totals["hacked"][k]["total"] > totals["final"][k]["total"]


def test_score_scientific(demo_rollout, tmp_path):
    traj, _ = demo_rollout
    out = tmp_path / "sci.jsonl"
    assert main(["score", str(traj), "--variant", "scientific", "--judges", "off", "--out", str(out)]) == 0
    rows = list(read_jsonl(out))
    assert all(r["total"] is not None and 0.0 <= r["total"] <= 1.0 for r in rows)


def test_score_empty_input(tmp_path, capsys):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["score", str(empty), "--variant", "final"]) == 0
    assert capsys.readouterr().out == ""


def test_score_unknown_variant(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert main(["score", str(empty), "--variant", "other"]) == 2


def test_score_judges_off_flags_rows(demo_rollout, tmp_path):
    traj, _ = demo_rollout
    out = tmp_path / "s.jsonl"
    main(["score", str(traj), "--variant", "hacked", "--judges", "off", "--out", str(out)])
    rows = list(read_jsonl(out))
    assert all(r["total"] is None or r["components"]["r_fmt"] == 0 for r in rows)
    assert any("judge_missing" in f for r in rows for f in r["flags"])


def test_filter_planted_counts(fixtures_dir, tmp_path):
    planted = fixtures_dir / "planted"
    expected = json.loads((planted / "expected.json").read_text())
    out = tmp_path / "f.jsonl"
    assert main(["filter", str(planted / "twi.jsonl"), "--mode", "twi", "--judge-script", str(planted / "judges.jsonl"),
                 "--out", str(out)]) == 0
    summary = {row[0]: row[1:] for row in csv.reader(io.StringIO(out.with_suffix(".summary.tsv").read_text()), delimiter="\t")}
    hard = sum(v for k, v in expected["twi"].items() if k not in ("image_text_alignment", "key_information"))
    assert int(summary["overall:reject"][0]) == hard
    assert int(summary["overall:route_candidate"][0]) == expected["twi"]["image_text_alignment"] + expected["twi"]["key_information"]
    assert int(summary["overall:keep"][0]) == expected["clean"]


def test_route_outputs(demo_rollout, tmp_path):
    traj, demo = demo_rollout
    filtered = tmp_path / "f.jsonl"
    main(["filter", str(traj), "--mode", "twi", "--judge-script", str(demo / "judges.jsonl"), "--out", str(filtered)])
    assert main(["route", str(filtered), "--out-dir", str(tmp_path / "r")]) == 0
    twi = list(read_jsonl(tmp_path / "r" / "twi_sft.jsonl"))
    reasoning = list(read_jsonl(tmp_path / "r" / "reasoning_sft.jsonl"))
    assert twi and reasoning
    for row in reasoning:
        assert "<tool_call>" not in json.dumps(row["messages"])
        assert row["provenance"]["decision"] in ("keep_twi", "convert_reasoning")
    for row in twi + reasoning:
        assert sum(row["loss_mask"]) in (1, 2)


def test_route_requires_reports(demo_rollout, tmp_path):
    traj, _ = demo_rollout
    assert main(["route", str(traj), "--out-dir", str(tmp_path / "r")]) == 2


def test_stratify_rl_pool(fixtures_dir, tmp_path):
    out = tmp_path / "s"
    assert main(["stratify", str(fixtures_dir / "stratify" / "rollouts_k10.jsonl"), "--out-dir", str(out)]) == 0
    buckets = {b["sample_id"]: b for b in read_jsonl(out / "buckets.jsonl")}
    pool = [r["sample_id"] for r in read_jsonl(out / "rl_pool.jsonl")]
    assert pool == [sid for sid, b in sorted(buckets.items()) if b["pass_rate"] < 0.4] == ["hard-3of10"]
    sft = list(read_jsonl(out / "sft_pool.jsonl"))
    assert len(sft) == 3 + 4 + 8


def test_stratify_all_fail(fixtures_dir, tmp_path):
    out = tmp_path / "s"
    main(["stratify", str(fixtures_dir / "stratify" / "rollouts_k16.jsonl"), "--out-dir", str(out), "--mode", "all-fail"])
    buckets = {b["sample_id"]: b["bucket"] for b in read_jsonl(out / "buckets.jsonl")}
    assert buckets == {"none-0of16": "discard_all_fail", "some-5of16": "rl_hard"}


def test_simulate_hacked(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["simulate", "--variant", "hacked", "--steps", "3000", "--seed", "1", "--out", str(out)]) == 0
    last = out.read_text().strip().split("\n")[-1].split(",")
    assert int(np.argmax([float(x) for x in last[2:]])) == 0


def test_simulate_bad_variant():
    assert main(["simulate", "--variant", "nope"]) == 2


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[rollout]\nturns = 3\n")
    assert main(["simulate", "--config", str(cfg), "--steps", "1"]) == 2
