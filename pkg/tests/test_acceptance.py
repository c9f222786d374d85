"""One test per acceptance criterion; each emits a PASS/FAIL line with its measurements."""

import random
import time

import mpmath

from conftest import FIXTURES, GOLDEN
from test_rollout import fuzz_violations, golden_episode, run_fuzz
from twirl.backends import HashEmbedder, ReplayJudge, ReplayPolicy
from twirl.cli import main
from twirl.corpus import read_jsonl
from twirl.filters import REASONING_DIMS, SOFT_DIMS, TWI_DIMS, reasoning_filter_pipeline, twi_filter_pipeline
from twirl.hacklab import Environment, ToyPolicy, analytic_argmax, expected_reward_table, simulate
from twirl.protocol import ImageRef, render_system_prompt, render_user_turn
from twirl.rewards import composite_reward, tool_efficiency_reward
from twirl.rollout import RolloutConfig, read_samples, read_trajectories, run_batch
from twirl.routing import annotate_loss_mask, assistant_mask, group_by_sample, route_sample, stratify
from twirl.sandbox import SandboxConfig, SandboxManager


def test_1_reward_closed_forms(acceptance_line):
    t0 = time.perf_counter()
    mpmath.mp.dps = 40
    worst, checked = 0.0, 0
    for n_max in range(2, 65):
        for n in range(2, n_max + 1):
            oracle = float(mpmath.mpf(1) / 2 * (1 + mpmath.cos((n - 1) * mpmath.pi / (n_max - 1))))
            worst = max(worst, abs(tool_efficiency_reward(n, n_max, "final") - oracle))
            checked += 1
    endpoints = all(
        tool_efficiency_reward(0, m) == 0.0 and tool_efficiency_reward(1, m) == 1.0 and abs(tool_efficiency_reward(m, m)) < 1e-15
        for m in range(2, 65)
    )
    # n = N_max evaluates 1/2 (1 + cos pi); treat the last-ulp residue as exact zero
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and endpoints and elapsed < 1.0
    acceptance_line(1, "reward closed forms", ok, f"{checked} cases, max err {worst:.2e}, endpoints {endpoints}, {elapsed:.3f}s")
    assert ok


def test_2_gate_semantics(acceptance_line):
    rng = random.Random(2024)
    bad = []
    for i in range(10_000):
        fmt, acc, bonus = rng.randint(0, 1), rng.randint(0, 1), rng.randint(0, 1)
        con = rng.random()
        tool = tool_efficiency_reward(rng.randint(0, 8), 8, "final")
        got = composite_reward(fmt, acc, con, tool, bonus, "final")
        if fmt == 0:
            want = -1.0
        elif acc == 0:
            want = 0.0
        else:
            want = 0.5 * acc + 0.3 * con + 0.1 * tool + 0.1 * bonus
        if abs(got - want) > 1e-12:
            bad.append((fmt, acc, con, tool, bonus, got, want))
    ok = not bad
    acceptance_line(2, "gate semantics", ok, f"10000 tuples, {len(bad)} mismatches")
    assert ok, bad[:5]


def test_3_reward_hacking_reproduction(acceptance_line):
    t0 = time.perf_counter()
    env = Environment()
    hacked, final = expected_reward_table(env, "hacked"), expected_reward_table(env, "final")
    tables_ok = analytic_argmax(env, "hacked") == 0 and analytic_argmax(env, "final") == 1
    hits = {}
    for variant in ("hacked", "final"):
        target = analytic_argmax(env, variant)
        hits[variant] = sum(simulate(ToyPolicy(), env, variant, 5000, seed=s).final_argmax == target for s in range(20))
    elapsed = time.perf_counter() - t0
    ok = tables_ok and min(hits.values()) >= 19 and elapsed < 30
    detail = (f"E[R|0..1] hacked {hacked[0]:.4f}/{hacked[1]:.4f}, final {final[0]:.4f}/{final[1]:.4f}; "
              f"converged hacked {hits['hacked']}/20 final {hits['final']}/20 at 5000 steps; {elapsed:.1f}s")
    acceptance_line(3, "reward hacking reproduction", ok, detail)
    assert ok


def test_4_rollout_loop(acceptance_line, tmp_path):
    t0 = time.perf_counter()
    trajs, manager = run_fuzz(tmp_path)
    violations = fuzz_violations(trajs, manager)
    first, second = golden_episode(tmp_path / "g1"), golden_episode(tmp_path / "g2")
    golden_ok = first == second == (GOLDEN / "replay_episode.jsonl").read_bytes()
    elapsed = time.perf_counter() - t0
    ok = len(trajs) == 1000 and not violations and golden_ok
    acceptance_line(4, "rollout loop", ok, f"{len(trajs)} fuzz episodes, {len(violations)} violations, golden identical {golden_ok}, {elapsed:.1f}s")
    assert ok, violations[:5]


def test_5_protocol_fidelity(acceptance_line):
    prompt = render_system_prompt()
    strings_ok = "time out after 60.0 seconds" in prompt and "print the path of the processed image" in prompt
    prompt_golden = prompt == (GOLDEN / "system_prompt.txt").read_text(encoding="utf-8")
    user = render_user_turn("What is shown?", [ImageRef("/mnt/data/images/demo.png", 640, 480)]).text
    user_golden = user == (GOLDEN / "user_turn.txt").read_text(encoding="utf-8")
    ok = strings_ok and prompt_golden and user_golden
    acceptance_line(5, "protocol fidelity", ok, f"strings {strings_ok}, system golden {prompt_golden}, user golden {user_golden}")
    assert ok


def test_6_filters_planted(acceptance_line):
    planted = FIXTURES / "planted"
    t0 = time.perf_counter()
    judge = ReplayJudge.from_jsonl(planted / "judges.jsonl")
    embedder = HashEmbedder()
    reports = [("reasoning", reasoning_filter_pipeline(t, embedder)) for t in read_trajectories(planted / "reasoning.jsonl")]
    reports += [("twi", twi_filter_pipeline(t, judge)) for t in read_trajectories(planted / "twi.jsonl")]
    elapsed = time.perf_counter() - t0
    recall, counts, false_pos, clean = {}, {}, 0, 0
    for mode, r in reports:
        cls = r.sample_id.split("-", 1)[1].rsplit("-", 1)[0]
        if cls == "clean":
            clean += 1
            false_pos += any(v.failed for v in r.verdicts.values())
            continue
        counts[cls] = counts.get(cls, 0) + 1
        expected = "route_candidate" if cls in SOFT_DIMS else "reject"
        recall[cls] = recall.get(cls, 0) + (r.verdicts[cls].failed and r.overall == expected)
    dims = REASONING_DIMS + TWI_DIMS
    per_dim_ok = all(counts.get(d, 0) >= 30 and recall[d] == counts[d] for d in dims)
    ok = per_dim_ok and false_pos == 0 and clean >= 30 and elapsed < 10
    worst = min(recall.get(d, 0) / max(counts.get(d, 1), 1) for d in dims)
    acceptance_line(6, "planted-defect filters", ok,
                    f"{len(dims)} dimensions x >=30 samples, min recall {worst:.0%}, clean FP {false_pos}/{clean}, {elapsed:.2f}s")
    assert ok, (recall, counts, false_pos)


def test_7_stratification_boundary(acceptance_line):
    k10 = group_by_sample(read_trajectories(FIXTURES / "stratify" / "rollouts_k10.jsonl"))
    k16 = group_by_sample(read_trajectories(FIXTURES / "stratify" / "rollouts_k16.jsonl"))
    got = {
        "3/10": stratify(k10["hard-3of10"]).bucket,
        "4/10": stratify(k10["edge-4of10"]).bucket,
        "0/16": stratify(k16["none-0of16"], mode="all_fail").bucket,
    }
    ok = (
        got["3/10"].bucket == "rl_hard"
        and got["4/10"].bucket != "rl_hard"
        and got["0/16"].bucket == "discard_all_fail"
        and (got["3/10"].k, got["3/10"].passes, got["4/10"].passes, got["0/16"].k) == (10, 3, 4, 16)
    )
    acceptance_line(7, "stratification boundary", ok, ", ".join(f"{k}->{b.bucket}" for k, b in got.items()))
    assert ok


def test_8_routing(acceptance_line, tmp_path):
    demo = FIXTURES / "demo"
    manager = SandboxManager(SandboxConfig(image_root=str(tmp_path / "sb"), backend="inprocess"))
    trajs = run_batch(read_samples(demo / "corpus.jsonl"), 4, ReplayPolicy.from_jsonl(demo / "replay.jsonl"), manager,
                      RolloutConfig(record_wall_time=False))
    trajs += read_trajectories(FIXTURES / "planted" / "twi.jsonl")
    judge = ReplayJudge.from_jsonl(demo / "judges.jsonl")
    planted_judge = ReplayJudge.from_jsonl(FIXTURES / "planted" / "judges.jsonl")
    converted = masks = 0
    problems = []
    for t in trajs:
        report = twi_filter_pipeline(t, planted_judge if t.sample_id.startswith("t-") else judge)
        if report.overall == "reject":
            continue
        routed = route_sample(t, report)
        out = routed.converted_trajectory
        if routed.decision == "convert_reasoning":
            converted += 1
            text = "".join(m.text for m in out.messages)
            if any(tag in text for tag in ("<tool_call>", "</tool_call>", "<tool_response>", "</tool_response>")):
                problems.append(f"{t.sample_id}: tool blocks survive conversion")
            if out.final_answer != t.final_answer or not out.messages[-1].text.endswith(t.final_answer):
                problems.append(f"{t.sample_id}: final answer changed")
        if out is None:
            continue
        bits = assistant_mask(annotate_loss_mask(out))
        tool_pos = [i for i, turn in enumerate(out.turns) if turn.is_tool_call]
        want = {len(out.turns) - 1} | ({tool_pos[-1]} if tool_pos else set())
        if sum(bits) not in (1, 2) or {i for i, b in enumerate(bits) if b} != want:
            problems.append(f"{t.sample_id}: mask {bits}")
        masks += 1
    ok = converted > 0 and masks > 0 and not problems
    acceptance_line(8, "routing and loss masks", ok, f"{converted} conversions, {masks} masks checked, {len(problems)} problems")
    assert ok, problems[:5]


def test_9_full_offline_run(acceptance_line, tmp_path, monkeypatch):
    for var in ("MODEL_ENDPOINT", "JUDGE_ENDPOINT", "EMBED_ENDPOINT", "API_KEY"):
        monkeypatch.delenv(var, raising=False)
    demo = FIXTURES / "demo"
    t0 = time.perf_counter()
    steps = [
        ["rollout", str(demo / "corpus.jsonl"), "--backend", f"replay:{demo / 'replay.jsonl'}", "--k", "4",
         "--out", str(tmp_path / "roll" / "t.jsonl")],
        ["score", str(tmp_path / "roll" / "t.jsonl"), "--variant", "final", "--judge-script", str(demo / "judges.jsonl"),
         "--out", str(tmp_path / "score.jsonl")],
        ["filter", str(tmp_path / "roll" / "t.jsonl"), "--mode", "twi", "--judge-script", str(demo / "judges.jsonl"),
         "--out", str(tmp_path / "filt" / "f.jsonl")],
        ["route", str(tmp_path / "filt" / "f.jsonl"), "--out-dir", str(tmp_path / "route")],
        ["stratify", str(tmp_path / "roll" / "t.jsonl"), "--out-dir", str(tmp_path / "strat")],
    ]
    codes = [main(argv) for argv in steps]
    elapsed = time.perf_counter() - t0
    n_traj = sum(1 for _ in read_jsonl(tmp_path / "roll" / "t.jsonl"))
    n_scored = sum(1 for r in read_jsonl(tmp_path / "score.jsonl") if r["total"] is not None)
    outputs = [tmp_path / "route" / "twi_sft.jsonl", tmp_path / "route" / "reasoning_sft.jsonl",
               tmp_path / "strat" / "buckets.jsonl", tmp_path / "strat" / "rl_pool.jsonl"]
    ok = codes == [0] * 5 and n_traj == 80 and n_scored == 80 and all(p.exists() for p in outputs) and elapsed < 60
    acceptance_line(9, "full offline run", ok, f"exit codes {codes}, {n_traj} trajectories, {n_scored} scored, {elapsed:.1f}s")
    assert ok
