"""Command-line entry point: rollout, score, filter, route, stratify, simulate."""

from __future__ import annotations

import argparse
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx
import numpy as np

from .backends.chat import ChatClient
from .backends.embed import HashEmbedder, HttpEmbedder
from .backends.judges import LLMJudge, ReplayJudge, ScriptedJudge
from .backends.policy import ChatPolicy, ReplayPolicy
from .config import RunConfig, load_config
from .corpus import ArtifactStore, dumps, read_jsonl, relativize, resolve, write_jsonl
from .errors import AnnotationError, BackendError, ConfigError, DomainError, MissingScoreError, RoutingError, TwirlError
from .filters import FilterReport, reasoning_filter_pipeline, summary_tsv, twi_filter_pipeline
from .hacklab import Environment, ToyPolicy, analytic_argmax, expected_reward_table, simulate
from .rewards import VARIANTS, reference_judge, score_trajectory, scientific_reward, summarize
from .rollout import RolloutConfig, Trajectory, read_samples, run_batch, write_trajectories
from .routing import annotate_loss_mask, group_by_sample, route_sample, stratify
from .sandbox import SandboxConfig, SandboxManager

log = logging.getLogger("twirl")

EXIT_OK, EXIT_CONFIG, EXIT_UNREACHABLE = 0, 2, 3
# with judges off every judged reward component comes back missing
_JUDGES_OFF = ScriptedJudge(default=None, judge_id="off")


class Unreachable(TwirlError):
    pass


# --------------------------------------------------------------------------- helpers

def _read_trajectories(path) -> list[Trajectory]:
    base = Path(path).resolve().parent
    try:
        rows = list(read_jsonl(path))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    out = []
    for row in rows:
        traj = Trajectory.from_dict(row).map_paths(lambda p: resolve(p, base))
        out.append(traj)
    return out


def _traj_row(traj: Trajectory, out_path, **extra) -> dict:
    base = Path(out_path).resolve().parent
    row = traj.map_paths(lambda p: relativize(p, base)).to_dict()
    row.update(extra)
    return row


def _probe(url: str, what: str) -> None:
    try:
        httpx.get(url, timeout=5.0)
    except httpx.HTTPError as exc:
        raise Unreachable(f"{what} endpoint {url} unreachable: {type(exc).__name__}") from None


def _client(cfg: RunConfig, endpoint: str | None, what: str) -> ChatClient:
    if not endpoint:
        raise ConfigError(f"no {what} endpoint configured")
    _probe(endpoint, what)
    e = cfg.endpoints
    return ChatClient(endpoint, e.api_key, max_retries=e.max_retries, timeout=e.timeout,
                      image_mode=e.image_mode, max_concurrency=e.max_concurrency)


def _judge(args, cfg: RunConfig):
    if args.judges == "off":
        return None
    if args.judge_script:
        return ReplayJudge.from_jsonl(args.judge_script)
    return LLMJudge(_client(cfg, cfg.endpoints.judge, "judge"), cfg.endpoints.judge_model)


def _embedder(args, cfg: RunConfig):
    if args.embedder == "off":
        return None
    if args.embedder == "hash":
        return HashEmbedder()
    if not cfg.endpoints.embed:
        raise ConfigError("no embed endpoint configured")
    _probe(cfg.endpoints.embed, "embed")
    return HttpEmbedder(cfg.endpoints.embed, cfg.endpoints.embed_model, cfg.endpoints.api_key)


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- commands

def cmd_rollout(args, cfg: RunConfig) -> int:
    try:
        samples = read_samples(args.corpus)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read corpus {args.corpus}: {exc}") from None
    replay = args.backend.startswith("replay:")
    if replay:
        try:
            backend = ReplayPolicy.from_jsonl(args.backend.split(":", 1)[1])
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read replay script: {exc}") from None
    elif args.backend == "http":
        backend = ChatPolicy(_client(cfg, cfg.endpoints.model, "model"), cfg.endpoints.model_id)
    else:
        raise ConfigError(f"--backend must be replay:PATH or http, not {args.backend!r}")

    out = Path(args.out)
    store = ArtifactStore(Path(args.artifacts) if args.artifacts else out.parent / "artifacts")
    sb = cfg.sandbox
    image_root = sb.image_root or str(out.parent / "sandbox")
    sandbox = SandboxManager(SandboxConfig(
        image_root=image_root, backend=sb.backend, http_url=sb.http_url, allow_network=sb.allow_network,
        memory_limit_mb=sb.memory_limit_mb, cpu_time_limit=sb.cpu_time_limit, interrupt_grace=sb.interrupt_grace,
    ))
    r = cfg.rollout
    rcfg = RolloutConfig(r.max_turns, r.exec_timeout, r.on_parse_error, r.max_nudges, record_wall_time=not replay)
    trajs = run_batch(samples, r.k, backend, sandbox, rcfg, cfg.workers, store)
    n = write_trajectories(out, trajs, store)
    aborted = sum(t.terminal == "aborted" for t in trajs)
    print(f"wrote {n} trajectories to {out} ({aborted} aborted)", file=sys.stderr)
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    if args.variant not in VARIANTS + ("scientific",):
        raise ConfigError(f"unknown variant {args.variant!r}")
    trajs = _read_trajectories(args.trajectories)
    judge = _judge(args, cfg) if trajs else None

    if args.variant == "scientific":
        judges = {"reference": reference_judge}
        if judge is not None:
            def model_judge(sample, y, _j=judge):
                return _j.judge_reasoning_answer(sample.question, y, sample.gold, sample_id=sample.sample_id).score
            judges["reasoning_answer"] = model_judge

        def one(t: Trajectory) -> dict:
            row = {"sample_id": t.sample_id, "replicate": t.replicate, "variant": "scientific", "task_type": t.task_type}
            y = t.final_turn.raw if t.final_turn else ""
            try:
                row["total"] = scientific_reward(t.sample, y, cfg.rewards.tasks, judges=judges)
                row["flags"] = []
            except (RoutingError, MissingScoreError) as exc:
                row["total"], row["flags"] = None, [str(exc)]
            return row
    else:
        def one(t: Trajectory) -> dict:
            b = score_trajectory(t, judge if judge is not None else _JUDGES_OFF, args.variant,
                                 cfg.rewards.n_max, accuracy_gate=cfg.rewards.accuracy_gate)
            return b.to_dict()

    rows = _pmap(one, trajs, cfg.workers)
    text = "".join(dumps(r) + "\n" for r in rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    s = summarize(r["total"] for r in rows)
    flagged = sum(1 for r in rows if r["total"] is None)
    print(f"count={s['count']} mean={s['mean']} min={s['min']} max={s['max']} flagged={flagged}", file=sys.stderr)
    return EXIT_OK


def cmd_filter(args, cfg: RunConfig) -> int:
    trajs = _read_trajectories(args.corpus)
    th = cfg.filters
    if args.mode == "reasoning":
        embedder = _embedder(args, cfg)
        fn = lambda t: reasoning_filter_pipeline(t, embedder, th)  # noqa: E731
    elif args.mode == "twi":
        judge = _judge(args, cfg) if trajs else None
        fn = lambda t: twi_filter_pipeline(t, judge, th)  # noqa: E731
    else:
        raise ConfigError(f"unknown filter mode {args.mode!r}")
    reports = _pmap(fn, trajs, cfg.workers)
    rows = [_traj_row(t, args.out, filter_report=r.to_dict()) for t, r in zip(trajs, reports)]
    write_jsonl(args.out, rows)
    summary = Path(args.summary) if args.summary else Path(args.out).with_suffix(".summary.tsv")
    summary.write_text(summary_tsv(reports), encoding="utf-8")
    sys.stderr.write(summary_tsv(reports))
    return EXIT_OK


def cmd_route(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = list(read_jsonl(args.filtered))
    trajs = _read_trajectories(args.filtered)
    twi, reasoning, counts = [], [], {"keep_twi": 0, "convert_reasoning": 0, "drop": 0, "rejected": 0, "unannotatable": 0}
    for row, traj in zip(rows, trajs):
        if "filter_report" not in row:
            raise ConfigError(f"{traj.sample_id}: input rows need a filter_report (run `filter` first)")
        report = FilterReport.from_dict(row["filter_report"])
        traj.extra.pop("filter_report", None)
        if report.overall == "reject":
            counts["rejected"] += 1
            continue
        routed = route_sample(traj, report)
        counts[routed.decision] += 1
        if routed.decision == "drop":
            continue
        try:
            out_traj = annotate_loss_mask(routed.converted_trajectory)
        except AnnotationError as exc:
            log.warning("skipping %s: %s", traj.sample_id, exc)
            counts["unannotatable"] += 1
            continue
        prov = {"origin_id": traj.sample_id, "decision": routed.decision}
        target = twi if routed.decision == "keep_twi" else reasoning
        target.append(_traj_row(out_traj, out_dir / "x", provenance=prov))
    write_jsonl(out_dir / "twi_sft.jsonl", twi)
    write_jsonl(out_dir / "reasoning_sft.jsonl", reasoning)
    print(" ".join(f"{k}={v}" for k, v in counts.items()), file=sys.stderr)
    return EXIT_OK


def cmd_stratify(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = group_by_sample(_read_trajectories(args.trajectories))
    mode = args.mode.replace("-", "_")
    buckets, pool, sft = [], [], []
    for sample_id in sorted(groups):
        result = stratify(groups[sample_id], hard_threshold=args.threshold, mode=mode)
        b = result.bucket
        buckets.append(b.to_dict())
        if b.bucket == "rl_hard":
            sample = groups[sample_id][0].sample.to_dict()
            sample["images"] = [dict(r, path=relativize(r["path"], out_dir)) for r in sample["images"]]
            sample["provenance"] = {"origin_id": sample_id, "bucket": b.bucket, "pass_rate": b.pass_rate}
            pool.append(sample)
        for t in result.correct:
            sft.append(_traj_row(t, out_dir / "x", provenance={"origin_id": sample_id, "bucket": b.bucket, "pass_rate": b.pass_rate}))
    write_jsonl(out_dir / "buckets.jsonl", buckets)
    write_jsonl(out_dir / "rl_pool.jsonl", pool)
    write_jsonl(out_dir / "sft_pool.jsonl", sft)
    tally = {k: sum(b["bucket"] == k for b in buckets) for k in ("rl_hard", "sft_pool", "discard_all_fail")}
    print(" ".join(f"{k}={v}" for k, v in tally.items()), file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}")
    h = cfg.hacklab
    env = Environment.uniform(h.p_acc0, h.p_acc_tool, h.p_con_hi_tool, cfg.rewards.n_max, con_hi=h.con_hi, con_lo=h.con_lo)
    policy = ToyPolicy(env.n_max + 1, h.learning_rate, h.temperature)
    steps = args.steps if args.steps is not None else h.steps
    curve = simulate(policy, env, args.variant, steps, cfg.seed, h.group_size)
    text = curve.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    table = expected_reward_table(env, args.variant)
    print("E[R|n]: " + " ".join(f"{x:.4f}" for x in table), file=sys.stderr)
    print(f"analytic argmax n={analytic_argmax(env, args.variant)}; final policy argmax n={curve.final_argmax}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    judged = argparse.ArgumentParser(add_help=False)
    judged.add_argument("--judges", choices=("on", "off"), default="on")
    judged.add_argument("--judge-script", help="JSONL of scripted judge scores (offline judging)")

    p = argparse.ArgumentParser(prog="twirl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rollout", parents=[common], help="run episodes for every sample")
    r.add_argument("corpus")
    r.add_argument("--out", required=True)
    r.add_argument("--k", type=int)
    r.add_argument("--max-turns", type=int)
    r.add_argument("--backend", default="http", help="replay:PATH or http")
    r.add_argument("--sandbox", choices=("subprocess", "inprocess", "http"))
    r.add_argument("--artifacts", help="artifact store directory (default: <out dir>/artifacts)")
    r.set_defaults(func=cmd_rollout)

    s = sub.add_parser("score", parents=[common, judged], help="compute rewards for trajectories")
    s.add_argument("trajectories")
    s.add_argument("--variant", default="final")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    f = sub.add_parser("filter", parents=[common, judged], help="quality-filter trajectories")
    f.add_argument("corpus")
    f.add_argument("--mode", choices=("reasoning", "twi"), default="twi")
    f.add_argument("--embedder", choices=("hash", "http", "off"), default="hash")
    f.add_argument("--out", required=True)
    f.add_argument("--summary")
    f.set_defaults(func=cmd_filter)

    rt = sub.add_parser("route", parents=[common], help="route filtered trajectories into SFT corpora")
    rt.add_argument("filtered")
    rt.add_argument("--out-dir", required=True)
    rt.set_defaults(func=cmd_route)

    st = sub.add_parser("stratify", parents=[common], help="bucket samples by rollout pass rate")
    st.add_argument("trajectories")
    st.add_argument("--out-dir", required=True)
    st.add_argument("--mode", choices=("curriculum", "all-fail", "all_fail"), default="curriculum")
    st.add_argument("--threshold", type=float, default=0.4)
    st.set_defaults(func=cmd_stratify)

    sm = sub.add_parser("simulate", parents=[common], help="reward-hacking policy simulation")
    sm.add_argument("--variant", default="hacked")
    sm.add_argument("--steps", type=int)
    sm.add_argument("--out")
    sm.set_defaults(func=cmd_simulate)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if getattr(args, "k", None) is not None:
        cfg.rollout.k = args.k
    if getattr(args, "max_turns", None) is not None:
        cfg.rollout.max_turns = args.max_turns
    if getattr(args, "sandbox", None):
        cfg.sandbox.backend = args.sandbox
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        random.seed(cfg.seed)
        np.random.seed(cfg.seed)
        return args.func(args, cfg)
    except Unreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except BackendError as exc:
        print(f"error: backend: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
