"""Deterministic fixture bundles: a demo corpus, a planted-defect corpus and pass-rate sets.

Run ``python -m twirl.fixtures OUT_DIR`` to (re)build all three under OUT_DIR.
Every bundle is produced by real rollouts against the in-process sandbox
with scripted policies, so the trajectories have the same shape as live
ones. Paths inside message text are rewritten to the conventional
``/mnt/data/images`` layout so no build-machine path leaks in; the
structured image references stay relative to the bundle.
"""

from __future__ import annotations

import argparse
import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .backends.policy import ReplayPolicy
from .corpus import ArtifactStore, write_jsonl
from .protocol import DEFAULT_IMAGE_DIR, render_tool_call
from .rollout import RolloutConfig, Sample, read_samples, run_batch, write_trajectories
from .sandbox import InProcessBackend, SandboxConfig, SandboxManager

PER_CLASS = 30
SOURCE_SIZE = 64
CROP = 32


# --------------------------------------------------------------------------- images

def texture(seed: int, size: int = SOURCE_SIZE) -> Image.Image:
    """Smooth random colour field: an 8x8 grid of random colours, bicubic-upsampled."""
    grid = np.random.default_rng(seed).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    return Image.fromarray(grid).resize((size, size), Image.BICUBIC)


QUADRANTS = [(0, 0, 32, 32), (32, 0, 64, 32), (0, 32, 32, 64), (32, 32, 64, 64)]


def crop_code(rect, name: str, image: str = "$IMAGE_0") -> str:
    return (
        "from PIL import Image\n"
        f'img = Image.open("{image}")\n'
        f"crop = img.crop({tuple(rect)})\n"
        f'path = WORKDIR + "/{name}.png"\n'
        "crop.save(path)\n"
        "print(path)"
    )


def blank_code(name: str, kind: str) -> str:
    body = {
        "blank": "Image.new('RGB', (48, 48), (255, 255, 255))",
        "solid": "Image.new('RGB', (48, 48), (40, 120, 200))",
        "tiny": "Image.open(\"$IMAGE_0\").crop((0, 0, 12, 12))",
    }[kind]
    return f"from PIL import Image\nout = {body}\npath = WORKDIR + \"/{name}.png\"\nout.save(path)\nprint(path)"


def answer(think: str, value) -> str:
    return f"<think>{think}</think>\nThe answer is \\boxed{{{value}}}."


# --------------------------------------------------------------------------- text

_SUBJECTS = ["the left panel", "the upper band", "the central patch", "the lower strip", "the right margin",
             "the darker region", "the warm cluster", "the cool corner"]
_VERBS = ["shows", "contains", "suggests", "reveals", "carries", "exhibits"]
_OBJECTS = ["a gradient toward red", "two distinct hues", "a faint boundary", "an isolated bright spot",
            "a smooth transition", "a sharp colour change", "a repeated motif", "uneven shading"]
_LINKS = ["Comparing this against the question", "Taken together with the earlier observation",
          "Measured against the reference scale", "Checking the count once more",
          "Looking at the proportions involved", "Cross-referencing the legend"]


def clean_paragraphs(seed: int, count: int = 4) -> list[str]:
    """Lexically varied paragraphs with no fillers, repeats or numeric runs."""
    rng = np.random.default_rng(seed)
    subj = rng.permutation(len(_SUBJECTS))
    objs = rng.permutation(len(_OBJECTS))
    links = rng.permutation(len(_LINKS))
    paras = []
    for i in range(count):
        a, b = int(rng.integers(2, 40)), int(rng.integers(41, 90))
        paras.append(
            f"{_SUBJECTS[subj[i]].capitalize()} {_VERBS[(i + seed) % len(_VERBS)]} {_OBJECTS[objs[i]]} "
            f"spanning roughly {a} to {b} pixels. {_LINKS[links[i]]}, step {i + 1} narrows the candidates."
        )
    return paras


def reasoning_defect_text(kind: str, seed: int) -> str:
    paras = clean_paragraphs(seed)
    variant = seed % 3
    if kind == "wait_tokens":
        if variant == 0:
            paras.insert(2, " ".join(["Wait, let me reconsider that estimate."] * 10))
        elif variant == 1:
            paras[1] += " Hmm. Wait. Hmm, that is odd."
        else:
            paras = [p + " Wait, is this right?" for p in paras] + ["Hmm, wait, wait. Let me think about it again."]
    elif kind == "phrase_repetition":
        phrase = ["so the value is", "we can see that", "this means that the"][variant]
        paras.insert(1, " ".join(f"{phrase} {w}" for w in ["large", "small", "here", "there"] * 4))
    elif kind == "multiline_anomaly":
        if variant == 2:
            paras[1] += "\n" * 9
        else:
            paras.insert(2, "\n".join(["ok", "right", "so", "then"][i % 4] for i in range(25 + 5 * variant)))
    elif kind == "numeric_repetition":
        block = [("1", "2", "3"), ("4", "7", "9"), ("10", "20", "30", "40")][variant]
        paras.insert(2, "Counting: " + " ".join(" ".join(block) for _ in range(9)))
    elif kind == "semantic_redundancy":
        paras.insert(2, paras[0])
    return "\n\n".join(paras)


# --------------------------------------------------------------------------- runner

def _rollout(samples, scripts, out_path: Path, k: int = 1, max_turns: int = 8):
    """Run scripted episodes and write them with sandbox paths normalised."""
    store = ArtifactStore(out_path.parent / "artifacts")
    with tempfile.TemporaryDirectory() as tmp:
        sandbox = SandboxManager(SandboxConfig(image_root=tmp, backend="inprocess"), InProcessBackend())
        cfg = RolloutConfig(max_turns=max_turns, record_wall_time=False)
        trajs = run_batch(samples, k, ReplayPolicy(scripts), sandbox, cfg, store=store)
        write_trajectories(out_path, trajs, store)
        text = out_path.read_text(encoding="utf-8")
        text = text.replace(str(Path(tmp).resolve()), DEFAULT_IMAGE_DIR)
        text = text.replace(str((out_path.parent / "images").resolve()), "/mnt/data/images")
        out_path.write_text(text, encoding="utf-8")
    return trajs


def _write_corpus(bundle: Path, rows: list[dict]) -> Path:
    path = bundle / "corpus.jsonl"
    write_jsonl(path, rows)
    return path


def _sample_row(sid: str, question: str, image_name: str | None, gold, task_type="counting") -> dict:
    row = {"sample_id": sid, "question": question, "gold": str(gold), "task_type": task_type, "images": []}
    if image_name:
        row["images"] = [{"path": f"images/{image_name}", "width": SOURCE_SIZE, "height": SOURCE_SIZE}]
    return row


def _save_source(bundle: Path, name: str, seed: int) -> None:
    (bundle / "images").mkdir(parents=True, exist_ok=True)
    texture(seed).save(bundle / "images" / name)


# --------------------------------------------------------------------------- demo

DEMO_K = 4


def build_demo(bundle: Path) -> None:
    """20 samples x 4 replicates with a spread of behaviours and pass rates."""
    bundle.mkdir(parents=True, exist_ok=True)
    rows, scripts, judge_rows = [], {}, []
    for i in range(20):
        sid = f"demo-{i:02d}"
        name = f"demo_{i:02d}.png"
        _save_source(bundle, name, 1000 + i)
        gold = i % 7 + 2
        rows.append(_sample_row(sid, f"How many distinct colour regions appear in the marked area of image {i}?", name, gold, "math"))
        q = QUADRANTS
        for rep in range(DEMO_K):
            wrong = gold + 1
            style = i % 5
            if style == 0:  # direct answer, always right
                turns = [answer(" ".join(clean_paragraphs(i * 10 + rep, 2)), gold)]
            elif style == 1:  # one crop, right three times out of four
                turns = [render_tool_call(crop_code(q[rep % 4], "crop_a"), "Zoom into one quadrant first."),
                         answer("The crop isolates the regions clearly enough to count them one by one.", gold if rep else wrong)]
            elif style == 2:  # two distinct crops, right half the time
                turns = [render_tool_call(crop_code(q[0], "crop_a"), "Inspect the top-left quadrant."),
                         render_tool_call(crop_code(q[3], "crop_b"), "Now the bottom-right quadrant for contrast."),
                         answer("Both quadrants together give the full count of the regions in question.", gold if rep < 2 else wrong)]
            elif style == 3:  # hard: mostly wrong, sometimes a redundant re-crop
                turns = [render_tool_call(crop_code(q[1], "crop_a"), "Look at the top-right quadrant."),
                         render_tool_call(crop_code(q[1], "crop_b"), "Look at the same quadrant again."),
                         answer("Counting the regions visible in the repeated view of that quadrant.", gold if rep == 0 else wrong)]
            else:  # never solved; one replicate produces a blank image
                first = blank_code("crop_a", "blank") if rep == 0 else crop_code(q[2], "crop_a")
                turns = [render_tool_call(first, "Crop the lower-left area to check the shapes."),
                         answer("The lower-left area alone decides the count for this image.", wrong)]
            scripts[(sid, rep)] = turns
        if i % 5 == 1:
            judge_rows.append({"sample_id": sid, "kind": "image_text_alignment", "score": 0.2})
    write_jsonl(bundle / "replay.jsonl", [
        {"sample_id": sid, "replicate": rep, "turns": turns} for (sid, rep), turns in sorted(scripts.items())
    ])
    write_jsonl(bundle / "judges.jsonl", judge_rows)
    _write_corpus(bundle, rows)


# --------------------------------------------------------------------------- planted defects

REASONING_CLASSES = ("wait_tokens", "phrase_repetition", "multiline_anomaly", "numeric_repetition", "think_format",
                     "semantic_redundancy")
TWI_CLASSES = ("format", "reasoning_answer_consistency", "image_validity", "image_text_alignment", "key_information",
               "redundancy")
JUDGE_DEFECTS = {
    "reasoning_answer_consistency": ("reasoning_answer", 0.1),
    "image_text_alignment": ("image_text_alignment", 0.2),
    "key_information": ("key_information", 0.0),
}


def _think_format_script(j: int, gold) -> list[str]:
    think = " ".join(clean_paragraphs(j, 2))
    v = j % 3
    if v == 0:  # unclosed think; nudged until the turn budget for nudges runs out
        return [f"<think>{think}\nThe answer is \\boxed{{{gold}}}."] * 3
    if v == 1:  # text before the think block
        return [f"Sure. <think>{think}</think>\nThe answer is \\boxed{{{gold}}}."]
    return [render_tool_call("print(1)", think)]  # ends on a tool call without answering


def _twi_script(kind: str, j: int, gold) -> list[str]:
    qa, qb = QUADRANTS[j % 4], QUADRANTS[(j + 2) % 4]
    t1 = "Crop the first quadrant to see the shapes clearly."
    t2 = "Now crop the opposite quadrant to compare the colours."
    fin = answer("Both crops together show every region needed for the count.", gold)
    if kind == "format":
        v = j % 3
        if v == 0:  # code that does not parse
            bad = crop_code(qa, "crop_a").replace("crop.save(path)", "crop.save(path")
            return [render_tool_call(bad, t1), render_tool_call(crop_code(qb, "crop_b"), t2), fin]
        if v == 1:  # tool turn without a think block
            call = render_tool_call(crop_code(qa, "crop_a"), t1)
            return [call.split("</think>\n", 1)[1], render_tool_call(crop_code(qb, "crop_b"), t2), fin]
        return [render_tool_call(crop_code(qa, "crop_a"), t1), render_tool_call(crop_code(qb, "crop_b"), t2), "Final: " + fin]
    if kind == "image_validity":
        second = blank_code("crop_b", ("blank", "solid", "tiny")[j % 3])
        return [render_tool_call(crop_code(qa, "crop_a"), t1), render_tool_call(second, t2), fin]
    if kind == "redundancy":
        v = j % 3
        if v == 0:
            rb = qa
        elif v == 1:
            rb = (qa[0] + 1, qa[1], qa[2] + 1, qa[3])  # IoU 31/33
        else:  # no rectangle literal: only perceptual similarity can catch it
            shifted = f"x0, y0 = {qa[0]}, {qa[1]}\nbox = (x0, y0, x0 + {CROP}, y0 + {CROP})"
            code = crop_code(qa, "crop_b").replace(f"crop = img.crop({tuple(qa)})", f"{shifted}\ncrop = img.crop(box)")
            return [render_tool_call(crop_code(qa, "crop_a"), t1), render_tool_call(code, t2), fin]
        return [render_tool_call(crop_code(qa, "crop_a"), t1), render_tool_call(crop_code(rb, "crop_b"), t2), fin]
    return [render_tool_call(crop_code(qa, "crop_a"), t1), render_tool_call(crop_code(qb, "crop_b"), t2), fin]


def build_planted(bundle: Path) -> dict:
    """One defect class per sample plus clean controls, for both filter modes."""
    bundle.mkdir(parents=True, exist_ok=True)
    expected = {"per_class": PER_CLASS, "clean": PER_CLASS, "reasoning": {}, "twi": {}}

    # pure-reasoning trajectories
    samples, scripts = [], {}
    for cls in REASONING_CLASSES + ("clean",):
        for j in range(PER_CLASS):
            sid = f"r-{cls}-{j:02d}"
            gold = j % 9 + 1
            samples.append(Sample(sid, f"What is the total number of marked items in scene {j}?", (), str(gold), "counting"))
            if cls == "think_format":
                scripts[sid] = _think_format_script(j, gold)
            else:
                text = reasoning_defect_text(cls, j) if cls != "clean" else "\n\n".join(clean_paragraphs(j))
                scripts[sid] = [answer(text, gold)]
    _rollout(samples, scripts, bundle / "reasoning.jsonl")

    # tool-use trajectories
    rows, scripts, judge_rows = [], {}, []
    for cls in TWI_CLASSES + ("clean",):
        for j in range(PER_CLASS):
            sid = f"t-{cls}-{j:02d}"
            name = f"src_{j % 10}.png"
            if not (bundle / "images" / name).exists():
                _save_source(bundle, name, 5000 + j % 10)
            gold = j % 9 + 1
            rows.append(_sample_row(sid, f"How many colour regions are there in picture {j}?", name, gold))
            scripts[sid] = _twi_script(cls, j, gold)
            if cls in JUDGE_DEFECTS:
                kind, score = JUDGE_DEFECTS[cls]
                judge_rows.append({"sample_id": sid, "kind": kind, "score": score})
    corpus = _write_corpus(bundle, rows)
    _rollout(read_samples(corpus), scripts, bundle / "twi.jsonl")
    write_jsonl(bundle / "judges.jsonl", judge_rows)

    for cls in REASONING_CLASSES:
        expected["reasoning"][cls] = PER_CLASS
    for cls in TWI_CLASSES:
        expected["twi"][cls] = PER_CLASS
    (bundle / "expected.json").write_text(json.dumps(expected, indent=2) + "\n", encoding="utf-8")
    return expected


# --------------------------------------------------------------------------- stratification

STRATA = {
    # sample_id: (k, passes)
    "hard-3of10": (10, 3),
    "edge-4of10": (10, 4),
    "easy-8of10": (10, 8),
    "none-0of16": (16, 0),
    "some-5of16": (16, 5),
}


def build_stratify(bundle: Path) -> None:
    bundle.mkdir(parents=True, exist_ok=True)
    for k in sorted({k for k, _ in STRATA.values()}):
        samples, scripts = [], {}
        for sid, (kk, passes) in STRATA.items():
            if kk != k:
                continue
            samples.append(Sample(sid, f"Compute the value asked for in problem {sid}.", (), "12", "math"))
            for rep in range(k):
                value = 12 if rep < passes else 13 + rep
                scripts[(sid, rep)] = [answer(f"Working through attempt {rep} of problem {sid} step by step.", value)]
        _rollout(samples, scripts, bundle / f"rollouts_k{k}.jsonl", k=k)


def build_all(out: Path) -> None:
    out = Path(out)
    for name, fn in (("demo", build_demo), ("planted", build_planted), ("stratify", build_stratify)):
        target = out / name
        if target.exists():
            shutil.rmtree(target)
        fn(target)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="Build the fixture bundles.")
    p.add_argument("out", type=Path)
    args = p.parse_args(argv)
    build_all(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
