from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


def make_image(path: Path, kind: str = "texture", size=(64, 48), seed: int = 0) -> Path:
    """Write a small test PNG: ``texture`` (random), ``blank`` (white) or ``solid`` (gray)."""
    import numpy as np
    from PIL import Image

    w, h = size
    if kind == "texture":
        arr = np.random.default_rng(seed).integers(0, 255, (h, w, 3), dtype=np.uint8)
    elif kind == "blank":
        arr = np.full((h, w, 3), 255, dtype=np.uint8)
    else:
        arr = np.full((h, w, 3), 128, dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


SAVE_CODE = (
    "import numpy as np\nfrom PIL import Image\nimport os\n"
    "p = os.path.join(WORKDIR, '{name}.png')\n"
    "Image.fromarray(np.random.default_rng({seed}).integers(0, 255, (40, 50, 3), dtype=np.uint8)).save(p)\n"
    "print(p)"
)


def save_image_call(name: str, seed: int = 0, think: str = "crop the region") -> str:
    from twirl.protocol import render_tool_call

    return render_tool_call(SAVE_CODE.format(name=name, seed=seed), think=think)


def answer_turn(value, think: str = "the evidence is clear") -> str:
    return f"<think>{think}</think>\nThe answer is \\boxed{{{value}}}."


@pytest.fixture
def run_script(tmp_path):
    """Run one scripted episode in an in-process sandbox and return the trajectory."""
    from twirl.backends.policy import ReplayPolicy
    from twirl.corpus import ArtifactStore
    from twirl.rollout import RolloutConfig, Sample, run_episode
    from twirl.sandbox import SandboxConfig, SandboxManager

    def run(turns, gold="4", sample_id="s1", images=(), question="How many?", **cfg):
        sample = Sample(sample_id, question, tuple(images), gold)
        manager = SandboxManager(SandboxConfig(image_root=str(tmp_path / "sandbox"), backend="inprocess"))
        config = RolloutConfig(record_wall_time=False, **cfg)
        store = ArtifactStore(tmp_path / "artifacts")
        return run_episode(sample, ReplayPolicy({sample_id: list(turns)}), manager, config, store=store)

    return run


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    def emit(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
