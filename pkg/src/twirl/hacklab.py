"""Toy policy simulator for reward hacking through tool avoidance.

Actions are tool-call counts n in 0..N. The environment gives each action
an answer-accuracy probability and a consistency-score distribution; the
policy is a softmax over action preferences trained by a group-baselined
preference gradient.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rewards import N_MAX, composite_reward, tool_bonus, tool_efficiency_reward


@dataclass(frozen=True)
class Environment:
    """Per-action outcome model.

    ``p_acc[n]`` is P(correct answer | n calls). The consistency score is
    ``con_hi`` with probability ``p_con_hi[n]`` and ``con_lo`` otherwise:
    direct answers always pass the single think check, while tool use adds a
    crop check that sometimes fails.
    """

    p_acc: tuple[float, ...] = (0.55,) + (0.60,) * N_MAX
    p_con_hi: tuple[float, ...] = (1.0,) + (0.7,) * N_MAX
    con_hi: float = 0.9
    con_lo: float = 0.3
    p_fmt: float = 1.0

    def __post_init__(self):
        if len(self.p_acc) != len(self.p_con_hi) or len(self.p_acc) < 3:
            raise ConfigError("p_acc and p_con_hi need one entry per action, at least 3")
        for name, values in (("p_acc", self.p_acc), ("p_con_hi", self.p_con_hi)):
            if any(not 0.0 <= p <= 1.0 for p in values):
                raise ConfigError(f"{name} entries must lie in [0, 1]")
        for name in ("con_hi", "con_lo", "p_fmt"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @property
    def n_max(self) -> int:
        return len(self.p_acc) - 1

    @classmethod
    def uniform(cls, p_acc0, p_acc_tool, p_con_hi_tool, n_max: int = N_MAX, **kw) -> "Environment":
        return cls((p_acc0,) + (p_acc_tool,) * n_max, (1.0,) + (p_con_hi_tool,) * n_max, **kw)


def _reward(n: int, fmt: int, acc: int, con: float, variant: str, n_max: int) -> float:
    tool = tool_efficiency_reward(n, n_max, variant)
    return composite_reward(fmt, acc, con, tool, tool_bonus(n), variant)


def expected_reward_table(env: Environment, variant: str = "final") -> list[float]:
    """Exact E[R | n] by enumerating the outcome space of each action."""
    table = []
    for n in range(env.n_max + 1):
        total = (1.0 - env.p_fmt) * -1.0 if env.p_fmt < 1.0 else 0.0
        for acc, pa in ((1, env.p_acc[n]), (0, 1.0 - env.p_acc[n])):
            for con, pc in ((env.con_hi, env.p_con_hi[n]), (env.con_lo, 1.0 - env.p_con_hi[n])):
                weight = env.p_fmt * pa * pc
                if weight:
                    total += weight * _reward(n, 1, acc, con, variant, env.n_max)
        table.append(total)
    return table


@dataclass
class ToyPolicy:
    n_actions: int = N_MAX + 1
    learning_rate: float = 0.5
    temperature: float = 1.0
    preferences: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.preferences is None:
            self.preferences = np.zeros(self.n_actions)
        self.preferences = np.asarray(self.preferences, dtype=float)
        if self.preferences.shape != (self.n_actions,):
            raise ConfigError("preferences must have one entry per action")
        if self.temperature <= 0 or self.learning_rate <= 0:
            raise ConfigError("temperature and learning_rate must be positive")

    def probs(self) -> np.ndarray:
        z = self.preferences / self.temperature
        z = np.exp(z - z.max())
        return z / z.sum()


@dataclass
class Curve:
    rows: list[tuple]  # (step, mean_reward, p0..pN)

    @property
    def final_distribution(self) -> np.ndarray:
        return np.array(self.rows[-1][2:])

    @property
    def final_argmax(self) -> int:
        return int(np.argmax(self.final_distribution))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.rows[0]) - 2 if self.rows else 0
        w.writerow(["step", "mean_reward"] + [f"p{i}" for i in range(n)])
        for step, mean, *ps in self.rows:
            w.writerow([step, f"{mean:.6f}"] + [f"{p:.6f}" for p in ps])
        return buf.getvalue()


def simulate(
    policy: ToyPolicy,
    env: Environment,
    variant: str = "final",
    steps: int = 5000,
    seed: int = 0,
    group_size: int = 8,
) -> Curve:
    """Train ``policy`` in place and return its learning curve.

    Each step draws one problem and ``group_size`` actions. Rollouts in a
    group share the problem's random draws, so reward differences inside a
    group come from the actions alone; the group mean is the baseline.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if group_size < 2:
        raise ConfigError("group_size must be >= 2")
    if policy.n_actions != env.n_max + 1:
        raise ConfigError("policy and environment disagree on the number of actions")
    rng = np.random.default_rng(seed)
    p_acc = np.array(env.p_acc)
    p_con = np.array(env.p_con_hi)
    # reward lookup: [n, fmt-ok, acc, con_hi]
    lut = np.zeros((env.n_max + 1, 2, 2, 2))
    for n in range(env.n_max + 1):
        for acc in (0, 1):
            for hi, con in ((1, env.con_hi), (0, env.con_lo)):
                lut[n, 1, acc, hi] = _reward(n, 1, acc, con, variant, env.n_max)
                lut[n, 0, acc, hi] = -1.0
    eye = np.eye(policy.n_actions)
    rows = []
    pi = policy.probs()
    for step in range(1, steps + 1):
        u = rng.random(group_size + 3)
        actions = np.minimum(np.searchsorted(np.cumsum(pi), u[:group_size], side="right"), policy.n_actions - 1)
        u_fmt, u_acc, u_con = u[group_size:]
        fmt = int(u_fmt < env.p_fmt)
        acc = (u_acc < p_acc[actions]).astype(int)
        hi = (u_con < p_con[actions]).astype(int)
        rewards = lut[actions, fmt, acc, hi]
        adv = rewards - rewards.mean()
        grad = adv @ eye[actions] / group_size - adv.mean() * pi
        policy.preferences = policy.preferences + policy.learning_rate * grad
        pi = policy.probs()
        rows.append((step, float(rewards.mean()), *pi.tolist()))
    return Curve(rows)


def analytic_argmax(env: Environment, variant: str) -> int:
    return int(np.argmax(expected_reward_table(env, variant)))
