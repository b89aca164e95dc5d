"""Closed-loop rollouts of the latent policy steered by a planner."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ._rng import substream
from .cmp import categorical
from .errors import FormatError
from .training import act


@dataclass
class EvalReport:
    """Per-(planner, task) success rates; ``timing`` is kept out of the CSV."""

    rows: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    CSV_FIELDS = ("seed", "planner", "start", "goal", "episodes", "successes", "success_rate", "mean_steps")

    def success_rate(self, planner=None):
        rows = [r for r in self.rows if planner is None or r["planner"] == planner]
        succ = sum(r["successes"] for r in rows)
        total = sum(r["episodes"] for r in rows)
        return succ / total if total else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(r[k]) for k in self.CSV_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != cls.CSV_FIELDS:
            raise FormatError(f"eval CSV header must be {','.join(cls.CSV_FIELDS)}")
        for r in reader:
            rows.append(
                {
                    "seed": int(r["seed"]),
                    "planner": r["planner"],
                    "start": int(r["start"]),
                    "goal": int(r["goal"]),
                    "episodes": int(r["episodes"]),
                    "successes": int(r["successes"]),
                    "success_rate": float(r["success_rate"]),
                    "mean_steps": float(r["mean_steps"]),
                }
            )
        return cls(rows)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def rollout(env, encoder, planner, start, goal, max_steps, rng, mode="greedy"):
    """Run one episode; returns ``(success, steps)``."""
    feats = encoder.model_.feats
    policy = encoder.model_.policy
    x = int(start)
    for t in range(max_steps):
        if x == goal:
            return True, t
        z = planner.direction(x, goal)
        a = act(policy, feats[x], z, mode=mode, rng=rng)
        x = int(categorical(rng, env.kernel[a, x][None, :])[0])
    return x == goal, max_steps


def evaluate(env, encoder, planner, tasks, episodes, max_steps, seed, mode="greedy"):
    """Success rate and mean episode length of ``planner`` on each task.

    ``tasks`` holds ``(start, goal)`` pairs or bare goals; a bare goal gets
    a uniformly random start per episode.  Failed episodes count
    ``max_steps`` toward the mean.
    """
    report = EvalReport()
    for i, task in enumerate(tasks):
        start, goal = (task if isinstance(task, (tuple, list)) else (None, task))
        succ, steps = 0, []
        for ep in range(episodes):
            rng = substream(seed, "eval", i, ep)
            x0 = rng.integers(env.n_states) if start is None else start
            ok, n = rollout(env, encoder, planner, x0, int(goal), max_steps, rng, mode)
            succ += ok
            steps.append(n)
        report.rows.append(
            {
                "seed": int(seed),
                "planner": planner.planner,
                "start": -1 if start is None else int(start),
                "goal": int(goal),
                "episodes": int(episodes),
                "successes": int(succ),
                "success_rate": succ / episodes if episodes else float("nan"),
                "mean_steps": float(np.mean(steps)) if steps else float("nan"),
            }
        )
    return report
