"""In-domain evaluation, cross-play tournaments and entropy diagnostics.

Evaluation decodes greedily and never mutates parameters.  An RSA report's
headline number is the mean conversation reward scaled by 100; a Taboo
report carries win, loss and tie rates from each role's point of view.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .environments import Environment, Result, RSAEnv, make_env
from .errors import ContractViolation
from .paramcore import Role, SoftmaxPolicy, mean_entropy
from .rewards import RewardConfig
from .selfplay import COLLAPSE_NATS, CONTEXTS, Player, PolicyPlayer, rollout, rsa_conv_min

Z95 = 1.959963984540054
FORESIGHT_ALGORITHMS = ("fopo", "gr_fopo")


def _rate_half_width(p: float, n: int) -> float:
    return Z95 * math.sqrt(p * (1 - p) / n)


def _mean_half_width(x: np.ndarray) -> float:
    return Z95 * float(x.std(ddof=1)) / math.sqrt(len(x)) if len(x) > 1 else float("nan")


@dataclass
class EvalReport:
    game: str
    agent1: str
    agent2: str
    episodes: int
    mean_turns: float
    entropy: float = float("nan")
    mean_reward: float = float("nan")  # RSA only, scaled by 100
    success_rate: float = float("nan")
    turn_gap: float = float("nan")  # RSA successes: turns beyond the rational minimum
    attacker_win: float = float("nan")
    defender_win: float = float("nan")
    tie: float = float("nan")
    half_widths: dict = field(default_factory=dict)

    def rates_for(self, role: Role) -> dict:
        """Taboo (win, loss, tie) rates from the point of view of ``role``."""
        if self.game != "taboo":
            raise ContractViolation("role win rates are defined for Taboo reports only")
        win, loss = (self.attacker_win, self.defender_win) if role is Role.AGENT1 else (self.defender_win, self.attacker_win)
        return {"win": win, "loss": loss, "tie": self.tie}

    def headline(self) -> float:
        return self.mean_reward if self.game == "rsa" else self.attacker_win

    def to_record(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def evaluate_players(
    env: Environment,
    agent1: Player,
    agent2: Player,
    instances: Sequence,
    episodes: int | None = None,
    seed: int = 0,
    labels: tuple = ("agent1", "agent2"),
    reward_cfg: RewardConfig = RewardConfig(),
) -> EvalReport:
    """Play ``episodes`` games cycling through ``instances`` (default one game per instance)."""
    if not instances:
        raise ContractViolation("evaluation needs at least one instance")
    n = episodes or len(instances)
    players = {Role.AGENT1: agent1, Role.AGENT2: agent2}
    trajs = [
        rollout(env, players, instances[i % len(instances)], (seed, i), reward_cfg=reward_cfg, record_entropy=True)
        for i in range(n)
    ]
    turns = np.array([tr.outcome.total_turns for tr in trajs], dtype=float)
    ents = [s.entropy for tr in trajs for s in tr.steps if not math.isnan(s.entropy)]
    report = EvalReport(env.name, labels[0], labels[1], n, float(turns.mean()), float(np.mean(ents)) if ents else float("nan"))
    hw = {"mean_turns": _mean_half_width(turns)}
    if env.name == "rsa":
        rewards = 100.0 * np.array([tr.terminal_rewards[Role.AGENT1] for tr in trajs])
        success = np.array([tr.outcome.result is Result.RSA_SUCCESS for tr in trajs])
        report.mean_reward = float(rewards.mean())
        report.success_rate = float(success.mean())
        gaps = [
            tr.outcome.total_turns - rsa_conv_min(instances[i % len(instances)])
            for i, tr in enumerate(trajs)
            if success[i]
        ]
        report.turn_gap = float(np.mean(gaps)) if gaps else float("nan")
        hw.update(mean_reward=_mean_half_width(rewards), success_rate=_rate_half_width(report.success_rate, n))
    else:
        results = [tr.outcome.result for tr in trajs]
        for key, res in (("attacker_win", Result.ATTACKER_WIN), ("defender_win", Result.DEFENDER_WIN), ("tie", Result.TIE)):
            rate = sum(r is res for r in results) / n
            setattr(report, key, rate)
            hw[key] = _rate_half_width(rate, n)
    report.half_widths = hw
    return report


def evaluate_rsa(policy: SoftmaxPolicy, theta_speaker, theta_listener, instances, seed: int = 0, labels=("speaker", "listener")) -> EvalReport:
    return evaluate_players(
        RSAEnv(),
        PolicyPlayer(policy, np.asarray(theta_speaker), greedy=True),
        PolicyPlayer(policy, np.asarray(theta_listener), greedy=True),
        instances,
        seed=seed,
        labels=labels,
    )


def evaluate_taboo(
    policy: SoftmaxPolicy,
    theta_attacker,
    theta_defender,
    worlds,
    seed: int = 0,
    labels=("attacker", "defender"),
    **env_kwargs,
) -> EvalReport:
    return evaluate_players(
        make_env("taboo", **env_kwargs),
        PolicyPlayer(policy, np.asarray(theta_attacker), greedy=True),
        PolicyPlayer(policy, np.asarray(theta_defender), greedy=True),
        worlds,
        seed=seed,
        labels=labels,
    )


# -- tournaments ----------------------------------------------------------------


@dataclass(frozen=True)
class Entrant:
    label: str
    policy: SoftmaxPolicy
    theta: np.ndarray
    algorithm: str = ""

    @property
    def foresight(self) -> bool:
        return self.algorithm in FORESIGHT_ALGORITHMS


def entrant_from_checkpoint(path, label: str | None = None) -> Entrant:
    ckpt = load_checkpoint(path)
    p = Path(path)
    default = ckpt.meta.get("label") or (p.parent.name if p.stem == "final" else p.stem)
    return Entrant(label or default, ckpt.policy, ckpt.theta, ckpt.meta.get("algorithm", ""))


@dataclass
class TournamentResult:
    entrants: list
    reports: dict  # (agent1 index, agent2 index) -> EvalReport

    def matrix(self, metric: str | None = None) -> np.ndarray:
        n = len(self.entrants)
        out = np.full((n, n), np.nan)
        for (i, j), rep in self.reports.items():
            out[i, j] = rep.headline() if metric is None else getattr(rep, metric)
        return out

    def aggregates(self) -> dict:
        """Mean headline over all pairings, over pairings with a foresight-trained entrant, and over the rest."""
        groups = {"all": [], "include_fopo": [], "exclude_fopo": [], "fopo_agent1": [], "fopo_agent2": []}
        for (i, j), rep in self.reports.items():
            a, b = self.entrants[i], self.entrants[j]
            h = rep.headline()
            groups["all"].append(h)
            groups["include_fopo" if (a.foresight or b.foresight) else "exclude_fopo"].append(h)
            if a.foresight:
                groups["fopo_agent1"].append(h)
            if b.foresight:
                groups["fopo_agent2"].append(h)
        return {k: (float(np.mean(v)) if v else None) for k, v in groups.items()}

    def write(self, out_dir) -> Path:
        """pairings.csv, pairings.jsonl, long-format metrics.csv and aggregates.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        records = [self.reports[k].to_record() | {"half_widths": json.dumps(self.reports[k].half_widths)} for k in sorted(self.reports)]
        fields = list(records[0])
        with open(out / "pairings.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(records)
        with open(out / "pairings.jsonl", "w", encoding="utf-8") as fh:
            for k in sorted(self.reports):
                fh.write(json.dumps(self.reports[k].to_record()) + "\n")
        with open(out / "metrics_long.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["agent1", "agent2", "metric", "value"])
            for rec in records:
                for key, value in rec.items():
                    if isinstance(value, (int, float)) and not isinstance(value, bool):
                        w.writerow([rec["agent1"], rec["agent2"], key, value])
        (out / "aggregates.json").write_text(json.dumps(self.aggregates(), indent=2, sort_keys=True) + "\n")
        return out


def tournament(entrants: Sequence[Entrant], game: str, instances: Sequence, seed: int = 0, episodes=None, **env_kwargs) -> TournamentResult:
    """Every ordered (agent1, agent2) pairing including self-pairings, each with its own seed."""
    if len(entrants) < 2:
        raise ContractViolation("a tournament needs at least two entrants")
    env = make_env(game, **env_kwargs)
    reports = {}
    for i, a in enumerate(entrants):
        for j, b in enumerate(entrants):
            reports[(i, j)] = evaluate_players(
                env,
                PolicyPlayer(a.policy, a.theta, greedy=True),
                PolicyPlayer(b.policy, b.theta, greedy=True),
                instances,
                episodes=episodes,
                seed=seed * 1_000_003 + i * len(entrants) + j,
                labels=(a.label, b.label),
            )
    return TournamentResult(list(entrants), reports)


# -- diagnostics ----------------------------------------------------------------


@dataclass(frozen=True)
class EntropyDiagnostic:
    entropy: float
    collapse: bool
    states: int


def entropy_diagnostics(policy: SoftmaxPolicy, theta, states: Sequence, threshold: float = COLLAPSE_NATS) -> EntropyDiagnostic:
    """Mean categorical entropy over (context, state features) pairs and the collapse flag."""
    ent = mean_entropy(policy, theta, states)
    return EntropyDiagnostic(ent, ent < threshold, len(states))


def sample_states(env: Environment, players: dict, instances: Sequence, episodes: int, seed: int = 0) -> list:
    """(context, state features) pairs visited by ``players`` over ``episodes`` games."""
    states = []
    for i in range(episodes):
        tr = rollout(env, players, instances[i % len(instances)], (seed, i))
        states.extend((CONTEXTS[s.role], s.features) for s in tr.steps)
    return states
