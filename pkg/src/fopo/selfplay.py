"""Self-play rollouts, step pairing, pretraining on scripted dialogues and the training loop.

Training proceeds in phases.  Each phase freezes the behavior parameters,
collects episodes with both roles played by the same parameters, turns
terminal rewards into per-step advantages and takes one ascent step per epoch.
Every episode seed is derived from (master seed, phase, episode index), so
collection is reproducible regardless of how episodes are spread over workers.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .environments import (
    PRAGMATIC_UPDATE,
    Environment,
    GameOutcome,
    GameState,
    Result,
    RSAEnv,
    TabooEnv,
    TabooWorld,
    make_env,
)
from .errors import ConfigError, ContractViolation, NumericError
from .optim import (
    PairedStep,
    Sample,
    UpdateConfig,
    advantage_group_relative,
    algorithm_gradient,
    apply_update,
    pretrain_gradient,
)
from .paramcore import Role, RoleContext, SoftmaxPolicy, StateFeatures
from .rewards import RewardConfig, propagate_decay, rsa_terminal_reward, taboo_terminal_reward
from .rsa_oracle import ObjectSet, golden_chain, select_feature

log = logging.getLogger(__name__)

COLLAPSE_NATS = 0.01
CONTEXTS = {role: RoleContext.for_role(role) for role in Role}


# -- players ------------------------------------------------------------------


class Player:
    """Chooses an action in a state; returns (action, log-probability or nan)."""

    def act(self, env: Environment, state: GameState, rng: np.random.Generator) -> tuple[int, float]:
        raise NotImplementedError


@dataclass
class PolicyPlayer(Player):
    policy: SoftmaxPolicy
    theta: np.ndarray
    greedy: bool = False

    def act(self, env, state, rng):
        ctx = CONTEXTS[state.whose_turn]
        sf = env.features(state)
        if self.greedy:
            return self.policy.greedy(self.theta, ctx, sf)
        return self.policy.sample(self.theta, ctx, sf, rng)


class UniformPlayer(Player):
    def act(self, env, state, rng):
        legal = env.legal_actions(state)
        return int(rng.choice(legal)), -math.log(len(legal))


class OracleSpeaker(Player):
    """Rational speaker: the feature minimizing the target's rank among the candidates."""

    def act(self, env, state, rng):
        p = state.payload
        d, _ = select_feature(p.instance.target, p.candidate_objects, p.used)
        return d, 0.0


class OracleListener(Player):
    """Pragmatic listener; a singleton belief set ends the game on the same turn."""

    def act(self, env, state, rng):
        return PRAGMATIC_UPDATE, 0.0


class HeuristicAttacker(Player):
    """Plays the unused cue most associated with the target."""

    def act(self, env, state, rng):
        p = state.payload
        row = p.world.weights[p.world.target].copy()
        row[list(p.cues)] = -np.inf
        return int(np.argmax(row)), 0.0


class AssociativeAttacker(Player):
    """Random attacker that samples unused cues in proportion to their association with the target."""

    def act(self, env, state, rng):
        p = state.payload
        row = p.world.weights[p.world.target].copy()
        row[list(p.cues)] = 0.0
        probs = row / row.sum()
        c = int(rng.choice(len(row), p=probs))
        return c, math.log(probs[c])


class HeuristicDefender(Player):
    """Guesses the belief argmax when confident or on its final turn, else responds with the least likely top word."""

    def __init__(self, confident: float = 0.9):
        self.confident = confident

    def act(self, env, state, rng):
        world = state.payload.world
        post = world.posterior(state.payload.cues)
        last_turn = state.t + 1 >= world.max_turns
        if post.max() > self.confident or last_turn:
            return world.top_k + int(np.argmax(post)), 0.0
        tops = world.top_words(state.payload.cues[-1])
        return int(np.argmin([post[w] for w in tops])), 0.0


class PassiveDefender(Player):
    """Never guesses; responds with the least likely top word (useful as a fixed opponent)."""

    def act(self, env, state, rng):
        world = state.payload.world
        post = world.posterior(state.payload.cues)
        tops = world.top_words(state.payload.cues[-1])
        return int(np.argmin([post[w] for w in tops])), 0.0


def scripted_players(game: str) -> dict:
    if game == "rsa":
        return {Role.AGENT1: OracleSpeaker(), Role.AGENT2: OracleListener()}
    if game == "taboo":
        return {Role.AGENT1: HeuristicAttacker(), Role.AGENT2: HeuristicDefender()}
    raise ConfigError(f"unknown game {game!r}")


# -- trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    t: int
    role: Role
    action: int
    logp: float
    features: StateFeatures
    entropy: float = float("nan")
    state: GameState | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Trajectory:
    instance_id: str
    steps: tuple
    outcome: GameOutcome
    seed: int | tuple
    terminal_rewards: dict
    step_rewards: tuple | None = None

    @property
    def roles(self) -> list[Role]:
        return [s.role for s in self.steps]

    def to_record(self) -> dict:
        return {
            "instance": self.instance_id,
            "seed": list(self.seed) if isinstance(self.seed, tuple) else self.seed,
            "outcome": self.outcome.result.value,
            "turns": self.outcome.total_turns,
            "terminal_rewards": {r.name.lower(): v for r, v in self.terminal_rewards.items()},
            "steps": [
                {
                    "t": s.t,
                    "role": s.role.name.lower(),
                    "action": s.action,
                    "logp": s.logp,
                    "reward": None if self.step_rewards is None else self.step_rewards[i],
                }
                for i, s in enumerate(self.steps)
            ],
        }


@lru_cache(maxsize=100_000)
def rsa_conv_min(instance: ObjectSet) -> int:
    return RSAEnv.conv_min_turns(golden_chain(instance).min_rounds)


def terminal_rewards(game: str, instance, outcome: GameOutcome, cfg: RewardConfig) -> dict:
    if game == "rsa":
        if outcome.result is Result.RSA_SUCCESS:
            value = rsa_terminal_reward(outcome.total_turns, rsa_conv_min(instance), RSAEnv.max_turns(instance), cfg)
        else:
            value = 0.0
        return {Role.AGENT1: value, Role.AGENT2: value}
    attacker, defender = taboo_terminal_reward(outcome.result)
    return {Role.AGENT1: attacker, Role.AGENT2: defender}


def rollout(
    env: Environment,
    players: dict,
    instance,
    seed,
    instance_id: str = "",
    reward_cfg: RewardConfig = RewardConfig(),
    record_entropy: bool = False,
    keep_states: bool = False,
) -> Trajectory:
    """Play one episode; terminal rewards are attached, per-step rewards are not."""
    rng = np.random.default_rng(seed)
    state = env.reset(instance, instance_id)
    steps = []
    while True:
        role = state.whose_turn
        player = players[role]
        action, logp = player.act(env, state, rng)
        feats = env.features(state)
        ent = float("nan")
        if record_entropy and isinstance(player, PolicyPlayer):
            ent = player.policy.entropy(player.theta, CONTEXTS[role], feats)
        steps.append(StepRecord(state.t, role, int(action), float(logp), feats, ent, state if keep_states else None))
        state, outcome = env.step(state, action)
        if outcome.terminal:
            break
    rewards = terminal_rewards(env.name, instance, outcome, reward_cfg)
    return Trajectory(instance_id, tuple(steps), outcome, seed, rewards)


def propagate(traj: Trajectory, cfg: RewardConfig) -> Trajectory:
    """Fill per-step rewards by decaying each agent's terminal reward backward."""
    rewards = propagate_decay(traj.roles, traj.terminal_rewards, cfg)
    return replace(traj, step_rewards=tuple(float(r) for r in rewards))


def to_samples(traj: Trajectory, advantages: Sequence[float]) -> list[Sample]:
    return [
        Sample(CONTEXTS[s.role], s.features, s.action, s.logp, float(a), s.role, s.t)
        for s, a in zip(traj.steps, advantages)
    ]


def pair_steps(samples: Sequence[Sample]) -> list[PairedStep]:
    """Pair each step of one trajectory with the counterpart's immediately following step."""
    pairs = []
    for i, s in enumerate(samples):
        nxt = samples[i + 1] if i + 1 < len(samples) else None
        if nxt is not None and (nxt.t != s.t + 1 or nxt.role == s.role):
            raise ContractViolation("steps must be consecutive and alternate between agents")
        pairs.append(PairedStep(s, nxt))
    return pairs


def plain_advantages(traj: Trajectory, cfg: RewardConfig) -> list[float]:
    return list(propagate(traj, cfg).step_rewards)


def group_advantages(group: Sequence[Trajectory], mode: str) -> list[list[float]]:
    """Per-role group normalization of terminal rewards over rollouts of one instance."""
    per_role = {}
    for role in Role:
        per_role[role] = advantage_group_relative([tr.terminal_rewards[role] for tr in group], mode)
    return [[float(per_role[s.role][g]) for s in tr.steps] for g, tr in enumerate(group)]


# -- pretraining ------------------------------------------------------------


def scripted_dataset(game: str, env: Environment, instances: Sequence, seed: int = 0) -> list:
    """(context, state features, action) triples from scripted play.

    RSA uses every oracle step; Taboo keeps only the winning role's steps.
    """
    if game == "taboo":
        return taboo_pretrain_dataset(env, instances, seed)
    players = scripted_players(game)
    data = []
    for i, inst in enumerate(instances):
        traj = rollout(env, players, inst, (seed, i))
        data.extend((CONTEXTS[s.role], s.features, s.action) for s in traj.steps)
    return data


def taboo_pretrain_dataset(env: TabooEnv, worlds: Sequence[TabooWorld], seed: int = 0) -> list:
    """Winning steps from heuristic attackers against both heuristic and associative-random opponents.

    The scripted attacker almost always loses to the scripted defender, so
    attacker examples come from games against a passive defender.
    """
    data = []
    pairings = [
        {Role.AGENT1: HeuristicAttacker(), Role.AGENT2: HeuristicDefender()},
        {Role.AGENT1: AssociativeAttacker(), Role.AGENT2: HeuristicDefender()},
        {Role.AGENT1: HeuristicAttacker(), Role.AGENT2: PassiveDefender()},
    ]
    for i, world in enumerate(worlds):
        for j, players in enumerate(pairings):
            traj = rollout(env, players, world, (seed, i, j))
            r = traj.outcome.result
            keep = {Role.AGENT1} if r is Result.ATTACKER_WIN else {Role.AGENT2} if r is Result.DEFENDER_WIN else set()
            data.extend((CONTEXTS[s.role], s.features, s.action) for s in traj.steps if s.role in keep)
    return data


@dataclass
class PretrainResult:
    theta: np.ndarray
    mean_log_likelihood: float
    epochs: int


def pretrain(
    policy: SoftmaxPolicy,
    theta_init: np.ndarray,
    dataset: Sequence,
    cfg: UpdateConfig,
    epochs: int = 20,
    seed: int = 0,
) -> PretrainResult:
    """Minibatch ascent on log-likelihood with a KL anchor to ``theta_init``."""
    if not dataset:
        raise ContractViolation("empty pretraining dataset")
    rng = np.random.default_rng(seed)
    theta = np.array(theta_init, dtype=float)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            g = pretrain_gradient(policy, batch, theta, theta_init, cfg)
            theta = apply_update(theta, g, cfg.alpha, cfg.grad_cap)
    ll = float(np.mean([policy.log_prob(theta, ctx, sf, a) for ctx, sf, a in dataset]))
    return PretrainResult(theta, ll, epochs)


def action_agreement(policy, theta, dataset) -> float:
    """Fraction of dataset actions reproduced by greedy decoding."""
    hits = [policy.greedy(theta, ctx, sf)[0] == a for ctx, sf, a in dataset]
    return float(np.mean(hits))


# -- training loop ------------------------------------------------------------


@dataclass(frozen=True)
class TrainRunConfig:
    game: str = "rsa"
    update: UpdateConfig = field(default_factory=UpdateConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    episodes_per_phase: int = 256
    phases: int = 200
    checkpoint_every: int = 10
    keep_last: int = 5
    seed: int = 0
    workers: int = 1
    env_kwargs: dict = field(default_factory=dict)
    dump_trajectories: bool = False

    def __post_init__(self):
        if self.episodes_per_phase < 1 or self.phases < 0:
            raise ConfigError("episodes_per_phase must be positive and phases non-negative")
        if self.update.group_relative and self.episodes_per_phase % self.update.group_size:
            raise ConfigError("episodes_per_phase must be a multiple of group_size")
        if self.game not in ("rsa", "taboo"):
            raise ConfigError(f"unknown game {self.game!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TrainResult:
    theta: np.ndarray
    metrics: list
    checkpoints: list


def _episode_plan(run: TrainRunConfig, phase: int, n_instances: int) -> list[tuple[int, tuple]]:
    """(instance index, episode seed) for every episode of a phase; groups share an instance."""
    rng = np.random.default_rng([run.seed, phase, 0xC0])
    group = run.update.group_size if run.update.group_relative else 1
    n_groups = run.episodes_per_phase // group
    picks = rng.integers(n_instances, size=n_groups)
    plan = []
    for g, idx in enumerate(picks):
        for k in range(group):
            plan.append((int(idx), (run.seed, phase, g * group + k)))
    return plan


def _collect(args) -> list[Trajectory]:
    game, env_kwargs, policy_spec, theta, instances, ids, plan, reward_cfg = args
    env = make_env(game, **env_kwargs)
    policy = SoftmaxPolicy.from_spec(policy_spec)
    player = PolicyPlayer(policy, theta)
    players = {Role.AGENT1: player, Role.AGENT2: player}
    return [
        rollout(env, players, instances[i], seed, ids[i], reward_cfg, record_entropy=True) for i, seed in plan
    ]


def collect_phase(run, policy, theta, instances, ids, phase, pool=None) -> list[Trajectory]:
    plan = _episode_plan(run, phase, len(instances))
    base = (run.game, run.env_kwargs, policy.spec(), theta, instances, ids)
    if pool is None or run.workers <= 1:
        return _collect(base + (plan, run.reward))
    chunks = np.array_split(np.arange(len(plan)), run.workers)
    jobs = [base + ([plan[i] for i in c], run.reward) for c in chunks if len(c)]
    out = []
    for part in pool.map(_collect, jobs):
        out.extend(part)
    return out


def build_pairs(run: TrainRunConfig, trajs: Sequence[Trajectory]) -> list[PairedStep]:
    cfg = run.update
    if cfg.group_relative:
        g = cfg.group_size
        advs = []
        for start in range(0, len(trajs), g):
            advs.extend(group_advantages(trajs[start : start + g], cfg.advantage_mode))
    else:
        advs = [plain_advantages(tr, run.reward) for tr in trajs]
    pairs = []
    for tr, adv in zip(trajs, advs):
        pairs.extend(pair_steps(to_samples(tr, adv)))
    return pairs


def phase_metrics(game: str, trajs: Sequence[Trajectory]) -> dict:
    results = [tr.outcome.result for tr in trajs]
    ent = [s.entropy for tr in trajs for s in tr.steps if not math.isnan(s.entropy)]
    m = {
        "episodes": len(trajs),
        "steps": sum(len(tr.steps) for tr in trajs),
        "mean_turns": float(np.mean([tr.outcome.total_turns for tr in trajs])),
        "mean_reward": float(np.mean([tr.terminal_rewards[Role.AGENT1] for tr in trajs])),
        "entropy": float(np.mean(ent)) if ent else float("nan"),
    }
    if game == "rsa":
        m["success_rate"] = float(np.mean([r is Result.RSA_SUCCESS for r in results]))
    else:
        for key, res in (("attacker_win", Result.ATTACKER_WIN), ("defender_win", Result.DEFENDER_WIN), ("tie", Result.TIE)):
            m[key] = float(np.mean([r is res for r in results]))
    m["collapse"] = bool(m["entropy"] < COLLAPSE_NATS)
    return m


class CheckpointKeeper:
    """Keeps the most recent checkpoints plus every ``every``-th phase."""

    def __init__(self, directory: Path, every: int, keep_last: int):
        self.directory = Path(directory)
        self.every = every
        self.keep_last = keep_last
        self.recent: list[Path] = []
        self.directory.mkdir(parents=True, exist_ok=True)

    def save(self, ckpt: Checkpoint) -> Path:
        path = save_checkpoint(self.directory / f"phase_{ckpt.step:05d}.ckpt", ckpt)
        self.recent.append(path)
        while len(self.recent) > self.keep_last:
            old = self.recent.pop(0)
            step = int(old.stem.split("_")[1])
            if self.every <= 0 or step % self.every:
                old.unlink(missing_ok=True)
        return path

    def kept(self) -> list[Path]:
        return sorted(self.directory.glob("phase_*.ckpt"))


def train(
    run: TrainRunConfig,
    policy: SoftmaxPolicy,
    theta_init: np.ndarray,
    instances: Sequence,
    instance_ids: Sequence[str] | None = None,
    out_dir=None,
    label: str = "",
    on_phase: Callable[[dict], bool | None] | None = None,
) -> TrainResult:
    """Offline self-play optimization; returns final parameters and per-phase metrics.

    ``on_phase`` receives each phase's metrics; returning True stops training early.
    """
    if not instances:
        raise ContractViolation("no training instances")
    ids = list(instance_ids or [f"{run.game}-{i:06d}" for i in range(len(instances))])
    instances = list(instances)
    theta = np.array(theta_init, dtype=float)
    cfg = run.update
    metrics: list[dict] = []
    keeper = CheckpointKeeper(Path(out_dir) / "checkpoints", run.checkpoint_every, run.keep_last) if out_dir else None
    metrics_fh = open(Path(out_dir) / "metrics.jsonl", "w", encoding="utf-8") if out_dir else None
    traj_fh = (
        open(Path(out_dir) / "trajectories.jsonl", "w", encoding="utf-8") if out_dir and run.dump_trajectories else None
    )
    pool = ProcessPoolExecutor(run.workers) if run.workers > 1 else None
    meta = {"label": label or cfg.algorithm, "algorithm": cfg.algorithm, "eta": cfg.eta, "game": run.game}
    try:
        for phase in range(1, run.phases + 1):
            theta_old = theta.copy()
            trajs = collect_phase(run, policy, theta_old, instances, ids, phase, pool)
            pairs = build_pairs(run, trajs)
            grad_norm = 0.0
            for _ in range(cfg.epochs):
                g = algorithm_gradient(policy, pairs, theta, theta_old, cfg)
                grad_norm = float(np.linalg.norm(g))
                try:
                    theta = apply_update(theta, g, cfg.alpha, cfg.grad_cap)
                except NumericError:
                    if keeper:
                        save_checkpoint(
                            keeper.directory / "diagnostic.ckpt",
                            Checkpoint(policy, theta, theta_old, phase, None, dict(meta, error="non-finite gradient")),
                        )
                    raise
            kl, _ = policy.kl_divergence_and_gradient(theta, theta_old, [(p.self_step.ctx, p.self_step.sf) for p in pairs])
            m = {"phase": phase, **phase_metrics(run.game, trajs), "kl": kl, "grad_norm": grad_norm}
            metrics.append(m)
            if m["collapse"]:
                log.warning("phase %d: policy entropy %.4g nats below collapse threshold", phase, m["entropy"])
            if metrics_fh:
                metrics_fh.write(json.dumps(m) + "\n")
                metrics_fh.flush()
            if traj_fh:
                for tr in trajs:
                    traj_fh.write(json.dumps(tr.to_record()) + "\n")
            if keeper:
                keeper.save(Checkpoint(policy, theta, theta_old, phase, None, meta))
            if on_phase and on_phase(m):
                break
    finally:
        if pool:
            pool.shutdown()
        for fh in (metrics_fh, traj_fh):
            if fh:
                fh.close()
    return TrainResult(theta, metrics, keeper.kept() if keeper else [])
