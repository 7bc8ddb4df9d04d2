import json

import numpy as np
import pytest

from fopo.datagen import generate_corpus
from fopo.environments import RSAEnv, Result, TabooEnv
from fopo.errors import ConfigError, ContractViolation
from fopo.optim import Sample, pretrain_defaults, rl_defaults
from fopo.paramcore import Role, SoftmaxPolicy
from fopo.rewards import RewardConfig
from fopo.selfplay import (
    CONTEXTS,
    AssociativeAttacker,
    CheckpointKeeper,
    HeuristicDefender,
    PolicyPlayer,
    TrainRunConfig,
    UniformPlayer,
    action_agreement,
    build_pairs,
    collect_phase,
    group_advantages,
    pair_steps,
    pretrain,
    propagate,
    rollout,
    scripted_dataset,
    scripted_players,
    train,
)
from fopo.checkpoint import Checkpoint
from fopo.rsa_oracle import golden_chain


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(seed=0, rl_count=60, pretrain_count=120, shapes=[(3, 4)])


@pytest.fixture(scope="module")
def rsa_policy():
    return SoftmaxPolicy(RSAEnv.n_features, game="rsa")


def self_players(policy, theta):
    p = PolicyPlayer(policy, theta)
    return {Role.AGENT1: p, Role.AGENT2: p}


def test_oracle_rollout_on_fig2(fig2):
    traj = rollout(RSAEnv(), scripted_players("rsa"), fig2, seed=0)
    assert traj.outcome.result is Result.RSA_SUCCESS
    assert traj.outcome.total_turns == 2 * golden_chain(fig2).min_rounds
    assert traj.terminal_rewards == {Role.AGENT1: 1.0, Role.AGENT2: 1.0}


def test_rollout_determinism(small_corpus, rsa_policy):
    rng = np.random.default_rng(0)
    theta = rng.normal(0, 0.5, rsa_policy.dim)
    env = RSAEnv()
    inst = small_corpus.rl_instances[0]
    a = rollout(env, self_players(rsa_policy, theta), inst, seed=(1, 2, 3))
    b = rollout(env, self_players(rsa_policy, theta), inst, seed=(1, 2, 3))
    assert [(s.action, s.logp) for s in a.steps] == [(s.action, s.logp) for s in b.steps]
    assert a.outcome == b.outcome


def test_random_taboo_terminates():
    corpus = generate_corpus(seed=0, rl_count=50, pretrain_count=1, game="taboo")
    env = TabooEnv()
    players = {Role.AGENT1: UniformPlayer(), Role.AGENT2: UniformPlayer()}
    for i, world in enumerate(corpus.taboo_rl):
        traj = rollout(env, players, world, seed=i)
        assert traj.outcome.terminal and traj.outcome.total_turns <= world.max_turns
        assert sum(traj.terminal_rewards.values()) == 0


def test_heuristic_defender_beats_associative_attacker():
    corpus = generate_corpus(seed=0, rl_count=200, pretrain_count=1, game="taboo")
    env = TabooEnv()
    players = {Role.AGENT1: AssociativeAttacker(), Role.AGENT2: HeuristicDefender()}
    results = [rollout(env, players, w, seed=i).outcome.result for i, w in enumerate(corpus.taboo_rl)]
    assert np.mean([r is Result.DEFENDER_WIN for r in results]) > 0.5


def make_samples(roles):
    return [Sample(CONTEXTS[r], None, 0, 0.0, 1.0, r, t) for t, r in enumerate(roles)]


def test_pair_steps_counts():
    pairs = pair_steps(make_samples([Role.AGENT1, Role.AGENT2, Role.AGENT1, Role.AGENT2]))
    assert len(pairs) == 4
    assert sum(p.counterpart_step is not None for p in pairs) == 3
    assert pairs[-1].counterpart_step is None
    single = pair_steps(make_samples([Role.AGENT1]))
    assert len(single) == 1 and single[0].counterpart_step is None
    with pytest.raises(ContractViolation):
        pair_steps(make_samples([Role.AGENT1, Role.AGENT1]))


def test_propagate_idempotent_and_values(small_corpus):
    traj = rollout(RSAEnv(), scripted_players("rsa"), small_corpus.rl_instances[3], seed=0)
    cfg = RewardConfig()
    once = propagate(traj, cfg)
    assert propagate(once, cfg) == once
    assert once.step_rewards[-1] == traj.terminal_rewards[traj.steps[-1].role]


def test_group_advantages_per_role(small_corpus, rsa_policy):
    theta = np.zeros(rsa_policy.dim)
    env = RSAEnv()
    inst = small_corpus.rl_instances[0]
    group = [rollout(env, self_players(rsa_policy, theta), inst, seed=(0, k)) for k in range(4)]
    advs = group_advantages(group, "group_relative")
    terminal = np.array([tr.terminal_rewards[Role.AGENT1] for tr in group])
    for tr, adv in zip(group, advs):
        assert len(adv) == len(tr.steps)
        assert len(set(adv)) == 1  # no decay: every step of a rollout shares its advantage
    col = np.array([a[0] for a in advs])
    if terminal.std() > 1e-8:
        assert np.allclose(col, (terminal - terminal.mean()) / terminal.std())


def test_scripted_pretraining_generalizes(small_corpus, rsa_policy):
    env = RSAEnv()
    train_set = scripted_dataset("rsa", env, small_corpus.pretrain_instances[:80])
    held_out = scripted_dataset("rsa", env, small_corpus.pretrain_instances[80:], seed=1)
    result = pretrain(rsa_policy, np.zeros(rsa_policy.dim), train_set, pretrain_defaults(alpha=0.5), epochs=10)
    assert action_agreement(rsa_policy, result.theta, held_out) >= 0.9


def test_strong_kl_anchor_keeps_parameters_close(small_corpus, rsa_policy):
    env = RSAEnv()
    data = scripted_dataset("rsa", env, small_corpus.pretrain_instances[:30])
    theta0 = np.zeros(rsa_policy.dim)
    result = pretrain(rsa_policy, theta0, data, pretrain_defaults(alpha=1e-4, beta=1e3, grad_cap=None), epochs=5)
    assert np.linalg.norm(result.theta - theta0) <= 0.1


def test_pretraining_memorizes_one_dialogue(fig2, rsa_policy):
    data = scripted_dataset("rsa", RSAEnv(), [fig2])
    result = pretrain(rsa_policy, np.zeros(rsa_policy.dim), data, pretrain_defaults(alpha=1.0, beta=0.0), epochs=300)
    assert action_agreement(rsa_policy, result.theta, data) == 1.0
    assert np.exp(result.mean_log_likelihood) > 0.9


def test_pretrain_rejects_empty_dataset(rsa_policy):
    with pytest.raises(ContractViolation):
        pretrain(rsa_policy, np.zeros(rsa_policy.dim), [], pretrain_defaults())


def test_zero_phases_returns_initial_parameters(small_corpus, rsa_policy):
    theta0 = np.linspace(-0.1, 0.1, rsa_policy.dim)
    run = TrainRunConfig("rsa", rl_defaults(), episodes_per_phase=8, phases=0)
    result = train(run, rsa_policy, theta0, small_corpus.rl_instances)
    assert np.array_equal(result.theta, theta0) and result.metrics == []


def test_training_reproducible_and_worker_independent(small_corpus, rsa_policy):
    theta0 = np.zeros(rsa_policy.dim)
    run = TrainRunConfig("rsa", rl_defaults(alpha=0.2), episodes_per_phase=16, phases=3, seed=5)
    a = train(run, rsa_policy, theta0, small_corpus.rl_instances)
    b = train(run, rsa_policy, theta0, small_corpus.rl_instances)
    assert a.metrics == b.metrics and np.array_equal(a.theta, b.theta)
    parallel = train(TrainRunConfig(**{**run.__dict__, "workers": 2}), rsa_policy, theta0, small_corpus.rl_instances)
    assert parallel.metrics == a.metrics and np.array_equal(parallel.theta, a.theta)


def test_behavior_log_probs_are_fresh(small_corpus, rsa_policy):
    theta = np.random.default_rng(1).normal(0, 0.3, rsa_policy.dim)
    run = TrainRunConfig("rsa", rl_defaults(), episodes_per_phase=12, phases=1, seed=2)
    trajs = collect_phase(run, rsa_policy, theta, small_corpus.rl_instances, [str(i) for i in range(60)], phase=1)
    for tr in trajs:
        for s in tr.steps:
            assert s.logp == rsa_policy.log_prob(theta, CONTEXTS[s.role], s.features, s.action)
    pairs = build_pairs(run, trajs)
    assert len(pairs) == sum(len(tr.steps) for tr in trajs)


def test_group_runs_share_instances(small_corpus, rsa_policy):
    run = TrainRunConfig("rsa", rl_defaults(algorithm="grpo", group_size=4), episodes_per_phase=16, phases=1)
    trajs = collect_phase(run, rsa_policy, np.zeros(rsa_policy.dim), small_corpus.rl_instances, [str(i) for i in range(60)], 1)
    for g in range(0, 16, 4):
        assert len({tr.instance_id for tr in trajs[g : g + 4]}) == 1
    with pytest.raises(ConfigError):
        TrainRunConfig("rsa", rl_defaults(algorithm="grpo", group_size=4), episodes_per_phase=10)


def test_metrics_and_checkpoints_written(small_corpus, rsa_policy, tmp_path):
    run = TrainRunConfig("rsa", rl_defaults(alpha=0.2), episodes_per_phase=8, phases=12, checkpoint_every=10, keep_last=3)
    result = train(run, rsa_policy, np.zeros(rsa_policy.dim), small_corpus.rl_instances, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[0])
    for key in ("phase", "mean_reward", "success_rate", "entropy", "collapse", "kl"):
        assert key in rec
    names = [p.name for p in result.checkpoints]
    assert names == ["phase_00010.ckpt", "phase_00011.ckpt", "phase_00012.ckpt"]


def test_checkpoint_keeper_retention(tmp_path, rsa_policy):
    keeper = CheckpointKeeper(tmp_path, every=10, keep_last=5)
    for step in range(1, 26):
        keeper.save(Checkpoint(rsa_policy, np.zeros(rsa_policy.dim), None, step))
    steps = [int(p.stem.split("_")[1]) for p in keeper.kept()]
    assert steps == [10, 20, 21, 22, 23, 24, 25]
