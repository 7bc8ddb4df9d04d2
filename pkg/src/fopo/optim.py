"""PPO, GRPO, FoPO and GR.FoPO gradients plus the maximum-likelihood pretraining gradient.

All gradients are ascent directions over a shared parameter vector.  A batch
is a list of :class:`Sample`; FoPO batches additionally carry the pairing of
each step with the counterpart's next step in the same trajectory.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, NumericError
from .paramcore import Role, RoleContext, SoftmaxPolicy, StateFeatures

ALGORITHMS = ("ppo", "grpo", "fopo", "gr_fopo")
ORIENTATIONS = ("counterpart", "self")
ADVANTAGE_MODES = ("plain", "group_relative", "group_relative_no_std")


@dataclass(frozen=True)
class UpdateConfig:
    """Optimizer hyperparameters; defaults are the RL-stage values.

    ``fopo_orientation="counterpart"`` moves along the counterpart's ratio
    gradient (scaled by the inner product of both ratio gradients);
    ``"self"`` moves along the agent's own ratio gradient scaled by the
    squared norm of the counterpart's.
    """

    alpha: float = 1e-5
    beta: float = 0.1
    eta: float = 0.1
    clip_epsilon: float = 0.2
    algorithm: str = "fopo"
    group_size: int = 4
    batch_size: int = 16
    epochs: int = 1
    grad_cap: float = 10.0
    fopo_orientation: str = "counterpart"
    advantage_std: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.beta < 0 or self.eta < 0:
            raise ConfigError("beta and eta must be non-negative")
        if not 0 < self.clip_epsilon < 1:
            raise ConfigError("clip epsilon must lie in (0, 1)")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.group_relative and self.group_size < 2:
            raise ConfigError("group-relative algorithms need group_size >= 2")
        if self.fopo_orientation not in ORIENTATIONS:
            raise ConfigError(f"fopo_orientation must be one of {ORIENTATIONS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")

    @property
    def group_relative(self) -> bool:
        return self.algorithm in ("grpo", "gr_fopo")

    @property
    def foresight(self) -> bool:
        return self.algorithm in ("fopo", "gr_fopo")

    @property
    def advantage_mode(self) -> str:
        if not self.group_relative:
            return "plain"
        return "group_relative" if self.advantage_std else "group_relative_no_std"

    def with_(self, **changes) -> "UpdateConfig":
        return replace(self, **changes)


def pretrain_defaults(**overrides) -> UpdateConfig:
    return UpdateConfig(alpha=5e-5, beta=0.01, eta=0.0, batch_size=32, algorithm="ppo").with_(**overrides)


def rl_defaults(**overrides) -> UpdateConfig:
    return UpdateConfig().with_(**overrides)


@dataclass(frozen=True)
class Sample:
    """One recorded step: state, action, behavior log-prob and its advantage."""

    ctx: RoleContext
    sf: StateFeatures
    action: int
    logp_old: float
    advantage: float
    role: Role = Role.AGENT1
    t: int = 0


@dataclass(frozen=True)
class PairedStep:
    self_step: Sample
    counterpart_step: Sample | None


# -- scalar building blocks ----------------------------------------------


def clipped_surrogate(ratio: float, adv: float, eps: float) -> float:
    return min(ratio * adv, float(np.clip(ratio, 1 - eps, 1 + eps)) * adv)


def surrogate_is_unclipped(ratio: float, adv: float, eps: float) -> bool:
    """True when the min selects ``ratio * adv``, i.e. the surrogate still moves with the ratio."""
    return ratio * adv <= float(np.clip(ratio, 1 - eps, 1 + eps)) * adv


def clipped_advantage(ratio: float, adv: float, eps: float) -> float:
    """The advantage as it appears inside the clipped surrogate: surrogate / ratio."""
    return clipped_surrogate(ratio, adv, eps) / ratio


def advantage_plain(step_reward: float) -> float:
    return float(step_reward)


def advantage_group_relative(rewards: Sequence[float], mode: str = "group_relative") -> np.ndarray:
    """Group-normalized rewards; population std, and zeros for a degenerate group."""
    if mode not in ADVANTAGE_MODES[1:]:
        raise ConfigError(f"unknown group-relative mode {mode!r}")
    r = np.asarray(rewards, dtype=float)
    if len(r) < 2:
        raise ContractViolation("a group needs at least two rewards")
    centered = r - r.mean()
    std = r.std()
    if std < 1e-8:
        return np.zeros(len(r))
    return centered / std if mode == "group_relative" else centered


# -- batch objectives and gradients --------------------------------------


def _check_batch(batch) -> None:
    if not batch:
        raise ContractViolation("empty batch")


def ppo_objective(policy: SoftmaxPolicy, batch: Sequence[Sample], theta, theta_old, cfg: UpdateConfig) -> float:
    """Batch-mean clipped surrogate minus beta times the batch-mean KL to ``theta_old``."""
    _check_batch(batch)
    total = 0.0
    for s in batch:
        ratio = float(np.exp(policy.log_prob(theta, s.ctx, s.sf, s.action) - s.logp_old))
        total += clipped_surrogate(ratio, s.advantage, cfg.clip_epsilon)
    kl, _ = policy.kl_divergence_and_gradient(theta, theta_old, [(s.ctx, s.sf) for s in batch])
    return total / len(batch) - cfg.beta * kl


def _step_terms(policy, s: Sample, theta, theta_old):
    ratio, ratio_grad, _, kl_grad = policy.ratio_and_kl(theta, theta_old, s.ctx, s.sf, s.action, s.logp_old)
    return ratio, ratio_grad, kl_grad


def _ppo_step(s: Sample, terms, cfg) -> np.ndarray:
    ratio, ratio_grad, kl_grad = terms
    g = -cfg.beta * kl_grad
    if surrogate_is_unclipped(ratio, s.advantage, cfg.clip_epsilon):
        g = g + s.advantage * ratio_grad
    return g


def ppo_gradient_sum(policy, batch, theta, theta_old, cfg) -> np.ndarray:
    """Unnormalized sum of per-step PPO gradients; partial sums over disjoint batches add up."""
    grad = np.zeros(policy.dim)
    for s in batch:
        grad += _ppo_step(s, _step_terms(policy, s, theta, theta_old), cfg)
    return grad


def ppo_gradient(policy, batch, theta, theta_old, cfg: UpdateConfig) -> np.ndarray:
    _check_batch(batch)
    return ppo_gradient_sum(policy, batch, theta, theta_old, cfg) / len(batch)


def fopo_correction(policy, pair: PairedStep, theta, theta_old, cfg: UpdateConfig) -> np.ndarray:
    """Foresight term of one step and its successor; zero when the step has no successor."""
    if pair.counterpart_step is None or cfg.eta == 0:
        return np.zeros(policy.dim)
    eps = cfg.clip_epsilon
    own, other = pair.self_step, pair.counterpart_step
    r1, v1 = policy.ratio_and_gradient(theta, theta_old, own.ctx, own.sf, own.action, own.logp_old)
    r2, v2 = policy.ratio_and_gradient(theta, theta_old, other.ctx, other.sf, other.action, other.logp_old)
    own_value = clipped_surrogate(r1, own.advantage, eps)
    other_adv = clipped_advantage(r2, other.advantage, eps)
    return foresight_term(v1, v2, own_value, other_adv, cfg.eta, cfg.fopo_orientation)


def foresight_term(v1, v2, own_value: float, other_adv: float, eta: float, orientation: str = "counterpart"):
    """``eta * O1 * A2 * <v1, v2> * v2``, or ``eta * O1 * A2 * |v2|^2 * v1`` for the self orientation."""
    scale = eta * own_value * other_adv
    if orientation == "counterpart":
        return scale * float(v1 @ v2) * v2
    if orientation == "self":
        return scale * float(v2 @ v2) * v1
    raise ConfigError(f"unknown orientation {orientation!r}")


def fopo_gradient_sum(policy, pairs: Sequence[PairedStep], theta, theta_old, cfg) -> np.ndarray:
    """Sum over steps of the PPO gradient plus each step's foresight correction.

    Ratio gradients are computed once per step and shared between the step's
    own PPO term and the corrections in which it appears.
    """
    cache: dict = {}

    def terms(s):
        key = id(s)
        if key not in cache:
            cache[key] = _step_terms(policy, s, theta, theta_old)
        return cache[key]

    eps = cfg.clip_epsilon
    grad = np.zeros(policy.dim)
    for pair in pairs:
        own = pair.self_step
        own_terms = terms(own)
        grad += _ppo_step(own, own_terms, cfg)
        other = pair.counterpart_step
        if other is None or cfg.eta == 0:
            continue
        r1, v1, _ = own_terms
        r2, v2, _ = terms(other)
        grad += foresight_term(
            v1,
            v2,
            clipped_surrogate(r1, own.advantage, eps),
            clipped_advantage(r2, other.advantage, eps),
            cfg.eta,
            cfg.fopo_orientation,
        )
    return grad


def fopo_gradient(policy, pairs: Sequence[PairedStep], theta, theta_old, cfg: UpdateConfig) -> np.ndarray:
    """PPO gradient plus the batch-mean foresight correction over every step."""
    _check_batch(pairs)
    return fopo_gradient_sum(policy, pairs, theta, theta_old, cfg) / len(pairs)


def algorithm_gradient(policy, pairs: Sequence[PairedStep], theta, theta_old, cfg: UpdateConfig) -> np.ndarray:
    """Dispatch on ``cfg.algorithm``; advantages are assumed already filled in."""
    if cfg.foresight:
        return fopo_gradient(policy, pairs, theta, theta_old, cfg)
    return ppo_gradient(policy, [p.self_step for p in pairs], theta, theta_old, cfg)


# -- pretraining ----------------------------------------------------------


def pretrain_objective(policy, batch, theta, theta_init, cfg: UpdateConfig) -> float:
    """Batch-mean log-likelihood of the target actions minus beta times the KL to ``theta_init``."""
    _check_batch(batch)
    ll = sum(policy.log_prob(theta, ctx, sf, a) for ctx, sf, a in batch) / len(batch)
    kl, _ = policy.kl_divergence_and_gradient(theta, theta_init, [(ctx, sf) for ctx, sf, _ in batch])
    return ll - cfg.beta * kl


def pretrain_gradient(policy, batch, theta, theta_init, cfg: UpdateConfig) -> np.ndarray:
    """Gradient of :func:`pretrain_objective`; ``batch`` holds (ctx, state features, target action)."""
    _check_batch(batch)
    grad = np.zeros(policy.dim)
    for ctx, sf, a in batch:
        grad += policy.log_prob_gradient(theta, ctx, sf, a)
        if cfg.beta:
            grad -= cfg.beta * policy.state_kl_and_gradient(theta, theta_init, ctx, sf)[1]
    return grad / len(batch)


def apply_update(theta, gradient, alpha: float, grad_cap: float | None = 10.0) -> np.ndarray:
    """Ascent step ``theta + alpha * g`` with the gradient rescaled to norm at most ``grad_cap``."""
    g = np.asarray(gradient, dtype=float)
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NumericError(f"non-finite gradient at {len(bad)} coordinates (first: {bad[:5].tolist()})")
    if grad_cap is not None:
        norm = float(np.linalg.norm(g))
        if norm > grad_cap:
            g = g * (grad_cap / norm)
    return np.asarray(theta, dtype=float) + alpha * g
