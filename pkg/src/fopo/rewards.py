"""Terminal rewards for both games and backward decay to per-step rewards."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation
from .paramcore import Role


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 2.0
    epsilon: float = 0.01
    delta: float = 0.8

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")


def rsa_terminal_reward(T: int, conv_min: int, n: int, cfg: RewardConfig = RewardConfig()) -> float:
    """Shaped success reward shared by speaker and listener.

    ``T``, ``conv_min`` and ``n`` must use the same unit (total turns here).
    Completing in exactly ``conv_min`` turns earns 1; longer games decay
    linearly toward zero at ``n``, then the value is raised to ``gamma``.
    """
    if T < 1 or conv_min < 1:
        raise ContractViolation("turn counts must be at least 1")
    if conv_min > n:
        raise ConfigError(f"conv_min={conv_min} exceeds n={n}; turn units probably disagree")
    if T <= conv_min:
        shaped = T / conv_min
    else:
        shaped = max(0.0, (n - T + cfg.epsilon) / (n - conv_min + cfg.epsilon))
    return float(np.clip(shaped**cfg.gamma, 0.0, 1.0))


TABOO_REWARDS = {
    "attacker_win": (1.0, -1.0),
    "defender_win": (-1.0, 1.0),
    "tie": (0.0, 0.0),
}


def taboo_terminal_reward(result) -> tuple[float, float]:
    """(attacker, defender) rewards for a finished Taboo game."""
    key = getattr(result, "value", result)
    if key not in TABOO_REWARDS:
        raise ContractViolation(f"{key!r} is not a terminal Taboo outcome")
    return TABOO_REWARDS[key]


def propagate_decay(
    roles: Sequence, terminal: Mapping, cfg: RewardConfig = RewardConfig()
) -> np.ndarray:
    """Per-step rewards with ``R(a_t) = delta * R(a_{t+2})`` inside each agent's chain.

    ``roles[t]`` names the agent acting at step t and ``terminal`` maps each
    agent to the reward on its last step.  Agents that never act are ignored.
    """
    if len(roles) == 0:
        raise ContractViolation("empty trajectory")
    roles = [Role.parse(r) for r in roles]
    terminal = {Role.parse(k): float(v) for k, v in terminal.items()}
    out = np.zeros(len(roles))
    for role in set(roles):
        idx = [t for t, r in enumerate(roles) if r == role]
        value = terminal.get(role)
        if value is None:
            raise ContractViolation(f"no terminal reward for {role.name}")
        for back, t in enumerate(reversed(idx)):
            out[t] = value * cfg.delta**back
    return out
