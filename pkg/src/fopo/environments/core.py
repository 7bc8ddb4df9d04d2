"""Turn-alternating two-player game contract shared by both environments."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ContractViolation
from ..paramcore import Role, StateFeatures


class Result(str, enum.Enum):
    RSA_SUCCESS = "rsa_success"
    RSA_FAILURE = "rsa_failure"
    ATTACKER_WIN = "attacker_win"
    DEFENDER_WIN = "defender_win"
    TIE = "tie"
    ONGOING = "ongoing"


@dataclass(frozen=True)
class GameState:
    """Immutable snapshot; agent1 moves on even ``t`` and agent2 on odd ``t``."""

    game_id: str
    t: int
    history: tuple
    payload: Any = field(compare=True)

    @property
    def whose_turn(self) -> Role:
        return Role.AGENT1 if self.t % 2 == 0 else Role.AGENT2

    def advance(self, action: int, payload: Any) -> "GameState":
        return GameState(self.game_id, self.t + 1, self.history + (int(action),), payload)


@dataclass(frozen=True)
class GameOutcome:
    terminal: bool
    result: Result
    total_turns: int

    def __post_init__(self):
        if self.terminal == (self.result is Result.ONGOING):
            raise ContractViolation("result must be ongoing exactly when the game is not terminal")

    @classmethod
    def ongoing(cls, t: int) -> "GameOutcome":
        return cls(False, Result.ONGOING, t)


class Environment:
    """Common interface; subclasses fill in the game rules and per-action features.

    ``n_actions`` is fixed per environment so that every state exposes the same
    action width, with illegal slots masked out.
    """

    name: str = "generic"
    n_actions: int
    n_features: int
    feature_names: tuple

    def reset(self, instance) -> GameState:
        raise NotImplementedError

    def legal_mask(self, state: GameState) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: GameState, action: int) -> tuple[GameState, GameOutcome]:
        raise NotImplementedError

    def features(self, state: GameState) -> StateFeatures:
        raise NotImplementedError

    def describe_action(self, state: GameState, action: int) -> str:
        return str(action)

    def legal_actions(self, state: GameState) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.legal_mask(state))]

    def _check_action(self, state: GameState, action: int) -> None:
        mask = self.legal_mask(state)
        if not (0 <= action < len(mask)) or not mask[action]:
            raise ContractViolation(f"illegal action {action} at turn {state.t}")
