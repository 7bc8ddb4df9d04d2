"""Cooperative reference game: a speaker names target features, a listener narrows candidates.

Action layout (width ``max(max_dims, 2 + max_objects)``):

* speaker: action ``d`` utters the target's value on dimension ``d``;
* listener: ``0`` literal update, ``1`` pragmatic update, ``2 + j`` declares
  object ``j`` of the instance's object list.

A listener update that isolates a single candidate ends the game at once, the
declaration being part of that turn.  After a listener turn with every
dimension spoken and several candidates left, the game ties out as a failure.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import rsa_oracle as oracle
from ..errors import ContractViolation
from ..paramcore import StateFeatures
from ..rsa_oracle import ObjectSet
from .core import Environment, GameOutcome, GameState, Result

LITERAL_UPDATE = 0
PRAGMATIC_UPDATE = 1
FIRST_DECLARE = 2

FEATURE_NAMES = (
    "is_feature",
    "is_literal",
    "is_pragmatic",
    "is_declare",
    "literal_keep",
    "pragmatic_keep",
    "isolates",
    "inverse_rank",
    "is_min_rank",
    "first_min_rank",
    "target_posterior",
    "drops_target",
    "in_belief",
    "chance",
    "position",
)
N_FEATURES = len(FEATURE_NAMES)
_COL = {name: i for i, name in enumerate(FEATURE_NAMES)}


@dataclass(frozen=True)
class RSAPayload:
    instance: ObjectSet
    candidates: tuple  # indices into instance.objects
    used: tuple  # spoken dimensions, in order
    result: Result = Result.ONGOING

    @property
    def candidate_objects(self) -> tuple:
        return tuple(self.instance.objects[i] for i in self.candidates)

    @property
    def last_feature(self) -> tuple:
        d = self.used[-1]
        return (d, self.instance.target[d])


class RSAEnv(Environment):
    name = "rsa"
    feature_names = FEATURE_NAMES
    n_features = N_FEATURES

    def __init__(self, max_objects: int = 12, max_dims: int = 8):
        self.max_objects = max_objects
        self.max_dims = max_dims
        self.n_actions = max(max_dims, FIRST_DECLARE + max_objects)

    def reset(self, instance: ObjectSet, game_id: str = "") -> GameState:
        if not isinstance(instance, ObjectSet):
            raise ContractViolation("RSA games need an ObjectSet instance")
        if instance.n_objects > self.max_objects or instance.n_dims > self.max_dims:
            raise ContractViolation(
                f"instance {instance.n_objects}x{instance.n_dims} exceeds env limits "
                f"{self.max_objects}x{self.max_dims}"
            )
        payload = RSAPayload(instance, tuple(range(instance.n_objects)), ())
        return GameState(game_id, 0, (), payload)

    def legal_mask(self, state: GameState) -> np.ndarray:
        p: RSAPayload = state.payload
        if p.result is not Result.ONGOING:
            raise ContractViolation("no legal actions in a finished game")
        mask = np.zeros(self.n_actions, dtype=bool)
        if state.t % 2 == 0:
            mask[: p.instance.n_dims] = True
            mask[list(p.used)] = False
        else:
            mask[[LITERAL_UPDATE, PRAGMATIC_UPDATE]] = True
            mask[[FIRST_DECLARE + j for j in p.candidates]] = True
        return mask

    def step(self, state: GameState, action: int) -> tuple[GameState, GameOutcome]:
        self._check_action(state, action)
        p: RSAPayload = state.payload
        inst = p.instance
        t1 = state.t + 1
        if state.t % 2 == 0:
            nxt = RSAPayload(inst, p.candidates, p.used + (int(action),))
            return state.advance(action, nxt), GameOutcome.ongoing(t1)
        if action >= FIRST_DECLARE:
            j = action - FIRST_DECLARE
            result = Result.RSA_SUCCESS if j == inst.target_index else Result.RSA_FAILURE
            return self._finish(state, action, p, p.candidates, result)
        kept = _update(inst.objects, p.candidates, p.last_feature, p.used[:-1], action == PRAGMATIC_UPDATE)
        if inst.target_index not in kept:
            return self._finish(state, action, p, kept, Result.RSA_FAILURE)
        if len(kept) == 1:
            return self._finish(state, action, p, kept, Result.RSA_SUCCESS)
        if len(p.used) == inst.n_dims:
            return self._finish(state, action, p, kept, Result.RSA_FAILURE)
        nxt = RSAPayload(inst, kept, p.used)
        return state.advance(action, nxt), GameOutcome.ongoing(t1)

    @staticmethod
    def _finish(state, action, p, kept, result):
        nxt = RSAPayload(p.instance, kept, p.used, result)
        return state.advance(action, nxt), GameOutcome(True, result, state.t + 1)

    def features(self, state: GameState) -> StateFeatures:
        p: RSAPayload = state.payload
        mask = self.legal_mask(state)
        inst = p.instance
        if state.t % 2 == 0:
            rows = _speaker_rows(inst.objects, inst.target_index, p.candidates, p.used)
        else:
            rows = _listener_rows(inst.objects, p.candidates, p.last_feature, p.used[:-1])
        x = np.zeros((self.n_actions, N_FEATURES))
        for a, row in rows.items():
            x[a] = row
        x.setflags(write=False)
        return StateFeatures(x, mask)

    def describe_action(self, state: GameState, action: int) -> str:
        inst = state.payload.instance
        if state.t % 2 == 0:
            return f"say {inst.dims[action]}={inst.target[action]}"
        if action == LITERAL_UPDATE:
            return "literal_update"
        if action == PRAGMATIC_UPDATE:
            return "pragmatic_update"
        return "declare " + "-".join(inst.objects[action - FIRST_DECLARE])

    # conversions between game units and reward units

    @staticmethod
    def conv_min_turns(min_rounds: int) -> int:
        """Turns spent by oracle play: one speaker and one listener turn per round."""
        return 2 * min_rounds

    @staticmethod
    def max_turns(instance: ObjectSet) -> int:
        return 2 * instance.n_dims


@lru_cache(maxsize=200_000)
def _update(objects: tuple, candidates: tuple, feature: tuple, before: tuple, pragmatic: bool) -> tuple:
    """Candidate indices kept after hearing ``feature`` with ``before`` already spoken."""
    cur = tuple(objects[i] for i in candidates)
    if pragmatic:
        kept = set(oracle.listener_update(feature, cur, before))
    else:
        kept = set(oracle.literal_filter(feature, cur))
    return tuple(i for i in candidates if objects[i] in kept)


@lru_cache(maxsize=100_000)
def _speaker_rows(objects: tuple, target_index: int, candidates: tuple, used: tuple) -> dict:
    cur = tuple(objects[i] for i in candidates)
    target = objects[target_index]
    info = {}
    for d in range(len(target)):
        if d in used:
            continue
        f = (d, target[d])
        literal = _update(objects, candidates, f, used, False)
        prag = _update(objects, candidates, f, used, True)
        post = oracle.l0_posterior(f, cur)
        rank = oracle.target_rank(f, target, cur)
        info[d] = (len(literal), prag, rank, float(post[target]))
    best = min(v[2] for v in info.values())
    first_best = min(d for d, v in info.items() if v[2] == best)  # the rational speaker's tie-break
    rows = {}
    n = len(cur)
    for d, (n_lit, prag, rank, post) in info.items():
        row = np.zeros(N_FEATURES)
        row[_COL["is_feature"]] = 1.0
        row[_COL["literal_keep"]] = n_lit / n
        row[_COL["pragmatic_keep"]] = len(prag) / n
        row[_COL["isolates"]] = float(prag == (target_index,))
        row[_COL["inverse_rank"]] = 1.0 / rank
        row[_COL["is_min_rank"]] = float(rank == best)
        row[_COL["first_min_rank"]] = float(d == first_best)
        row[_COL["position"]] = (d + 1) / len(target)  # lets otherwise identical actions differ
        row[_COL["target_posterior"]] = post
        row[_COL["drops_target"]] = float(target_index not in prag)
        rows[d] = row
    return rows


@lru_cache(maxsize=100_000)
def _listener_rows(objects: tuple, candidates: tuple, feature: tuple, before: tuple) -> dict:
    n = len(candidates)
    literal = _update(objects, candidates, feature, before, False)
    prag = _update(objects, candidates, feature, before, True)
    rows = {}
    for a, kept, col in ((LITERAL_UPDATE, literal, "is_literal"), (PRAGMATIC_UPDATE, prag, "is_pragmatic")):
        row = np.zeros(N_FEATURES)
        row[_COL[col]] = 1.0
        row[_COL["literal_keep"]] = len(literal) / n
        row[_COL["pragmatic_keep"]] = len(prag) / n
        row[_COL["isolates"]] = float(len(kept) == 1)
        rows[a] = row
    for j in candidates:
        row = np.zeros(N_FEATURES)
        row[_COL["is_declare"]] = 1.0
        row[_COL["in_belief"]] = float(j in prag)
        row[_COL["chance"]] = 1.0 / n
        row[_COL["position"]] = (j + 1) / len(objects)
        rows[FIRST_DECLARE + j] = row
    return rows
