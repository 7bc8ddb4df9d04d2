"""Symbolic Taboo: an attacker emits cues, a defender answers with words or guesses.

Words and cues are disjoint symbol sets joined by a row-normalized association
matrix, so the attacker can never utter the target itself.  On each defender
turn the defender either responds with one of the ``top_k`` words most
associated with the latest cue, or guesses a word once.

Action layout (width ``max(C, top_k + K)``):

* attacker: action ``c`` plays cue ``c`` (each cue at most once);
* defender: action ``j < top_k`` responds with the j-th associated word of the
  latest cue, action ``top_k + w`` guesses word ``w``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import ContractViolation
from ..paramcore import StateFeatures
from .core import Environment, GameOutcome, GameState, Result

WORLD_SCHEMA = "fopo.taboo.world/1"
CONFIDENT = 0.9

FEATURE_NAMES = (
    "is_cue",
    "is_respond",
    "is_guess",
    "association",
    "posterior",
    "is_argmax",
    "target_in_top",
    "confident",
    "progress",
)
N_FEATURES = len(FEATURE_NAMES)
_COL = {name: i for i, name in enumerate(FEATURE_NAMES)}


@dataclass(frozen=True, eq=False)
class TabooWorld:
    weights: np.ndarray  # (K words, C cues), rows sum to 1
    target: int
    max_turns: int = 8
    top_k: int = 3

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] < 2:
            raise ContractViolation("association matrix needs at least two words")
        if np.any(w < 0) or np.any(w.max(axis=1) <= 0):
            raise ContractViolation("every word needs a positive cue and no negative weights")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ContractViolation("association rows must sum to one")
        if not 0 <= self.target < w.shape[0]:
            raise ContractViolation("target word out of range")
        if not 1 <= self.top_k <= w.shape[0]:
            raise ContractViolation("top_k must lie in [1, K]")
        if self.max_turns < 2 or (self.max_turns + 1) // 2 > w.shape[1]:
            raise ContractViolation("max_turns must allow at least one exchange and not outrun the cues")

    @property
    def n_words(self) -> int:
        return self.weights.shape[0]

    @property
    def n_cues(self) -> int:
        return self.weights.shape[1]

    def key(self) -> tuple:
        return (self.weights.tobytes(), self.weights.shape, self.target, self.max_turns, self.top_k)

    def __eq__(self, other):
        return isinstance(other, TabooWorld) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def with_target(self, target: int) -> "TabooWorld":
        return TabooWorld(self.weights, target, self.max_turns, self.top_k)

    def top_words(self, cue: int) -> tuple:
        """The ``top_k`` words ranked by association with ``cue``; ties go to the lower index."""
        col = self.weights[:, cue]
        order = np.lexsort((np.arange(len(col)), -col))
        return tuple(int(w) for w in order[: self.top_k])

    def posterior(self, cues: tuple) -> np.ndarray:
        """Naive-Bayes belief over the target given the cue history, uniform prior."""
        logp = np.log(self.weights[:, list(cues)]).sum(axis=1) if cues else np.zeros(self.n_words)
        p = np.exp(logp - logp.max())
        return p / p.sum()

    def to_record(self, world_id: str = "") -> dict:
        return {
            "schema": WORLD_SCHEMA,
            "id": world_id,
            "weights": self.weights.tolist(),
            "target": self.target,
            "max_turns": self.max_turns,
            "top_k": self.top_k,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TabooWorld":
        if rec.get("schema") != WORLD_SCHEMA:
            raise ContractViolation(f"unexpected schema {rec.get('schema')!r}")
        return cls(np.array(rec["weights"]), int(rec["target"]), int(rec["max_turns"]), int(rec["top_k"]))


def taboo_generate_world(
    seed: int, n_words: int = 8, n_cues: int = 12, max_turns: int = 8, top_k: int = 3
) -> TabooWorld:
    """Random association structure where each word owns a distinct primary cue.

    Every weight is positive.  Each word also shares secondary mass with two
    other cues so that single cues are ambiguous and the defender must
    accumulate evidence.
    """
    if n_words < 4 or n_cues < n_words:
        raise ContractViolation("need at least 4 words and at least as many cues as words")
    rng = np.random.default_rng(seed)
    while True:
        w = rng.gamma(0.5, 0.2, size=(n_words, n_cues)) + 1e-3
        primary = rng.permutation(n_cues)[:n_words]
        for word, cue in enumerate(primary):
            for other in rng.choice(np.delete(primary, word), size=2, replace=False):
                w[word, other] += rng.uniform(0.3, 0.9)
        for word, cue in enumerate(primary):
            w[word, cue] = w[word].max() + rng.uniform(0.5, 1.5)
        w /= w.sum(axis=1, keepdims=True)
        if len({row.tobytes() for row in w}) == n_words:
            break
    target = int(rng.integers(n_words))
    return TabooWorld(w, target, max_turns, top_k)


def write_worlds(path, worlds, ids=None) -> None:
    ids = ids or [f"taboo-{i:06d}" for i in range(len(worlds))]
    with open(path, "w", encoding="utf-8") as fh:
        for wid, world in zip(ids, worlds):
            fh.write(json.dumps(world.to_record(wid)) + "\n")


def read_worlds(path) -> list[TabooWorld]:
    with open(path, encoding="utf-8") as fh:
        return [TabooWorld.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class TabooPayload:
    world: TabooWorld
    cues: tuple
    responses: tuple
    result: Result = Result.ONGOING


class TabooEnv(Environment):
    name = "taboo"
    feature_names = FEATURE_NAMES
    n_features = N_FEATURES

    def __init__(self, n_words: int = 8, n_cues: int = 12, top_k: int = 3):
        self.n_words = n_words
        self.n_cues = n_cues
        self.top_k = top_k
        self.n_actions = max(n_cues, top_k + n_words)

    def reset(self, world: TabooWorld, game_id: str = "") -> GameState:
        if not isinstance(world, TabooWorld):
            raise ContractViolation("Taboo games need a TabooWorld")
        if (world.n_words, world.n_cues, world.top_k) != (self.n_words, self.n_cues, self.top_k):
            raise ContractViolation("world shape does not match the environment")
        return GameState(game_id, 0, (), TabooPayload(world, (), ()))

    def legal_mask(self, state: GameState) -> np.ndarray:
        p: TabooPayload = state.payload
        if p.result is not Result.ONGOING:
            raise ContractViolation("no legal actions in a finished game")
        mask = np.zeros(self.n_actions, dtype=bool)
        if state.t % 2 == 0:
            mask[: self.n_cues] = True
            mask[list(p.cues)] = False
        else:
            mask[: self.top_k + self.n_words] = True
        return mask

    def step(self, state: GameState, action: int) -> tuple[GameState, GameOutcome]:
        self._check_action(state, action)
        p: TabooPayload = state.payload
        world = p.world
        t1 = state.t + 1
        if state.t % 2 == 0:
            nxt = TabooPayload(world, p.cues + (int(action),), p.responses)
            return state.advance(action, nxt), GameOutcome.ongoing(t1)
        if action >= self.top_k:
            guess = action - self.top_k
            result = Result.DEFENDER_WIN if guess == world.target else Result.ATTACKER_WIN
            return self._finish(state, action, p, result)
        word = world.top_words(p.cues[-1])[action]
        if word == world.target:
            return self._finish(state, action, p, Result.ATTACKER_WIN, word)
        nxt = TabooPayload(world, p.cues, p.responses + (word,))
        if t1 >= world.max_turns:
            return self._finish(state, action, p, Result.TIE, word)
        return state.advance(action, nxt), GameOutcome.ongoing(t1)

    @staticmethod
    def _finish(state, action, p, result, word=None):
        responses = p.responses + ((word,) if word is not None else ())
        nxt = TabooPayload(p.world, p.cues, responses, result)
        return state.advance(action, nxt), GameOutcome(True, result, state.t + 1)

    def features(self, state: GameState) -> StateFeatures:
        p: TabooPayload = state.payload
        mask = self.legal_mask(state)
        progress = state.t / p.world.max_turns
        if state.t % 2 == 0:
            x = _attacker_rows(p.world, p.cues, self.n_actions)
        else:
            x = _defender_rows(p.world, p.cues, self.n_actions, progress)
        return StateFeatures(x, mask)

    def describe_action(self, state: GameState, action: int) -> str:
        if state.t % 2 == 0:
            return f"cue c{action}"
        if action < self.top_k:
            return f"respond w{state.payload.world.top_words(state.payload.cues[-1])[action]}"
        return f"guess w{action - self.top_k}"


@lru_cache(maxsize=100_000)
def _attacker_rows(world: TabooWorld, cues: tuple, n_actions: int) -> np.ndarray:
    x = np.zeros((n_actions, N_FEATURES))
    target = world.target
    for c in range(world.n_cues):
        if c in cues:
            continue
        post = world.posterior(cues + (c,))
        col = world.weights[:, c]
        x[c, _COL["is_cue"]] = 1.0
        x[c, _COL["association"]] = col[target] / col.max()
        x[c, _COL["posterior"]] = post[target]
        x[c, _COL["is_argmax"]] = float(np.argmax(post) == target)
        x[c, _COL["target_in_top"]] = float(target in world.top_words(c))
        x[c, _COL["confident"]] = float(post[target] > CONFIDENT)
    x.setflags(write=False)
    return x


@lru_cache(maxsize=100_000)
def _defender_rows(world: TabooWorld, cues: tuple, n_actions: int, progress: float) -> np.ndarray:
    x = np.zeros((n_actions, N_FEATURES))
    post = world.posterior(cues)
    best = int(np.argmax(post))
    col = world.weights[:, cues[-1]]
    for j, w in enumerate(world.top_words(cues[-1])):
        x[j, _COL["is_respond"]] = 1.0
        x[j, _COL["association"]] = col[w] / col.max()
        x[j, _COL["posterior"]] = post[w]
        x[j, _COL["is_argmax"]] = float(w == best)
        x[j, _COL["progress"]] = progress
    for w in range(world.n_words):
        a = world.top_k + w
        x[a, _COL["is_guess"]] = 1.0
        x[a, _COL["association"]] = col[w] / col.max()
        x[a, _COL["posterior"]] = post[w]
        x[a, _COL["is_argmax"]] = float(w == best)
        x[a, _COL["confident"]] = float(post[w] > CONFIDENT)
        x[a, _COL["progress"]] = progress
    x.setflags(write=False)
    return x
