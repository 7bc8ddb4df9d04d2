"""Exact Bayesian rational-speech-acts inference for the reference game.

Objects are tuples of feature values, one per named dimension.  A feature is
the pair ``(dimension index, value)``; functions also accept a bare value when
it occurs in exactly one dimension of the candidate set.

All probabilities are ``fractions.Fraction``.  The speaker likelihood of
feature ``f`` for object ``o`` is ``|f|^-1 / sum_{f' in F(o)} |f'|^-1``, so
within the set of objects sharing ``f`` the posterior is proportional to
``1 / S(o)`` with ``S(o) = sum_{f' in F(o)} |f'|^-1``.  Ranks and argmaxes are
computed from that identity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

from .errors import (
    ContractViolation,
    DegenerateInstanceError,
    ExhaustionError,
    ZeroCountError,
)

Obj = tuple
Feature = tuple  # (dim, value)

INSTANCE_SCHEMA = "fopo.rsa.instance/1"
CHAIN_SCHEMA = "fopo.rsa.chain/1"


@dataclass(frozen=True)
class ObjectSet:
    dims: tuple
    objects: tuple
    target_index: int

    def __post_init__(self):
        objects = tuple(tuple(o) for o in self.objects)
        object.__setattr__(self, "objects", objects)
        object.__setattr__(self, "dims", tuple(self.dims))
        if not objects:
            raise ContractViolation("empty object set")
        if any(len(o) != len(self.dims) for o in objects):
            raise ContractViolation("every object needs exactly one value per dimension")
        if len(set(objects)) != len(objects):
            raise ContractViolation("objects must be distinct")
        if not 0 <= self.target_index < len(objects):
            raise ContractViolation(f"target index {self.target_index} out of range")

    @property
    def target(self) -> Obj:
        return self.objects[self.target_index]

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_dims(self) -> int:
        return len(self.dims)

    def feature(self, f) -> Feature:
        return as_feature(f, self.objects)

    def to_record(self, instance_id: str = "") -> dict:
        return {
            "schema": INSTANCE_SCHEMA,
            "id": instance_id,
            "dims": list(self.dims),
            "objects": [list(o) for o in self.objects],
            "target": self.target_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ObjectSet":
        if rec.get("schema") != INSTANCE_SCHEMA:
            raise ContractViolation(f"unexpected schema {rec.get('schema')!r}")
        return cls(tuple(rec["dims"]), tuple(tuple(o) for o in rec["objects"]), int(rec["target"]))


@dataclass(frozen=True)
class GoldenChain:
    features: tuple
    candidate_sets: tuple
    min_rounds: int

    @property
    def feature_values(self) -> list:
        return [v for _, v in self.features]

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.candidate_sets]

    def to_record(self, instance_id: str = "") -> dict:
        return {
            "schema": CHAIN_SCHEMA,
            "id": instance_id,
            "features": [[d, v] for d, v in self.features],
            "candidate_sets": [[list(o) for o in c] for c in self.candidate_sets],
            "min_rounds": self.min_rounds,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GoldenChain":
        if rec.get("schema") != CHAIN_SCHEMA:
            raise ContractViolation(f"unexpected schema {rec.get('schema')!r}")
        return cls(
            tuple((int(d), v) for d, v in rec["features"]),
            tuple(tuple(tuple(o) for o in c) for c in rec["candidate_sets"]),
            int(rec["min_rounds"]),
        )


def as_feature(f, O: Sequence[Obj]) -> Feature:
    if isinstance(f, tuple) and len(f) == 2 and isinstance(f[0], int):
        return f
    dims = {d for o in O for d, v in enumerate(o) if v == f}
    if len(dims) != 1:
        raise ZeroCountError(f"feature value {f!r} does not name a unique dimension")
    return (dims.pop(), f)


def _dims(used) -> frozenset:
    return frozenset(u[0] if isinstance(u, tuple) else int(u) for u in used)


@lru_cache(maxsize=65536)
def _inverse_sums(O: tuple) -> tuple:
    counts: dict = {}
    for o in O:
        for d, v in enumerate(o):
            counts[(d, v)] = counts.get((d, v), 0) + 1
    return tuple(sum(Fraction(1, counts[(d, v)]) for d, v in enumerate(o)) for o in O)


def feature_count(O: Sequence[Obj], f) -> int:
    """Number of candidates possessing feature ``f``; zero is an error."""
    d, v = as_feature(f, O)
    n = sum(1 for o in O if o[d] == v)
    if n == 0:
        raise ZeroCountError(f"feature {(d, v)!r} occurs in no candidate")
    return n


def speaker_likelihood(o: Obj, f, O: Sequence[Obj]) -> Fraction:
    d, v = as_feature(f, O)
    if o[d] != v:
        raise ContractViolation(f"{(d, v)!r} is not a feature of {o!r}")
    O = tuple(map(tuple, O))
    inv = [Fraction(1, feature_count(O, (k, o[k]))) for k in range(len(o))]
    return inv[d] / sum(inv)


def l0_posterior(f, O: Sequence[Obj]) -> dict:
    """Posterior over the candidates that carry ``f``, uniform prior, speaker likelihood."""
    O = tuple(map(tuple, O))
    d, v = as_feature(f, O)
    feature_count(O, (d, v))
    sums = _inverse_sums(O)
    weights = {o: 1 / s for o, s in zip(O, sums) if o[d] == v}
    z = sum(weights.values())
    return {o: w / z for o, w in weights.items()}


def l1_literal_posterior(f, O: Sequence[Obj]) -> dict:
    """Uniform posterior over the candidates that carry ``f``."""
    O = tuple(map(tuple, O))
    d, v = as_feature(f, O)
    n = feature_count(O, (d, v))
    return {o: Fraction(1, n) for o in O if o[d] == v}


def target_rank(f, target: Obj, O: Sequence[Obj]) -> int:
    """Inclusive rank: candidates whose L0 posterior is at least the target's."""
    O = tuple(map(tuple, O))
    d, v = as_feature(f, O)
    if target[d] != v:
        raise ContractViolation(f"{(d, v)!r} is not a feature of the target")
    post = l0_posterior((d, v), O)
    pt = post[tuple(target)]
    return sum(1 for p in post.values() if p >= pt)


@lru_cache(maxsize=262144)
def _speaker_choice(O: tuple, i: int, used: frozenset) -> int:
    target = O[i]
    sums = _inverse_sums(O)
    best = None
    for d in range(len(target)):
        if d in used:
            continue
        match = [k for k, o in enumerate(O) if o[d] == target[d]]
        rank = sum(1 for k in match if sums[k] <= sums[i])
        post = (1 / sums[i]) / sum(1 / sums[k] for k in match)
        key = (rank, -post, d)
        if best is None or key < best:
            best = key
    if best is None:
        raise ExhaustionError("every feature of the target has been used")
    return best[2]


def select_feature(target: Obj, O: Sequence[Obj], used: Iterable = ()) -> Feature:
    """The rational speaker's utterance for ``target``.

    Minimizes the inclusive target rank over unused features; among equal
    ranks the higher target posterior wins, then the lower dimension index.
    """
    O = tuple(map(tuple, O))
    target = tuple(target)
    if target not in O:
        raise ContractViolation("target is not among the candidates")
    d = _speaker_choice(O, O.index(target), _dims(used))
    return (d, target[d])


def literal_filter(f, O: Sequence[Obj]) -> tuple:
    O = tuple(map(tuple, O))
    d, v = as_feature(f, O)
    return tuple(o for o in O if o[d] == v)


def belief_set(f, O: Sequence[Obj], used: Iterable = ()) -> tuple:
    """Candidates carrying ``f`` for which a rational speaker would have said ``f``.

    ``used`` holds the features uttered before ``f``; the simulated speaker is
    :func:`select_feature` with that history.
    """
    O = tuple(map(tuple, O))
    d, v = as_feature(f, O)
    feature_count(O, (d, v))
    used = _dims(used) - {d}
    return tuple(o for i, o in enumerate(O) if o[d] == v and _speaker_choice(O, i, used) == d)


def listener_update(f, O: Sequence[Obj], used: Iterable = ()) -> tuple:
    """Next candidate set of the pragmatic listener.

    The literal L1 posterior is uniform over the belief set, so its argmax is
    the whole belief set.  An empty belief set falls back to the literal filter.
    """
    beliefs = belief_set(f, O, used)
    return beliefs if beliefs else literal_filter(f, O)


def golden_chain(instance: ObjectSet) -> GoldenChain:
    """Alternate rational speaker and pragmatic listener until the target is isolated."""
    O = instance.objects
    target = instance.target
    cur, used = O, []
    feats, sets = [], []
    if len(cur) == 1:
        return GoldenChain((), (), 0)
    for _ in range(instance.n_dims):
        f = select_feature(target, cur, used)
        cur = listener_update(f, cur, used)
        used.append(f)
        feats.append(f)
        sets.append(cur)
        if target not in cur:
            raise DegenerateInstanceError("pragmatic listener dropped the target")
        if len(cur) == 1:
            return GoldenChain(tuple(feats), tuple(sets), len(feats))
    raise DegenerateInstanceError(f"no identification within {instance.n_dims} rounds")


def as_floats(posterior: dict) -> dict:
    return {o: float(p) for o, p in posterior.items()}


def write_instances(path, instances: Sequence[ObjectSet], ids: Sequence[str] | None = None) -> None:
    ids = ids or [f"rsa-{i:06d}" for i in range(len(instances))]
    with open(path, "w", encoding="utf-8") as fh:
        for iid, inst in zip(ids, instances):
            fh.write(json.dumps(inst.to_record(iid)) + "\n")


def read_instances(path) -> list[ObjectSet]:
    with open(path, encoding="utf-8") as fh:
        return [ObjectSet.from_record(json.loads(line)) for line in fh if line.strip()]
