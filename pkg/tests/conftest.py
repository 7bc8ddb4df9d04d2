import itertools
import random
from fractions import Fraction

import pytest

from fopo.rsa_oracle import ObjectSet

FIG2_DIMS = ("moisture", "color", "texture", "shape")
FIG2_OBJECTS = (
    ("dry", "blue", "smooth", "square"),
    ("wet", "green", "rough", "square"),
    ("wet", "green", "smooth", "square"),
    ("wet", "blue", "smooth", "circle"),
    ("wet", "blue", "smooth", "square"),
    ("dry", "blue", "rough", "circle"),
    ("dry", "blue", "rough", "square"),
    ("dry", "blue", "smooth", "circle"),
)
TABLE5_DIMS = ("volume", "strength", "timing", "build")
TABLE5_OBJECTS = (
    ("loud", "weak", "late", "lean"),
    ("quiet", "strong", "early", "fat"),
    ("quiet", "strong", "early", "lean"),
    ("quiet", "strong", "late", "fat"),
    ("quiet", "strong", "late", "lean"),
    ("loud", "weak", "early", "fat"),
    ("loud", "weak", "early", "lean"),
    ("loud", "weak", "late", "fat"),
)


@pytest.fixture
def fig2():
    return ObjectSet(FIG2_DIMS, FIG2_OBJECTS, 7)


@pytest.fixture
def table5():
    return ObjectSet(TABLE5_DIMS, TABLE5_OBJECTS, 0)


def random_instance(rng: random.Random, max_n: int = 8, max_m: int = 5) -> ObjectSet:
    m = rng.randint(1, max_m)
    n = rng.randint(2, min(max_n, 2**m))
    pool = list(itertools.product(*[(f"d{k}a", f"d{k}b") for k in range(m)]))
    rng.shuffle(pool)
    return ObjectSet(tuple(f"dim{k}" for k in range(m)), tuple(pool[:n]), rng.randrange(n))


# -- brute-force reference formulas, written independently of fopo.rsa_oracle --


def ref_likelihood(o, d, O):
    inv = [Fraction(1, sum(1 for x in O if x[k] == o[k])) for k in range(len(o))]
    return inv[d] / sum(inv)


def ref_l0(d, v, O):
    w = {o: (ref_likelihood(o, d, O) if o[d] == v else Fraction(0)) for o in O}
    z = sum(w.values())
    return {o: x / z for o, x in w.items() if o[d] == v}


def ref_speaker(target, O, used):
    best = None
    for d in range(len(target)):
        if d in used:
            continue
        post = ref_l0(d, target[d], O)
        rank = sum(1 for p in post.values() if p >= post[target])
        key = (rank, -post[target], d)
        best = key if best is None or key < best else best
    return best[2]


def ref_update(d, v, O, used):
    match = [o for o in O if o[d] == v]
    beliefs = [o for o in match if ref_speaker(o, O, set(used) - {d}) == d]
    return tuple(beliefs) if beliefs else tuple(match)


def brute_force_min_rounds(inst: ObjectSet):
    """Shortest feature sequence (any order) that isolates the target."""
    target = inst.target
    best = None

    def rec(cur, used, depth):
        nonlocal best
        if best is not None and depth + 1 >= best:
            return
        for d in range(len(target)):
            if d in used:
                continue
            nxt = ref_update(d, target[d], cur, used)
            if target not in nxt:
                continue
            if len(nxt) == 1:
                best = depth + 1
            else:
                rec(nxt, used | {d}, depth + 1)

    rec(tuple(inst.objects), frozenset(), 0)
    return best
