"""Symbolic reference-game corpora and Taboo worlds.

An objective matrix is an ``m x n`` binary array: rows are feature dimensions,
columns are referents, column 0 is the target, and entry ``[i, j]`` says
whether referent ``j`` shares the target's value on dimension ``i``.
Materializing a matrix assigns each row a contrast pair from a feature bank.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .environments import read_worlds, taboo_generate_world, write_worlds
from .errors import ContractViolation, DegenerateInstanceError, ExhaustionError
from .rsa_oracle import GoldenChain, ObjectSet, golden_chain, read_instances, write_instances

CORPUS_SCHEMA = "fopo.corpus/1"
MIN_ROWS, MAX_ROWS = 2, 8
MIN_COLS, MAX_COLS = 2, 12


@dataclass(frozen=True)
class FeaturePairBank:
    pairs: tuple
    split: str

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True, eq=False)
class ObjectiveMatrix:
    matrix: np.ndarray
    min_rounds: int | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or not m[:, 0].all():
            raise ContractViolation("the target column 0 must be all ones")
        if len({col.tobytes() for col in m.T}) != m.shape[1]:
            raise ContractViolation("referent columns must be distinct")

    @property
    def shape(self) -> tuple:
        return self.matrix.shape

    def __eq__(self, other):
        return (
            isinstance(other, ObjectiveMatrix)
            and np.array_equal(self.matrix, other.matrix)
            and self.min_rounds == other.min_rounds
        )


def build_feature_bank(seed: int = 0, pretrain_count: int = 86, rl_count: int = 25):
    """Two disjoint banks of synthetic contrast pairs such as ("k07+", "k07-")."""
    if pretrain_count < 1 or rl_count < 1:
        raise ContractViolation("bank sizes must be positive")
    rng = np.random.default_rng([seed, 0xFB])
    ids = rng.permutation(pretrain_count + rl_count)
    pairs = [(f"k{i:03d}+", f"k{i:03d}-") for i in ids]
    return (
        FeaturePairBank(tuple(pairs[:pretrain_count]), "pretrain"),
        FeaturePairBank(tuple(pairs[pretrain_count:]), "rl"),
    )


def _matrix_instance(matrix: np.ndarray) -> ObjectSet:
    m, n = matrix.shape
    objects = tuple(tuple("1" if matrix[i, j] else "0" for i in range(m)) for j in range(n))
    return ObjectSet(tuple(f"d{i}" for i in range(m)), objects, 0)


def annotate(matrix) -> ObjectiveMatrix:
    """Attach min_rounds; value names do not affect the oracle, so 0/1 labels suffice."""
    chain = golden_chain(_matrix_instance(np.asarray(matrix, dtype=bool)))
    return ObjectiveMatrix(matrix, chain.min_rounds)


def random_shape(rng: np.random.Generator) -> tuple[int, int]:
    m = int(rng.integers(MIN_ROWS, MAX_ROWS + 1))
    n = int(rng.integers(MIN_COLS, min(MAX_COLS, 2**m) + 1))
    return m, n


def _check_shape(m: int, n: int) -> None:
    if not (MIN_ROWS <= m <= MAX_ROWS and MIN_COLS <= n <= MAX_COLS):
        raise ContractViolation(f"shape {m}x{n} outside [{MIN_ROWS},{MAX_ROWS}]x[{MIN_COLS},{MAX_COLS}]")
    if n > 2**m:
        raise ContractViolation(f"{n} distinct referents cannot be encoded with {m} binary features")


def random_matrix(rng: np.random.Generator, m: int, n: int, max_tries: int = 1000) -> ObjectiveMatrix:
    """Distinct columns with an all-ones target column, resampled until the oracle converges."""
    _check_shape(m, n)
    for _ in range(max_tries):
        codes = rng.choice(2**m - 1, size=n - 1, replace=False)  # any pattern except all-ones
        cols = ((codes[:, None] >> np.arange(m)) & 1).astype(bool).T
        mat = np.hstack([np.ones((m, 1), dtype=bool), cols])
        try:
            return annotate(mat)
        except DegenerateInstanceError:
            continue
    raise DegenerateInstanceError(f"no identifiable {m}x{n} matrix after {max_tries} tries")


def generate_matrices(shapes: Sequence | None, count: int, seed: int) -> list[ObjectiveMatrix]:
    """``count`` annotated matrices; ``shapes`` cycles through fixed shapes, or None samples uniformly."""
    out = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        m, n = random_shape(rng) if not shapes else shapes[k % len(shapes)]
        out.append(random_matrix(rng, m, n))
    return out


def materialize_instance(matrix: ObjectiveMatrix, bank: FeaturePairBank, seed: int, shuffle: bool = False) -> ObjectSet:
    """Assign a contrast pair to each row; ones copy the target's value, zeros take the opposite."""
    mat = matrix.matrix
    m, n = mat.shape
    if len(bank) < m:
        raise ExhaustionError(f"bank has {len(bank)} pairs but the matrix needs {m}")
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(bank), size=m, replace=False)
    flips = rng.integers(2, size=m)
    values = []
    for r, f in zip(rows, flips):
        a, b = bank.pairs[r]
        values.append((a, b) if f == 0 else (b, a))  # (target value, other value)
    objects = [tuple(values[i][0] if mat[i, j] else values[i][1] for i in range(m)) for j in range(n)]
    dims = tuple(bank.pairs[r][0][:-1] for r in rows)
    order = list(range(n))
    if shuffle:
        order = [int(j) for j in rng.permutation(n)]
    return ObjectSet(dims, tuple(objects[j] for j in order), order.index(0))


def instance_to_matrix(instance: ObjectSet) -> ObjectiveMatrix:
    """Inverse of materialization: target column first, other referents in object order."""
    t = instance.target
    cols = [instance.target_index] + [j for j in range(instance.n_objects) if j != instance.target_index]
    mat = np.array([[instance.objects[j][i] == t[i] for j in cols] for i in range(instance.n_dims)], dtype=bool)
    return ObjectiveMatrix(mat)


@dataclass
class Corpus:
    rl_instances: list
    pretrain_instances: list
    pretrain_chains: list
    manifest: dict
    taboo_rl: list | None = None
    taboo_pretrain: list | None = None


def generate_rsa_split(matrices, bank, seed, prefix, shuffle=True):
    instances, chains, ids = [], [], []
    for k, mat in enumerate(matrices):
        inst = materialize_instance(mat, bank, seed=int(np.random.default_rng([seed, k, 0x3A]).integers(2**32)), shuffle=shuffle)
        chain = golden_chain(inst)
        if chain.min_rounds != mat.min_rounds:
            raise DegenerateInstanceError("materialized instance disagrees with its matrix annotation")
        instances.append(inst)
        chains.append(chain)
        ids.append(f"{prefix}-{k:06d}")
    return instances, chains, ids


def generate_corpus(
    seed: int = 0,
    rl_count: int = 1000,
    pretrain_count: int = 500,
    shapes: Sequence | None = None,
    game: str = "rsa",
    taboo_words: int = 8,
    taboo_cues: int = 12,
    taboo_max_turns: int = 8,
    taboo_top_k: int = 3,
) -> Corpus:
    start = time.perf_counter()
    manifest = {
        "schema": CORPUS_SCHEMA,
        "game": game,
        "seed": seed,
        "rl_count": rl_count,
        "pretrain_count": pretrain_count,
        "shapes": [list(s) for s in shapes] if shapes else None,
    }
    if game == "taboo":
        kw = dict(n_words=taboo_words, n_cues=taboo_cues, max_turns=taboo_max_turns, top_k=taboo_top_k)
        rl = [taboo_generate_world(int(s), **kw) for s in np.random.default_rng([seed, 1]).integers(2**31, size=rl_count)]
        pre = [taboo_generate_world(int(s), **kw) for s in np.random.default_rng([seed, 2]).integers(2**31, size=pretrain_count)]
        manifest.update(kw)
        manifest["elapsed_s"] = round(time.perf_counter() - start, 3)
        return Corpus([], [], [], manifest, rl, pre)
    pre_bank, rl_bank = build_feature_bank(seed)
    rl_mats = generate_matrices(shapes, rl_count, seed * 2 + 1)
    pre_mats = generate_matrices(shapes, pretrain_count, seed * 2 + 2)
    rl, _, _ = generate_rsa_split(rl_mats, rl_bank, seed * 2 + 1, "rl")
    pre, chains, _ = generate_rsa_split(pre_mats, pre_bank, seed * 2 + 2, "pre")
    manifest["bank_sizes"] = {"pretrain": len(pre_bank), "rl": len(rl_bank)}
    manifest["elapsed_s"] = round(time.perf_counter() - start, 3)
    return Corpus(rl, pre, chains, manifest)


FILES = {
    "rl": "rl_instances.jsonl",
    "pretrain": "pretrain_instances.jsonl",
    "chains": "pretrain_chains.jsonl",
    "taboo_rl": "taboo_rl_worlds.jsonl",
    "taboo_pretrain": "taboo_pretrain_worlds.jsonl",
}


def emit_corpus(corpus: Corpus, out_dir) -> Path:
    """Write the instance, chain and manifest files; the manifest records file line counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    if corpus.taboo_rl is not None:
        write_worlds(out / FILES["taboo_rl"], corpus.taboo_rl, [f"taboo-rl-{i:06d}" for i in range(len(corpus.taboo_rl))])
        write_worlds(
            out / FILES["taboo_pretrain"],
            corpus.taboo_pretrain,
            [f"taboo-pre-{i:06d}" for i in range(len(corpus.taboo_pretrain))],
        )
        counts = {FILES["taboo_rl"]: len(corpus.taboo_rl), FILES["taboo_pretrain"]: len(corpus.taboo_pretrain)}
    else:
        write_instances(out / FILES["rl"], corpus.rl_instances, [f"rl-{i:06d}" for i in range(len(corpus.rl_instances))])
        pre_ids = [f"pre-{i:06d}" for i in range(len(corpus.pretrain_instances))]
        write_instances(out / FILES["pretrain"], corpus.pretrain_instances, pre_ids)
        with open(out / FILES["chains"], "w", encoding="utf-8") as fh:
            for iid, chain in zip(pre_ids, corpus.pretrain_chains):
                fh.write(json.dumps(chain.to_record(iid)) + "\n")
        counts = {
            FILES["rl"]: len(corpus.rl_instances),
            FILES["pretrain"]: len(corpus.pretrain_instances),
            FILES["chains"]: len(corpus.pretrain_chains),
        }
    manifest = {k: v for k, v in corpus.manifest.items() if k != "elapsed_s"}
    manifest["files"] = counts
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_corpus(out_dir) -> Corpus:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    manifest = manifest.get("corpus", manifest)  # the CLI wraps the corpus manifest in a run manifest
    if manifest.get("schema") != CORPUS_SCHEMA:
        raise ContractViolation(f"unexpected corpus schema {manifest.get('schema')!r}")
    if manifest["game"] == "taboo":
        return Corpus([], [], [], manifest, read_worlds(out / FILES["taboo_rl"]), read_worlds(out / FILES["taboo_pretrain"]))
    with open(out / FILES["chains"], encoding="utf-8") as fh:
        chains = [GoldenChain.from_record(json.loads(line)) for line in fh if line.strip()]
    return Corpus(read_instances(out / FILES["rl"]), read_instances(out / FILES["pretrain"]), chains, manifest)
