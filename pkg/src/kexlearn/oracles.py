"""Equivalence oracles: happy-flow mutations and random words."""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from itertools import combinations, product
from math import comb
from typing import Iterator, Optional, Sequence

from .alphabet import Alphabet
from .kex import KexFlowType

log = logging.getLogger(__name__)

DEFAULT_INSERTIONS = 2
RANDOM_COUNT = 10_000
RANDOM_MIN = 5
RANDOM_MAX = 15


@dataclass(frozen=True)
class HappyFlow:
    flow: KexFlowType
    symbols: tuple

    @classmethod
    def for_alphabet(cls, alphabet: Alphabet) -> "HappyFlow":
        return cls(alphabet.flow, alphabet.happy_flow())

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.symbols]


@dataclass(frozen=True)
class MutationPlan:
    alphabet: Sequence
    flow: HappyFlow
    n: int = DEFAULT_INSERTIONS


def mutation_count(alphabet_size: int, flow_length: int, n: int) -> int:
    if n < 0:
        raise ValueError("n must be non-negative")
    return sum(alphabet_size ** i * comb(flow_length + i, i) for i in range(n + 1))


def count_mutations(plan: MutationPlan) -> int:
    return mutation_count(len(plan.alphabet), len(plan.flow), plan.n)


def insert_at(base: Sequence, symbols: Sequence, positions: Sequence[int]) -> tuple:
    """Place ``symbols`` at ``positions`` of the result word, filling the rest from ``base``."""
    out = []
    it_base = iter(base)
    placed = dict(zip(positions, symbols))
    for k in range(len(base) + len(symbols)):
        out.append(placed[k] if k in placed else next(it_base))
    return tuple(out)


def enumerate_words(alphabet: Sequence, base: Sequence, n: int) -> Iterator[tuple]:
    """Every insertion of i <= n symbols into ``base``, in increasing i, then by
    symbol indices, then by result positions. Duplicates are kept."""
    for i in range(n + 1):
        for symbols in product(alphabet, repeat=i):
            for positions in combinations(range(len(base) + i), i):
                yield insert_at(base, symbols, positions)


def enumerate_mutations(plan: MutationPlan) -> Iterator[tuple]:
    return enumerate_words(tuple(plan.alphabet), plan.flow.symbols, plan.n)


def _mismatch(hypothesis, mq, word) -> bool:
    return mq.query(word) != hypothesis.run(word)


class MutationOracle:
    """Exhaustive happy-flow mutation oracle.

    Remembers hypotheses it has already fully verified, so an unchanged
    hypothesis is not enumerated twice.
    """

    def __init__(self, plan: MutationPlan):
        self.plan = plan
        self.verified: set[str] = set()
        self.checked = 0

    def find_counterexample(self, hypothesis, mq, deadline=None) -> Optional[tuple]:
        key = hypothesis.to_json()
        if key in self.verified:
            return None
        for k, word in enumerate(enumerate_mutations(self.plan)):
            if deadline is not None and k % 256 == 0:
                deadline.check()
            self.checked += 1
            if _mismatch(hypothesis, mq, word):
                return word
        self.verified.add(key)
        return None


class RandomWordsOracle:
    def __init__(self, alphabet: Sequence, count: int = RANDOM_COUNT, min_len: int = RANDOM_MIN,
                 max_len: int = RANDOM_MAX, seed: int = 0):
        if not 0 < min_len <= max_len:
            raise ValueError("need 0 < min_len <= max_len")
        self.alphabet = tuple(alphabet)
        self.count = count
        self.min_len = min_len
        self.max_len = max_len
        self.seed = seed

    def words(self) -> Iterator[tuple]:
        rng = random.Random(self.seed)
        for _ in range(self.count):
            length = rng.randint(self.min_len, self.max_len)
            yield tuple(rng.choice(self.alphabet) for _ in range(length))

    def find_counterexample(self, hypothesis, mq, deadline=None) -> Optional[tuple]:
        for k, word in enumerate(self.words()):
            if deadline is not None and k % 256 == 0:
                deadline.check()
            if _mismatch(hypothesis, mq, word):
                return word
        return None


def find_counterexample_mutation(hypothesis, plan: MutationPlan, mq) -> Optional[tuple]:
    return MutationOracle(plan).find_counterexample(hypothesis, mq)


def find_counterexample_random(hypothesis, mq, alphabet: Sequence, count: int = RANDOM_COUNT,
                               min_len: int = RANDOM_MIN, max_len: int = RANDOM_MAX,
                               seed: int = 0) -> Optional[tuple]:
    return RandomWordsOracle(alphabet, count, min_len, max_len, seed).find_counterexample(hypothesis, mq)


def default_oracles(alphabet: Alphabet, n: int = DEFAULT_INSERTIONS, random_count: int = RANDOM_COUNT,
                    random_min: int = RANDOM_MIN, random_max: int = RANDOM_MAX, seed: int = 0) -> list:
    """Mutation oracle first, random words second."""
    plan = MutationPlan(tuple(alphabet), HappyFlow.for_alphabet(alphabet), n)
    oracles = [MutationOracle(plan)]
    if random_count:
        oracles.append(RandomWordsOracle(alphabet, random_count, random_min, random_max, seed))
    return oracles
