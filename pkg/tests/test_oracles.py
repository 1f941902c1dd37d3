import random
from itertools import combinations, product
from math import comb

import pytest

from conftest import make_mapper
from kexlearn.alphabet import default_alphabet
from kexlearn.cache import MembershipOracle
from kexlearn.kex import DHGEX
from kexlearn.mealy import build_machine
from kexlearn.oracles import (HappyFlow, MutationOracle, MutationPlan, RandomWordsOracle,
                              count_mutations, default_oracles, enumerate_words, insert_at,
                              mutation_count)
from reference import compliant_reference


@pytest.mark.parametrize("size, length, n, expected", [
    (94, 4, 2, 133_011), (94, 5, 2, 186_121), (94, 4, 1, 471), (46, 4, 1, 231), (10, 0, 2, 111), (5, 3, 0, 1),
])
def test_mutation_count_values(size, length, n, expected):
    assert mutation_count(size, length, n) == expected


def test_count_for_default_alphabet():
    a = default_alphabet()
    plan = MutationPlan(tuple(a), HappyFlow.for_alphabet(a), 1)
    assert count_mutations(plan) == 1 + 46 * 5
    assert count_mutations(MutationPlan(tuple(a), HappyFlow.for_alphabet(a), 2)) == 1 + 230 + 46 ** 2 * 15
    gex = default_alphabet(DHGEX)
    assert count_mutations(MutationPlan(tuple(gex), HappyFlow.for_alphabet(gex), 2)) == \
        1 + 49 * 6 + 49 ** 2 * 21


def test_negative_n_rejected():
    with pytest.raises(ValueError):
        mutation_count(3, 3, -1)


def brute_force(alphabet, base, n):
    """Every (symbols, positions) pair, built without insert_at."""
    words = []
    for i in range(n + 1):
        for symbols in product(alphabet, repeat=i):
            for positions in combinations(range(len(base) + i), i):
                word, rest, extra = [], list(base), list(symbols)
                for k in range(len(base) + i):
                    word.append(extra.pop(0) if k in positions else rest.pop(0))
                words.append(tuple(word))
    return words


def test_enumeration_matches_formula_on_random_triples():
    rng = random.Random(2024)
    for _ in range(200):
        size, length, n = rng.randint(1, 8), rng.randint(0, 5), rng.randint(0, 2)
        alphabet = [f"s{i}" for i in range(size)]
        base = [f"h{i}" for i in range(length)]
        words = list(enumerate_words(alphabet, base, n))
        assert len(words) == mutation_count(size, length, n) == \
            sum(size ** i * comb(length + i, i) for i in range(n + 1))
        if size <= 4:
            assert words == brute_force(alphabet, base, n)


def test_enumeration_order():
    words = list(enumerate_words("xy", "AB", 1))
    assert words[0] == ("A", "B")
    assert words[1:4] == [("x", "A", "B"), ("A", "x", "B"), ("A", "B", "x")]
    assert words[4] == ("y", "A", "B")


def test_insert_at():
    assert insert_at("ABC", "xy", (0, 4)) == ("x", "A", "B", "C", "y")
    assert insert_at("", "xy", (0, 1)) == ("x", "y")


def test_random_words_reproducible():
    a = list(RandomWordsOracle("abc", 50, 5, 15, seed=4).words())
    assert a == list(RandomWordsOracle("abc", 50, 5, 15, seed=4).words())
    assert a != list(RandomWordsOracle("abc", 50, 5, 15, seed=5).words())
    assert all(5 <= len(w) <= 15 for w in a)
    with pytest.raises(ValueError):
        RandomWordsOracle("abc", 1, 0, 3)


def test_mutation_oracle_finds_c3_deviation():
    mapper, _ = make_mapper("c3")
    mq = MembershipOracle(mapper.run_query)
    a = mapper.alphabet
    oracle = MutationOracle(MutationPlan(tuple(a), HappyFlow.for_alphabet(a), 1))
    ce = oracle.find_counterexample(compliant_reference(), mq)
    assert ce is not None
    assert mq.query(ce) != compliant_reference().run(ce)


def test_mutation_oracle_skips_verified_hypothesis():
    mapper, endpoint = make_mapper()
    mq = MembershipOracle(mapper.run_query)
    a = mapper.alphabet
    oracle = MutationOracle(MutationPlan(tuple(a), HappyFlow.for_alphabet(a), 1))
    assert oracle.find_counterexample(compliant_reference(), mq) is None
    checked = oracle.checked
    assert oracle.find_counterexample(compliant_reference(), mq) is None
    assert oracle.checked == checked


def test_one_state_hypothesis_is_refuted_by_happy_flow():
    a = default_alphabet()
    closed = build_machine([s.name for s in a], {}, default=(0, "CONNECTION_CLOSED"))
    mapper, _ = make_mapper()
    mq = MembershipOracle(mapper.run_query)
    oracle = MutationOracle(MutationPlan(tuple(a), HappyFlow.for_alphabet(a), 2))
    assert [s.name for s in oracle.find_counterexample(closed, mq)] == \
        ["KEXINIT", "KEX_ECDH_INIT", "NEWKEYS", "SERVICE_REQUEST"]


def test_default_oracles_order():
    oracles = default_oracles(default_alphabet())
    assert isinstance(oracles[0], MutationOracle) and isinstance(oracles[1], RandomWordsOracle)
    assert len(default_oracles(default_alphabet(), random_count=0)) == 1
