import itertools

import pytest

from conftest import make_mapper
from kexlearn.cache import (LearnerRestart, MembershipOracle, NondeterminismError, QueryCache)
from kexlearn.mapper import CONNECTION_CLOSED

HAPPY = ["KEXINIT", "KEX_ECDH_INIT", "NEWKEYS", "SERVICE_REQUEST"]


class Counting:
    """Deterministic fake SUL: letter i is the symbol name, closing after 'X'."""

    def __init__(self):
        self.calls = 0

    def __call__(self, word):
        self.calls += 1
        out, closed = [], False
        for s in word:
            out.append(CONNECTION_CLOSED if closed or s == "X" else s.lower())
            closed = closed or s == "X"
        return out


def test_second_query_is_cached():
    sul = Counting()
    mq = MembershipOracle(sul)
    assert mq.query(("A", "B")) == ("a", "b")
    assert mq.query(("A", "B")) == ("a", "b")
    assert mq.query(("A",)) == ("a",)
    assert sul.calls == 1 and mq.stats.cache_hits == 2


def test_closed_extension_needs_no_sul():
    sul = Counting()
    mq = MembershipOracle(sul)
    mq.query(("A", "X"))
    assert mq.query(("A", "X", "B", "C")) == ("a", CONNECTION_CLOSED, CONNECTION_CLOSED, CONNECTION_CLOSED)
    assert sul.calls == 1


def test_fresh_word_costs_one_query():
    sul = Counting()
    mq = MembershipOracle(sul)
    mq.query(("A",))
    mq.query(("A", "B"))
    assert sul.calls == 2
    assert mq.query(()) == ()


def test_connection_counter_on_real_sul():
    mapper, endpoint = make_mapper()
    mq = MembershipOracle(mapper.run_query)
    word = mapper.alphabet.word(HAPPY)
    mq.query(word)
    assert endpoint.connections == 1
    mq.query(word)
    assert endpoint.connections == 1
    closed = mapper.alphabet.word(["KEXINIT", "IGNORE"])
    assert mq.query(closed)[-1] == CONNECTION_CLOSED
    assert endpoint.connections == 2
    mq.query(closed + mapper.alphabet.word(["NEWKEYS", "SERVICE_REQUEST"]))
    assert endpoint.connections == 2


def test_deterministic_sul_never_votes():
    sul = Counting()
    mq = MembershipOracle(sul)
    for word in itertools.product("ABX", repeat=3):
        mq.query(word)
    assert mq.stats.votes == [] and mq.stats.conflicts == 0


def test_conflict_votes_and_restarts():
    calls = itertools.count()

    def sul(word):
        # the very first answer is wrong, the rest are right
        n = next(calls)
        return ["bad" if n == 0 else s.lower() for s in word]
    mq = MembershipOracle(sul)
    assert mq.query(("A",)) == ("bad",)
    with pytest.raises(LearnerRestart):
        mq.query(("A", "B"))
    assert mq.nondeterministic
    assert mq.query(("A",)) == ("a",)
    vote = mq.stats.votes[0]
    assert vote.changed and vote.trials == 7 and vote.winner == ("a",)


def test_majority_with_minority_noise():
    calls = itertools.count()

    def sul(word):
        n = next(calls)
        return ["noise" if n % 4 == 3 else s.lower() for s in word]
    mq = MembershipOracle(sul, nondeterministic=True)
    assert mq.resolve(("A", "B")) is False  # nothing cached yet, nothing changed
    vote = mq.stats.votes[0]
    assert vote.winner == ("a", "b") and 7 <= vote.trials <= 13
    assert mq.query(("A", "B")) == ("a", "b")


def test_no_majority_raises():
    outcomes = itertools.cycle(["p", "q", "r", "s"])

    def sul(word):
        return [next(outcomes)] * len(word)
    mq = MembershipOracle(sul, nondeterministic=True)
    with pytest.raises(NondeterminismError) as info:
        mq.resolve(("A",))
    assert sum(info.value.tally.values()) == 13
    assert max(info.value.tally.values()) < 7


def test_closing_answers_confirmed_in_nondeterministic_mode():
    sul = Counting()
    mq = MembershipOracle(sul, nondeterministic=True)
    mq.query(("X",))
    assert sul.calls == 2 and mq.stats.confirmations == 1
    mq.query(("X", "A"))
    assert sul.calls == 2


def test_spurious_close_is_outvoted():
    calls = itertools.count()

    def sul(word):
        n = next(calls)
        if n == 0:
            return [CONNECTION_CLOSED] * len(word)
        return [s.lower() for s in word]
    mq = MembershipOracle(sul, nondeterministic=True)
    with pytest.raises(LearnerRestart):
        mq.query(("A", "B"))
    assert mq.query(("A", "B")) == ("a", "b")


def test_verify_detects_stale_cache():
    answers = {"n": 0}

    def sul(word):
        answers["n"] += 1
        return ["old" if answers["n"] == 1 else "new" for _ in word]
    mq = MembershipOracle(sul)
    mq.query(("A",))
    with pytest.raises(LearnerRestart):
        mq.verify(("A",))
    assert mq.query(("A",)) == ("new",)


def test_overwrite_drops_subtree():
    cache = QueryCache()
    cache.insert(("A", "B"), ("a", "b"))
    assert cache.overwrite(("A",), ("z",))
    assert cache.lookup(("A", "B")) is None
    assert cache.lookup(("A",)) == ("z",)
    assert cache.insert(("A",), ("y",)) == 0


def test_cache_words():
    cache = QueryCache()
    cache.insert(("A", "B"), ("a", "b"))
    cache.insert(("A", "C"), ("a", "c"))
    assert sorted(cache.words()) == [(("A", "B"), ("a", "b")), (("A", "C"), ("a", "c"))]
