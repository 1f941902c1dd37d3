"""Observation-table Mealy learner with binary-search counterexample processing.

Counterexamples are handled the Rivest-Schapire way: a binary search over
the counterexample finds a single distinguishing suffix, which is added to
the suffix set E. S therefore only ever holds pairwise distinct rows.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .cache import LearnerRestart, MembershipOracle
from .mealy import MealyMachine

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 3600.0


class BudgetExpired(Exception):
    pass


class Deadline:
    def __init__(self, seconds: Optional[float], clock: Callable[[], float] = time.monotonic):
        self.clock = clock
        self.end = None if seconds is None else clock() + seconds

    def expired(self) -> bool:
        return self.end is not None and self.clock() >= self.end

    def check(self) -> None:
        if self.expired():
            raise BudgetExpired()


class ObservationTable:
    def __init__(self, alphabet: Sequence, mq: MembershipOracle):
        self.alphabet = tuple(alphabet)
        self.mq = mq
        self.S: list[tuple] = [()]
        self.E: list[tuple] = [(a,) for a in self.alphabet]
        self._rows: dict[tuple, tuple] = {}

    def cell(self, prefix: tuple, suffix: tuple) -> tuple[str, ...]:
        return self.mq.query(prefix + suffix)[len(prefix):]

    def row(self, prefix: tuple) -> tuple:
        known = self._rows.get(prefix)
        if known is None or len(known) < len(self.E):
            start = 0 if known is None else len(known)
            known = (known or ()) + tuple(self.cell(prefix, e) for e in self.E[start:])
            self._rows[prefix] = known
        return known

    def close(self, deadline: Optional[Deadline] = None) -> None:
        """Extend S until every one-symbol extension matches a row of S."""
        changed = True
        while changed:
            changed = False
            seen = {self.row(s) for s in self.S}
            for s in list(self.S):
                for a in self.alphabet:
                    if deadline:
                        deadline.check()
                    r = self.row(s + (a,))
                    if r not in seen:
                        self.S.append(s + (a,))
                        seen.add(r)
                        changed = True

    def hypothesis(self) -> MealyMachine:
        index = {self.row(s): i for i, s in enumerate(self.S)}
        trans = {}
        for i, s in enumerate(self.S):
            for k, a in enumerate(self.alphabet):
                # E starts with the single symbols, in alphabet order
                out = self.row(s)[k][0]
                trans[(i, a.name)] = (index[self.row(s + (a,))], out)
        return MealyMachine(tuple(a.name for a in self.alphabet), trans, 0, converged=False)

    def initial_hypothesis(self) -> MealyMachine:
        row = self.row(())
        trans = {(0, a.name): (0, row[k][0]) for k, a in enumerate(self.alphabet)}
        return MealyMachine(tuple(a.name for a in self.alphabet), trans, 0, converged=False)

    def refine(self, hypothesis: MealyMachine, counterexample: tuple) -> bool:
        """Add the suffix found by binary search; False if the word is stale."""
        w = tuple(counterexample)
        m = len(w)
        access = {i: s for i, s in enumerate(self.S)}

        def agrees(i: int) -> bool:
            q = hypothesis.state_after(w[:i])
            suffix = w[i:]
            sul = self.mq.query(access[q] + suffix)[len(access[q]):]
            return sul == hypothesis.run(suffix, start=q)

        if agrees(0):
            log.info("discarding stale counterexample %s", [a.name for a in w])
            return False
        lo, hi = 0, m  # agrees(lo) is False, agrees(hi) is True
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if agrees(mid):
                hi = mid
            else:
                lo = mid
        suffix = w[hi:]
        if not suffix or suffix in self.E:
            log.info("counterexample yields no new suffix; discarding")
            return False
        self.E.append(suffix)
        return True


@dataclass
class LearnStats:
    queries_total: int = 0
    queries_final: int = 0
    cache_hits: int = 0
    rounds: int = 0
    restarts: int = 0
    conflicts: int = 0
    votes: list = field(default_factory=list)
    states: int = 0
    seconds: float = 0.0
    converged: bool = False
    counterexamples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "queries_total": self.queries_total, "queries_final": self.queries_final,
            "cache_hits": self.cache_hits, "rounds": self.rounds, "restarts": self.restarts,
            "conflicts": self.conflicts, "states": self.states,
            "seconds": round(self.seconds, 3), "converged": self.converged,
            "votes": [{"word": list(v.word), "trials": v.trials, "changed": v.changed}
                      for v in self.votes],
            "counterexamples": [list(c) for c in self.counterexamples],
        }


@dataclass
class LearnResult:
    machine: MealyMachine
    stats: LearnStats
    mq: MembershipOracle


def learn(alphabet: Sequence, mq: MembershipOracle, oracles: Sequence,
          budget: Optional[float] = DEFAULT_BUDGET,
          clock: Callable[[], float] = time.monotonic) -> LearnResult:
    """Learn until no oracle finds a counterexample or the budget runs out.

    Each oracle exposes ``find_counterexample(hypothesis, mq, deadline)``.
    """
    started = clock()
    deadline = Deadline(budget, clock)
    stats = LearnStats()
    hypothesis: Optional[MealyMachine] = None
    table: Optional[ObservationTable] = None
    round_start = 0
    converged = False
    while True:
        try:
            table = ObservationTable(alphabet, mq)
            hypothesis = None
            while True:
                round_start = mq.stats.sul_queries
                table.close(deadline)
                hypothesis = table.hypothesis()
                stats.rounds += 1
                log.info("round %d: hypothesis with %d states", stats.rounds, len(hypothesis))
                counterexample = None
                for oracle in oracles:
                    counterexample = oracle.find_counterexample(hypothesis, mq, deadline)
                    if counterexample is not None:
                        break
                if counterexample is None:
                    converged = True
                    break
                # oracle soundness: the disagreement must survive a fresh run
                if mq.verify(counterexample) == hypothesis.run(counterexample):
                    log.info("counterexample did not reproduce; continuing")
                    continue
                stats.counterexamples.append(tuple(a.name for a in counterexample))
                before = len(hypothesis)
                if table.refine(hypothesis, counterexample):
                    table.close(deadline)
                    if len(table.S) <= before:
                        log.warning("refinement did not add a state")
            break
        except LearnerRestart:
            stats.restarts += 1
            log.info("restarting learner with repaired cache (restart %d)", stats.restarts)
            continue
        except BudgetExpired:
            log.info("budget expired")
            break
    if hypothesis is None:
        try:
            hypothesis = table.initial_hypothesis()
        except LearnerRestart:
            hypothesis = ObservationTable(alphabet, mq).initial_hypothesis()
    hypothesis.converged = converged
    stats.converged = converged
    stats.queries_total = mq.stats.sul_queries
    stats.queries_final = mq.stats.sul_queries - round_start
    stats.cache_hits = mq.stats.cache_hits
    stats.conflicts = mq.stats.conflicts
    stats.votes = list(mq.stats.votes)
    stats.states = len(hypothesis)
    stats.seconds = clock() - started
    return LearnResult(hypothesis, stats, mq)
