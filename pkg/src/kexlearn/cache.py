"""Prefix-tree query cache with absorbing closure and majority-vote conflict resolution."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .mapper import CONNECTION_CLOSED, is_closing

log = logging.getLogger(__name__)

POPULATION = 13
THRESHOLD = (POPULATION + 1) // 2


class NondeterminismError(RuntimeError):
    def __init__(self, word, tally):
        self.word = tuple(word)
        self.tally = dict(tally)
        names = " ".join(_name(s) for s in word)
        super().__init__(f"no output reached {THRESHOLD} of {POPULATION} votes for [{names}]")


class LearnerRestart(Exception):
    """Cached answers the learner may already rely on were rewritten."""


def _name(symbol) -> str:
    return getattr(symbol, "name", symbol)


@dataclass
class Node:
    output: Optional[str] = None
    children: dict = field(default_factory=dict)
    confirmed: bool = False


@dataclass
class Vote:
    word: tuple[str, ...]
    trials: int
    winner: tuple[str, ...]
    changed: bool


class QueryCache:
    """Maps words to output words.

    A stored closing letter answers every extension of its prefix.
    """

    def __init__(self):
        self.root = Node()
        self.size = 0

    def walk(self, word: Sequence) -> list[Node]:
        """Nodes along the cached part of ``word`` (stops at a closing letter)."""
        nodes = []
        node = self.root
        for symbol in word:
            node = node.children.get(_name(symbol))
            if node is None:
                break
            nodes.append(node)
            if is_closing(node.output):
                break
        return nodes

    def lookup(self, word: Sequence) -> Optional[tuple[str, ...]]:
        nodes = self.walk(word)
        if len(nodes) == len(word) or (nodes and is_closing(nodes[-1].output)):
            outs = [n.output for n in nodes]
            return tuple(outs + [CONNECTION_CLOSED] * (len(word) - len(outs)))
        return None

    def insert(self, word: Sequence, outputs: Sequence[str]) -> Optional[int]:
        """Store outputs; returns the first index that contradicts the cache, if any."""
        node = self.root
        for i, (symbol, letter) in enumerate(zip(word, outputs)):
            key = _name(symbol)
            child = node.children.get(key)
            if child is None:
                child = node.children[key] = Node(letter)
                self.size += 1
            elif child.output != letter:
                return i
            node = child
            if is_closing(letter):
                break
        return None

    def overwrite(self, word: Sequence, outputs: Sequence[str]) -> bool:
        """Force outputs along ``word``; a changed node loses its subtree."""
        changed = False
        node = self.root
        for symbol, letter in zip(word, outputs):
            key = _name(symbol)
            child = node.children.get(key)
            if child is None:
                child = node.children[key] = Node(letter)
                self.size += 1
            elif child.output != letter:
                child.output = letter
                child.children = {}
                changed = True
            child.confirmed = True
            node = child
            if is_closing(letter):
                node.children = {}
                break
        return changed

    def words(self):
        """All stored (word, outputs) leaves, depth first."""
        stack = [(self.root, (), ())]
        while stack:
            node, word, outs = stack.pop()
            if not node.children and word:
                yield word, outs
            for key in sorted(node.children, reverse=True):
                child = node.children[key]
                stack.append((child, word + (key,), outs + (child.output,)))


@dataclass
class QueryStats:
    sul_queries: int = 0
    cache_hits: int = 0
    conflicts: int = 0
    confirmations: int = 0
    votes: list = field(default_factory=list)


class MembershipOracle:
    """Answers output queries from the cache or the SUL.

    ``nondeterministic`` mode is entered on the first conflict (or set
    upfront). In that mode every closing letter is observed twice before the
    cache answers extensions from it, since a spurious close would otherwise
    hide the rest of the trace for good.
    """

    def __init__(self, run: Callable[[Sequence], Sequence[str]], nondeterministic: bool = False,
                 population: int = POPULATION):
        self.run = run
        self.cache = QueryCache()
        self.nondeterministic = nondeterministic
        self.population = population
        self.threshold = population // 2 + 1
        self.stats = QueryStats()

    def _sul(self, word: Sequence) -> tuple[str, ...]:
        self.stats.sul_queries += 1
        return tuple(self.run(word))

    def query(self, word: Sequence) -> tuple[str, ...]:
        word = tuple(word)
        if not word:
            return ()
        while True:
            nodes = self.cache.walk(word)
            if self.nondeterministic and nodes and is_closing(nodes[-1].output) \
                    and not nodes[-1].confirmed:
                self.confirm(word[:len(nodes)])
                continue
            cached = self.cache.lookup(word)
            if cached is not None:
                self.stats.cache_hits += 1
                return cached
            return self._fresh(word)

    def _fresh(self, word: tuple) -> tuple[str, ...]:
        outputs = self._sul(word)
        conflict = self.cache.insert(word, outputs)
        if conflict is not None:
            self.stats.conflicts += 1
            log.info("cache conflict at position %d of %s", conflict, [_name(s) for s in word])
            switched = not self.nondeterministic
            self.nondeterministic = True
            changed = self.resolve(word[:conflict + 1])
            if switched or changed:
                raise LearnerRestart()
            return self.query(word)
        if self.nondeterministic:
            nodes = self.cache.walk(word)
            if nodes and is_closing(nodes[-1].output) and not nodes[-1].confirmed:
                self.confirm(word[:len(nodes)])
                return self.query(word)
        return outputs

    def verify(self, word: Sequence) -> tuple[str, ...]:
        """Answer with a fresh SUL run, voting if it disagrees with the cache."""
        word = tuple(word)
        cached = self.query(word)
        fresh = self._sul(word)
        if fresh == cached:
            return cached
        self.stats.conflicts += 1
        switched = not self.nondeterministic
        self.nondeterministic = True
        if self.resolve(word) or switched:
            raise LearnerRestart()
        return self.query(word)

    def confirm(self, prefix: tuple) -> None:
        """Second observation of a cached closing prefix."""
        self.stats.confirmations += 1
        stored = self.cache.lookup(prefix)
        again = self._sul(prefix)
        if again == stored:
            self.cache.walk(prefix)[-1].confirmed = True
            return
        self.stats.conflicts += 1
        if self.resolve(prefix):
            raise LearnerRestart()

    def resolve(self, prefix: tuple) -> bool:
        """Majority vote over fresh runs of ``prefix``; returns whether the cache changed."""
        tally: Counter = Counter()
        for trial in range(1, self.population + 1):
            outputs = self._sul(prefix)
            tally[outputs] += 1
            if tally[outputs] >= self.threshold:
                changed = self.cache.overwrite(prefix, outputs)
                self.stats.votes.append(Vote(tuple(_name(s) for s in prefix), trial, outputs, changed))
                log.info("vote on %s settled after %d trials (changed=%s)",
                         [_name(s) for s in prefix], trial, changed)
                return changed
        raise NondeterminismError(prefix, tally)
