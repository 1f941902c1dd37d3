"""Deterministic Mealy machines over named input symbols."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Optional, Sequence


def _name(symbol) -> str:
    return getattr(symbol, "name", symbol)


@dataclass
class MealyMachine:
    inputs: tuple[str, ...]
    transitions: dict = field(default_factory=dict)  # (state, input) -> (next, output)
    initial: int = 0
    converged: bool = True

    @property
    def states(self) -> list[int]:
        return sorted({s for s, _ in self.transitions} | {self.initial})

    def __len__(self) -> int:
        return len(self.states)

    def step(self, state: int, symbol) -> tuple[int, str]:
        return self.transitions[(state, _name(symbol))]

    def target(self, state: int, symbol) -> int:
        return self.step(state, symbol)[0]

    def output(self, state: int, symbol) -> str:
        return self.step(state, symbol)[1]

    def state_after(self, word: Iterable, start: Optional[int] = None) -> int:
        state = self.initial if start is None else start
        for symbol in word:
            state = self.target(state, symbol)
        return state

    def run(self, word: Iterable, start: Optional[int] = None) -> tuple[str, ...]:
        state = self.initial if start is None else start
        out = []
        for symbol in word:
            state, letter = self.step(state, symbol)
            out.append(letter)
        return tuple(out)

    def validate(self) -> None:
        for s in self.states:
            for a in self.inputs:
                if (s, a) not in self.transitions:
                    raise ValueError(f"transition missing for state {s} input {a}")

    # -- structure
    def access_words(self) -> dict[int, tuple[str, ...]]:
        """Shortest access word per reachable state, BFS in input order."""
        access = {self.initial: ()}
        queue = deque([self.initial])
        while queue:
            s = queue.popleft()
            for a in self.inputs:
                t = self.target(s, a)
                if t not in access:
                    access[t] = access[s] + (a,)
                    queue.append(t)
        return access

    def reachable(self) -> set[int]:
        return set(self.access_words())

    def can_reach(self, predicate: Callable[[str], bool]) -> set[int]:
        """States from which some transition with a matching output is reachable."""
        good = {s for (s, a), (_, o) in self.transitions.items() if predicate(o)}
        preds: dict[int, set[int]] = {}
        for (s, a), (t, _) in self.transitions.items():
            preds.setdefault(t, set()).add(s)
        queue = deque(good)
        while queue:
            t = queue.popleft()
            for s in preds.get(t, ()):
                if s not in good:
                    good.add(s)
                    queue.append(s)
        return good

    def partition(self) -> dict[int, int]:
        """Moore partition refinement: state -> equivalence block."""
        rows: dict = {}
        block = {s: rows.setdefault(tuple(self.output(s, a) for a in self.inputs), len(rows))
                 for s in self.states}
        while True:
            sig = {s: (block[s], tuple(block[self.target(s, a)] for a in self.inputs))
                   for s in self.states}
            ids: dict = {}
            refined = {s: ids.setdefault(sig[s], len(ids)) for s in self.states}
            if len(set(refined.values())) == len(set(block.values())):
                return refined
            block = refined

    def is_minimal(self) -> bool:
        return len(set(self.partition().values())) == len(self.states)

    def distinguishing_word(self, p: int, q: int, max_length: int) -> Optional[tuple[str, ...]]:
        """Shortest word with different outputs from p and q, up to max_length."""
        seen = {(p, q)}
        queue = deque([(p, q, ())])
        while queue:
            a, b, word = queue.popleft()
            if len(word) >= max_length:
                continue
            for x in self.inputs:
                (ta, oa), (tb, ob) = self.step(a, x), self.step(b, x)
                if oa != ob:
                    return word + (x,)
                if (ta, tb) not in seen:
                    seen.add((ta, tb))
                    queue.append((ta, tb, word + (x,)))
        return None

    def pairwise_distinct(self) -> bool:
        n = len(self.states)
        return all(self.distinguishing_word(p, q, n) is not None
                   for p, q in combinations(self.states, 2))

    def minimized(self) -> "MealyMachine":
        block = self.partition()
        order = self.access_words()
        # renumber blocks in BFS order of their first reachable member
        ranked: dict[int, int] = {}
        for s in sorted(order, key=lambda s: (len(order[s]), [self.inputs.index(a) for a in order[s]])):
            ranked.setdefault(block[s], len(ranked))
        trans = {}
        for s in order:
            for a in self.inputs:
                t, o = self.step(s, a)
                trans[(ranked[block[s]], a)] = (ranked[block[t]], o)
        return MealyMachine(self.inputs, trans, ranked[block[self.initial]], self.converged)

    def canonical(self) -> "MealyMachine":
        """Minimal machine with states numbered in BFS order of shortest access words."""
        return self.minimized()

    def isomorphism(self, other: "MealyMachine") -> Optional[dict[int, int]]:
        if set(self.inputs) != set(other.inputs) or len(self) != len(other):
            return None
        mapping = {self.initial: other.initial}
        queue = deque([self.initial])
        while queue:
            s = queue.popleft()
            for a in self.inputs:
                t, o = self.step(s, a)
                t2, o2 = other.step(mapping[s], a)
                if o != o2:
                    return None
                if t in mapping:
                    if mapping[t] != t2:
                        return None
                else:
                    if t2 in mapping.values():
                        return None
                    mapping[t] = t2
                    queue.append(t)
        return mapping if len(mapping) == len(self) else None

    def isomorphic(self, other: "MealyMachine") -> bool:
        return self.isomorphism(other) is not None

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "initial": self.initial,
            "converged": self.converged,
            "states": self.states,
            "transitions": [
                {"from": s, "input": a, "to": t, "output": o}
                for s in self.states for a in self.inputs
                for t, o in [self.transitions[(s, a)]]
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "MealyMachine":
        trans = {(t["from"], t["input"]): (t["to"], t["output"]) for t in data["transitions"]}
        return cls(tuple(data["inputs"]), trans, data["initial"], data.get("converged", True))

    @classmethod
    def from_json(cls, text: str) -> "MealyMachine":
        return cls.from_dict(json.loads(text))


def build_machine(inputs: Sequence, edges: dict, default: Optional[tuple[int, str]] = None,
                  states: Optional[Iterable[int]] = None, initial: int = 0) -> MealyMachine:
    """Machine from a sparse edge map with a fallback (target, output) for missing inputs."""
    names = tuple(_name(a) for a in inputs)
    edges = {(s, _name(a)): v for (s, a), v in edges.items()}
    all_states = set(states or ()) | {s for s, _ in edges} | {t for t, _ in edges.values()} | {initial}
    if default is not None:
        all_states.add(default[0])
    trans = {}
    for s in sorted(all_states):
        for a in names:
            if (s, a) in edges:
                trans[(s, a)] = edges[(s, a)]
            elif default is not None:
                trans[(s, a)] = default
            else:
                raise ValueError(f"no transition for state {s} input {a}")
    return MealyMachine(names, trans, initial)
