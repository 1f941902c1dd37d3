"""Find, classify and confirm strict KEX violations in learned machines.

The scan walks the happy-flow states of a machine up to the point where the
client's NEWKEYS is consumed and flags every non-expected input that does
not close the connection. A tolerance only counts when service acceptance
is still reachable afterwards; tolerances that lead into a region from which
SERVICE_ACCEPT is unreachable (taint-style deferred termination) are kept as
raw observations but never reported as violations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import messages as m
from .alphabet import Alphabet
from .mapper import CONNECTION_CLOSED, Credentials, Mapper, is_closing, tokens
from .mealy import MealyMachine

PRE, KEX, LATE = "PRE", "KEX", "LATE"
CATEGORIES = ("C1", "C2", "C3", "C4")
ROLE_CATEGORY = {PRE: "C1", KEX: "C3", LATE: "C4"}
ACCEPT = "SERVICE_ACCEPT"
AUTH_SUCCESS = "USERAUTH_SUCCESS"

HAPPY_LABELS = {
    4: ["BPP START", "ALG NEGOTIATION DONE", "KEYS DERIVED", "KEX COMPLETE", "AUTH START"],
    5: ["BPP START", "ALG NEGOTIATION DONE", "GROUP RECEIVED", "KEYS DERIVED", "KEX COMPLETE",
        "AUTH START"],
}


class AnalysisError(Exception):
    pass


def accepts(letter: str) -> bool:
    return ACCEPT in tokens(letter)


@dataclass
class HappyPath:
    states: list[int]
    outputs: list[str]
    names: list[str]
    newkeys_index: int
    roles: list[str]

    @property
    def handshake(self) -> range:
        """Indices of states where the client NEWKEYS has not been consumed yet."""
        return range(self.newkeys_index + 1)


def happy_path(machine: MealyMachine, happy_names: Sequence[str]) -> HappyPath:
    states = [machine.initial]
    outputs = []
    for name in happy_names:
        if name not in machine.inputs:
            raise AnalysisError(f"happy-flow symbol {name} missing from the machine alphabet")
        t, o = machine.step(states[-1], name)
        if is_closing(o):
            raise AnalysisError(f"happy flow breaks at {name}: {o}; the SUL never interoperated")
        states.append(t)
        outputs.append(o)
    if not accepts(outputs[-1]):
        raise AnalysisError("happy flow does not reach service acceptance")
    nk = list(happy_names).index("NEWKEYS")
    roles = []
    for i in range(len(states)):
        if i == 0:
            roles.append(PRE)
        elif any("NEWKEYS" in tokens(o) for o in outputs[:i]):
            roles.append(LATE)
        else:
            roles.append(KEX)
    return HappyPath(states, outputs, list(happy_names), nk, roles)


@dataclass
class ViolationFinding:
    category: str
    flow: str
    role: str
    index: int
    state: int
    symbol: str
    output: str
    witness: tuple
    live: bool
    confirmed: bool = False
    confirmation_word: tuple = ()
    confirmation_outputs: tuple = ()
    confirmation_trace: list = field(default_factory=list)
    channel_pattern: bool = False
    flow_category: str = ""

    def to_dict(self) -> dict:
        return {
            "category": self.category, "flow_category": self.flow_category or self.category,
            "flow": self.flow, "role": self.role, "index": self.index, "state": self.state,
            "symbol": self.symbol, "output": self.output, "witness": list(self.witness),
            "live": self.live, "confirmed": self.confirmed,
            "channel_pattern": self.channel_pattern,
            "confirmation_word": list(self.confirmation_word),
            "confirmation_outputs": list(self.confirmation_outputs),
            "confirmation_trace": [f"{d} {n}" for d, n in self.confirmation_trace],
        }


def scan_hypothesis(machine: MealyMachine, happy_names: Sequence[str],
                    flow: str = "") -> list[ViolationFinding]:
    """Raw tolerances at handshake states, live and dead alike, with provisional categories."""
    path = happy_path(machine, happy_names)
    live_states = machine.can_reach(accepts)
    raw = []
    for i in path.handshake:
        s = path.states[i]
        expected = path.names[i]
        for a in machine.inputs:
            if a == expected:
                continue
            t, o = machine.step(s, a)
            if is_closing(o):
                continue
            witness = tuple(path.names[:i]) + (a,)
            raw.append(ViolationFinding(ROLE_CATEGORY[path.roles[i]], flow, path.roles[i], i, s, a,
                                        o, witness, t in live_states))
    kex_live = {f.symbol for f in raw if f.role == KEX and f.live}
    for f in raw:
        if f.role == LATE and f.symbol in kex_live:
            f.category = "C3"
        f.flow_category = f.category
    return raw


def findings(raw: Sequence[ViolationFinding]) -> list[ViolationFinding]:
    return [f for f in raw if f.live]


def channel_pattern(machine: MealyMachine, state: int) -> bool:
    """CHANNEL_OPEN moves to a new state that CHANNEL_CLOSE reverts."""
    if "CHANNEL_OPEN" not in machine.inputs or "CHANNEL_CLOSE" not in machine.inputs:
        return False
    t, o = machine.step(state, "CHANNEL_OPEN")
    if t == state or is_closing(o):
        return False
    return machine.target(t, "CHANNEL_CLOSE") == state


def confirmation_word(f: ViolationFinding, happy_names: Sequence[str], machine: MealyMachine) -> tuple:
    insert = (f.symbol,)
    if f.symbol == "CHANNEL_OPEN" and channel_pattern(machine, f.state) \
            and "CHANNEL_REQUEST_EXEC" in machine.inputs:
        f.channel_pattern = True
        insert = ("CHANNEL_OPEN", "CHANNEL_REQUEST_EXEC")
    names = list(happy_names)
    return tuple(names[:f.index]) + insert + tuple(names[f.index:])


def confirm_finding(f: ViolationFinding, mapper: Mapper, happy_names: Sequence[str],
                    machine: MealyMachine) -> ViolationFinding:
    """Run the happy flow with the offending input inserted; confirmed iff the
    final SERVICE_REQUEST is accepted."""
    word = confirmation_word(f, happy_names, machine)
    try:
        outputs, trace = mapper.run_trace(mapper.alphabet.word(word))
    except OSError as exc:
        f.confirmation_trace = [("error", str(exc))]
        return f
    f.confirmation_word = word
    f.confirmation_outputs = outputs
    f.confirmation_trace = list(trace)
    f.confirmed = bool(outputs) and accepts(outputs[-1])
    return f


@dataclass
class RogueSession:
    word: tuple
    outputs: tuple
    trace: list
    success: bool

    def to_dict(self) -> dict:
        return {"word": list(self.word), "outputs": list(self.outputs),
                "trace": [f"{d} {n}" for d, n in self.trace], "success": self.success}


def rogue_session(mapper: Mapper, happy_names: Sequence[str], index: int,
                  credentials: Credentials) -> Optional[RogueSession]:
    """Inject an authentication request with the attacker's own credential into
    the handshake at ``index`` and see whether the server logs it in."""
    if "USERAUTH_REQUEST_PASSWORD" not in mapper.alphabet:
        return None
    names = list(happy_names)
    word = tuple(names[:index]) + ("USERAUTH_REQUEST_PASSWORD",) + tuple(names[index:])
    outputs, trace = mapper.run_trace(mapper.alphabet.word(word), credentials=credentials)
    success = any(AUTH_SUCCESS in tokens(o) for o in outputs)
    return RogueSession(word, outputs, list(trace), success)


def machine_auth_success(machine: MealyMachine) -> bool:
    return any(AUTH_SUCCESS in tokens(o) for _, o in machine.transitions.values())


def kex_phase_states(machine: MealyMachine, happy_names: Sequence[str]) -> int:
    """States reachable without sending the client NEWKEYS, the sink excluded."""
    sink = closed_states(machine)
    seen = {machine.initial}
    stack = [machine.initial]
    while stack:
        s = stack.pop()
        for a in machine.inputs:
            if a == "NEWKEYS":
                continue
            t = machine.target(s, a)
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return len(seen - sink)


def closed_states(machine: MealyMachine) -> set[int]:
    return {s for s in machine.states
            if all(machine.step(s, a) == (s, CONNECTION_CLOSED) for a in machine.inputs)}


@dataclass
class FlowReport:
    flow: str
    raw: list[ViolationFinding]
    machine: Optional[MealyMachine] = None
    stats: dict = field(default_factory=dict)
    rogue: list[RogueSession] = field(default_factory=list)
    auth_bypass: bool = False
    error: Optional[str] = None
    roles: list[str] = field(default_factory=list)

    @property
    def findings(self) -> list[ViolationFinding]:
        return [f for f in self.raw if f.live]

    @property
    def confirmed(self) -> list[ViolationFinding]:
        return [f for f in self.raw if f.live and f.confirmed]

    def to_dict(self) -> dict:
        return {
            "flow": self.flow, "error": self.error, "stats": self.stats,
            "auth_bypass": self.auth_bypass,
            "findings": [f.to_dict() for f in self.findings],
            "dead_tolerances": [f.to_dict() for f in self.raw if not f.live],
            "rogue_sessions": [r.to_dict() for r in self.rogue],
        }


def analyze_machine(machine: MealyMachine, mapper: Optional[Mapper], alphabet: Alphabet,
                    attacker: Optional[Credentials] = None) -> FlowReport:
    happy = [s.name for s in alphabet.happy_flow()]
    report = FlowReport(alphabet.flow.key, [], machine)
    try:
        path = happy_path(machine, happy)
        report.roles = [path.roles[i] for i in path.handshake]
        report.raw = scan_hypothesis(machine, happy, alphabet.flow.key)
    except AnalysisError as exc:
        report.error = str(exc)
        return report
    report.auth_bypass = machine_auth_success(machine)
    if mapper is None:
        return report
    for f in report.raw:
        confirm_finding(f, mapper, happy, machine)
    if attacker is not None:
        auth_indices = sorted({f.index for f in report.findings
                               if alphabet[f.symbol].message_id == m.USERAUTH_REQUEST})
        for index in auth_indices:
            session = rogue_session(mapper, happy, index, attacker)
            if session is not None:
                report.rogue.append(session)
                report.auth_bypass |= session.success
    report.auth_bypass |= any(AUTH_SUCCESS in tokens(o) for f in report.raw
                              for o in f.confirmation_outputs)
    return report


def _rejected(report: FlowReport, role: str, symbol: str) -> bool:
    """True when ``symbol`` is not live-tolerated at any happy state of
    ``role`` in another flow's machine (and that flow has such states)."""
    if report.machine is None or report.error or symbol not in report.machine.inputs:
        return False
    if role not in report.roles:
        return False
    return (role, symbol) not in {(f.role, f.symbol) for f in report.findings}


def synthesize_c2(reports: Sequence[FlowReport]) -> list[ViolationFinding]:
    """Relabel confirmed findings as C2 when the same role/symbol is cleanly
    rejected under another key exchange flow of the same SUL."""
    usable = [r for r in reports if r.machine is not None and not r.error]
    if len(usable) < 2:
        return []
    c2 = []
    for r in usable:
        others = [o for o in usable if o is not r]
        for f in r.confirmed:
            if any(_rejected(o, f.role, f.symbol) for o in others):
                f.category = "C2"
                c2.append(f)
    return c2


@dataclass
class ViolationReport:
    sul: str
    flows: list[FlowReport]
    c2: list[ViolationFinding] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def categories(self) -> set[str]:
        return {f.category for r in self.flows for f in r.confirmed}

    @property
    def auth_bypass(self) -> bool:
        return any(r.auth_bypass for r in self.flows)

    @property
    def channel_pattern(self) -> bool:
        return any(f.channel_pattern for r in self.flows for f in r.findings)

    def summary_row(self) -> dict:
        row = {c: c in self.categories for c in CATEGORIES}
        row["auth_bypass"] = self.auth_bypass
        return row

    def to_dict(self) -> dict:
        return {
            "sul": self.sul, "categories": sorted(self.categories),
            "auth_bypass": self.auth_bypass, "channel_pattern": self.channel_pattern,
            "notes": self.notes, "flows": [r.to_dict() for r in self.flows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def build_report(sul: str, flow_reports: Sequence[FlowReport]) -> ViolationReport:
    report = ViolationReport(sul, list(flow_reports))
    usable = [r for r in flow_reports if r.machine is not None and not r.error]
    if len(usable) < 2:
        report.notes.append("single key exchange flow analysed; C2 cannot be assessed")
    else:
        report.c2 = synthesize_c2(usable)
    for r in flow_reports:
        if r.error:
            report.notes.append(f"{r.flow}: {r.error}")
    return report


def summary_table(reports: Sequence[ViolationReport]) -> str:
    head = ["SUL", *CATEGORIES, "AUTH-BYPASS"]
    rows = [head]
    for r in reports:
        row = r.summary_row()
        rows.append([r.sul, *("x" if row[c] else "-" for c in CATEGORIES),
                     "x" if row["auth_bypass"] else "-"])
    widths = [max(len(row[k]) for row in rows) for k in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in rows) + "\n"


# -- export --------------------------------------------------------------------

def state_labels(machine: MealyMachine, happy_names: Optional[Sequence[str]] = None) -> dict[int, str]:
    labels = {s: f"s{s}" for s in machine.states}
    for s in closed_states(machine):
        labels[s] = "CLOSED"
    if happy_names:
        try:
            path = happy_path(machine, happy_names)
        except AnalysisError:
            return labels
        names = HAPPY_LABELS.get(len(happy_names))
        if names:
            for s, label in zip(path.states, names):
                labels.setdefault(s, label)
                if labels[s].startswith("s"):
                    labels[s] = label
    return labels


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(machine: MealyMachine, happy_names: Optional[Sequence[str]] = None,
           wrap: int = 4) -> str:
    labels = state_labels(machine, happy_names)
    order = {a: k for k, a in enumerate(machine.inputs)}
    groups: dict[tuple[int, int, str], list[str]] = {}
    for s in machine.states:
        for a in machine.inputs:
            t, o = machine.step(s, a)
            groups.setdefault((s, t, o), []).append(a)
    lines = ["digraph mealy {", "  rankdir=TB;", '  node [shape=ellipse];',
             '  __start [shape=point];', f"  __start -> s{machine.initial};"]
    for s in machine.states:
        attrs = f"label={_quote(labels[s])}"
        if labels[s] == "CLOSED":
            attrs += ", shape=doublecircle"
        lines.append(f"  s{s} [{attrs}];")
    for (s, t, o) in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        ins = sorted(groups[(s, t, o)], key=order.get)
        chunks = [", ".join(ins[k:k + wrap]) for k in range(0, len(ins), wrap)]
        label = "\\n".join(c.replace('"', '\\"') for c in chunks) + " / " + o.replace('"', '\\"')
        lines.append(f'  s{s} -> s{t} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_machine(machine: MealyMachine, path_stem, happy_names: Optional[Sequence[str]] = None):
    """Write ``<stem>.dot`` and ``<stem>.json``; returns both paths."""
    from pathlib import Path
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    dot = stem.with_suffix(".dot")
    js = stem.with_suffix(".json")
    dot.write_text(to_dot(machine, happy_names))
    js.write_text(machine.to_json())
    return dot, js
