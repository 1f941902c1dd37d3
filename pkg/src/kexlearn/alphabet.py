"""Abstract input symbols and the default learning alphabet."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from . import messages as m
from .kex import ECDH, KexFlowType, flow_by_name

STATIC = "STATIC"
CRYPTOGRAPHIC = "CRYPTOGRAPHIC"
VARIABLE = "VARIABLE"
UNDEFINED = "UNDEFINED"
CLASSES = (STATIC, CRYPTOGRAPHIC, VARIABLE, UNDEFINED)

USERAUTH_VARIANTS = ("none", "password", "publickey")
CHANNEL_REQUEST_VARIANTS = ("exec", "shell", "pty-req")


@dataclass(frozen=True)
class Symbol:
    name: str
    message_id: int
    msg_class: str = STATIC
    variant: Optional[str] = None

    def __post_init__(self):
        if self.msg_class not in CLASSES:
            raise ValueError(f"unknown message class {self.msg_class!r}")
        if not 0 < self.message_id < 256:
            raise ValueError(f"message id {self.message_id} out of range")

    def __str__(self):
        return self.name

    def to_line(self) -> str:
        parts = [self.name, str(self.message_id), self.msg_class]
        if self.variant:
            parts.append(self.variant)
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "Symbol":
        parts = line.replace(",", " ").split()
        if len(parts) not in (3, 4):
            raise ValueError(f"expected 'name id class [variant]', got {line!r}")
        variant = parts[3] if len(parts) == 4 else None
        return cls(parts[0], int(parts[1]), parts[2].upper(), variant)


class Alphabet(Sequence[Symbol]):
    def __init__(self, symbols: Iterable[Symbol], flow: KexFlowType = ECDH):
        self.symbols = tuple(symbols)
        self.flow = flow
        self._index = {}
        for i, sym in enumerate(self.symbols):
            if sym.name in self._index:
                raise ValueError(f"duplicate symbol name {sym.name}")
            self._index[sym.name] = i
        if sum(1 for s in self.symbols if s.message_id == m.KEXINIT) > 1:
            raise ValueError("an alphabet carries exactly one KEXINIT symbol")

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self) -> Iterator[Symbol]:
        return iter(self.symbols)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.symbols[self._index[key]]
        return self.symbols[key]

    def __contains__(self, item) -> bool:
        name = item.name if isinstance(item, Symbol) else item
        return name in self._index

    def index(self, symbol) -> int:
        name = symbol.name if isinstance(symbol, Symbol) else symbol
        return self._index[name]

    def word(self, names: Iterable[str]) -> tuple[Symbol, ...]:
        return tuple(self[n] for n in names)

    def happy_flow(self) -> tuple[Symbol, ...]:
        return self.word(happy_flow_names(self.flow))

    def to_text(self) -> str:
        lines = [f"# flow {self.flow.key}"] + [s.to_line() for s in self.symbols]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, flow: Optional[KexFlowType] = None) -> "Alphabet":
        symbols = []
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("# flow") and flow is None:
                flow = flow_by_name(line.split()[-1])
                continue
            if not line or line.startswith("#"):
                continue
            symbols.append(Symbol.from_line(line))
        return cls(symbols, flow or ECDH)

    @classmethod
    def load(cls, path, flow: Optional[KexFlowType] = None) -> "Alphabet":
        return cls.from_text(Path(path).read_text(), flow)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def happy_flow_names(flow: KexFlowType) -> list[str]:
    names = m.FLOW_NAMES[flow.activate().variant]
    if flow.variant == "DHGEX":
        kex = [names[34], names[32]]
    else:
        kex = [names[30]]
    return ["KEXINIT", *kex, "NEWKEYS", "SERVICE_REQUEST"]


_CRYPTO_FLOW_IDS = {"ECDH": {30, 31}, "DH": {30, 31}, "DHGEX": {32, 33}}


def default_alphabet(flow: KexFlowType = ECDH) -> Alphabet:
    flow.activate()
    symbols = []

    def add(msg_id, cls=STATIC, name=None, variant=None):
        symbols.append(Symbol(name or m.message_name(msg_id, flow), msg_id, cls, variant))

    for msg_id in range(1, 9):
        add(msg_id)
    add(m.KEXINIT, VARIABLE)
    add(m.NEWKEYS)
    for msg_id in sorted(m.FLOW_NAMES[flow.variant]):
        add(msg_id, CRYPTOGRAPHIC if msg_id in _CRYPTO_FLOW_IDS[flow.variant] else STATIC)
    for variant in USERAUTH_VARIANTS:
        add(m.USERAUTH_REQUEST, VARIABLE, f"USERAUTH_REQUEST_{variant.upper()}", variant)
    for msg_id in (51, 52, 53, 60, 61, 80, 81, 82):
        add(msg_id)
    for msg_id in range(90, 101):
        if msg_id == m.CHANNEL_REQUEST:
            for variant in CHANNEL_REQUEST_VARIANTS:
                name = "CHANNEL_REQUEST_" + variant.upper().replace("-", "_")
                add(msg_id, VARIABLE, name, variant)
        else:
            add(msg_id)
    for msg_id in m.UNDEFINED_IDS:
        add(msg_id, UNDEFINED, f"UNDEFINED_{msg_id}")
    return Alphabet(symbols, flow)
