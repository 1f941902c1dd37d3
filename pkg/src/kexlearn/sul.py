"""Simulated SSH servers with strict KEX and seeded violations.

Every server runs the real banner exchange, KEXINIT negotiation, key
exchange and cipher activation on the shared codec, but drives its own
state machine, independent from the mapper's client logic. Behavioural
differences between the servers are expressed as :class:`Deviation` rules
on top of one strict base behaviour.
"""
from __future__ import annotations

import logging
import random
import socketserver
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import kex as kx
from . import messages as m
from .messages import KexInit, STRICT_KEX_SERVER
from .wire import (Banner, CipherState, PayloadReader, SSHError, SequenceCounters, boolean,
                   encode_packet, namelist, reset_direction, string, take_line,
                   try_decode_packet, uint32)

log = logging.getLogger(__name__)

PRE_KEXINIT = "PRE_KEXINIT"
KEX = "KEX"
AWAIT_NEWKEYS = "AWAIT_NEWKEYS"
SECURE = "SECURE"
AUTH = "AUTH"
AUTHENTICATED = "AUTHENTICATED"
HANDSHAKE = frozenset({KEX, AWAIT_NEWKEYS})

OPTIONAL = frozenset({m.IGNORE, m.UNIMPLEMENTED, m.DEBUG})
ERLANG_OUTPUT = b"uid=0(root) gid=0(root) groups=0(root)\n"
CATEGORIES = ("C1", "C2", "C3", "C4", "TAINT", "ERLANG", "TECTIA", "FLAKY")


@dataclass(frozen=True)
class Deviation:
    """One seeded departure from strict behaviour.

    ``action`` is one of tolerate, unimplemented, taint, channel,
    buffer-userauth, auth-early, gex-repeat.
    """
    phases: frozenset
    predicate: Callable[[int, Optional[kx.KexFlowType]], bool]
    action: str
    flows: Optional[frozenset] = None
    note: str = ""

    def matches(self, phase: str, msg_id: int, flow: Optional[kx.KexFlowType]) -> bool:
        if phase not in self.phases:
            return False
        if self.flows is not None and (flow is None or flow.variant not in self.flows):
            return False
        return self.predicate(msg_id, flow)


def _ids(*ids):
    wanted = frozenset(ids)
    return lambda msg_id, flow: msg_id in wanted


def _unknown(limit: int = 256):
    return lambda msg_id, flow: msg_id < limit and msg_id not in m.known_ids(flow)


def _transport_layer(msg_id, flow):
    return msg_id < 50 and (msg_id in OPTIONAL or msg_id not in m.known_ids(flow))


def _connection_protocol(msg_id, flow):
    return 80 <= msg_id <= 100


@dataclass
class SulSpec:
    name: str
    deviations: tuple = ()
    flaw_category: Optional[str] = None
    algorithms: tuple = (kx.ECDH.algorithm_name, kx.DH.algorithm_name, kx.DHGEX.algorithm_name)
    strict: bool = True
    retroactive: bool = True
    software: str = "SimSSH_1.0"
    attacker_credential: Optional[tuple[str, str]] = None
    flaky: float = 0.0
    seed: int = 0

    def banner(self) -> Banner:
        return Banner(self.software)


def compliant_spec() -> SulSpec:
    return SulSpec("compliant")


def make_violation_spec(category: str, **overrides) -> SulSpec:
    cat = category.upper()
    tolerate_optional = Deviation(HANDSHAKE, _ids(m.IGNORE, m.DEBUG), "tolerate")
    if cat == "C1":
        spec = SulSpec("c1", (Deviation(frozenset({PRE_KEXINIT}), _ids(m.IGNORE, m.DEBUG), "tolerate"),),
                       "C1", retroactive=False)
    elif cat == "C2":
        spec = SulSpec("c2", (
            Deviation(HANDSHAKE, _ids(*OPTIONAL), "tolerate", frozenset({"DHGEX"})),
            Deviation(HANDSHAKE, _unknown(), "unimplemented", frozenset({"DHGEX"})),
        ), "C2")
    elif cat == "C3":
        spec = SulSpec("c3", (tolerate_optional, Deviation(HANDSHAKE, _unknown(), "unimplemented")), "C3")
    elif cat == "C4":
        late = frozenset({AWAIT_NEWKEYS})
        spec = SulSpec("c4", (
            Deviation(late, lambda i, f: i < 50 and i in OPTIONAL, "tolerate"),
            Deviation(late, _unknown(50), "unimplemented"),
        ), "C4")
    elif cat == "TAINT":
        spec = SulSpec("taint", (Deviation(HANDSHAKE, _transport_layer, "taint"),), "TAINT")
    elif cat == "ERLANG":
        spec = SulSpec("erlang", (tolerate_optional, Deviation(HANDSHAKE, _connection_protocol, "channel")),
                       "ERLANG", software="Erlang/5.2.8")
    elif cat == "TECTIA":
        spec = SulSpec("tectia", (
            Deviation(frozenset({PRE_KEXINIT}), _ids(m.IGNORE, m.DEBUG), "tolerate"),
            tolerate_optional,
            Deviation(HANDSHAKE, _ids(m.USERAUTH_REQUEST), "buffer-userauth"),
            Deviation(frozenset({SECURE}), _ids(m.USERAUTH_REQUEST), "auth-early"),
        ), "TECTIA", retroactive=False, software="6.6.5.353 SSH Tectia Server",
            attacker_credential=("attacker", "attacker-password"))
    elif cat == "FLAKY":
        spec = replace(compliant_spec(), name="flaky", flaw_category="FLAKY", flaky=0.05)
    else:
        raise ValueError(f"unknown violation category {category!r}")
    return replace(spec, **overrides) if overrides else spec


def retroactive_spec() -> SulSpec:
    """Strict server that allows optional messages before KEXINIT and
    terminates retroactively once strict KEX is negotiated."""
    return SulSpec("compliant-retro", (
        Deviation(frozenset({PRE_KEXINIT}), _ids(m.IGNORE, m.DEBUG), "tolerate"),))


BUILTIN_SPECS = {
    "compliant": compliant_spec,
    "compliant-retro": retroactive_spec,
    **{c.lower(): (lambda c=c: make_violation_spec(c)) for c in CATEGORIES},
}


def builtin_spec(name: str, **overrides) -> SulSpec:
    try:
        spec = BUILTIN_SPECS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown SUL {name!r}; choose from {', '.join(BUILTIN_SPECS)}") from None
    return replace(spec, **overrides) if overrides else spec


# -- server sessions -----------------------------------------------------------

@dataclass
class UserauthRequest:
    user: str
    service: str
    method: str
    password: Optional[str] = None

    @classmethod
    def parse(cls, payload: bytes) -> "UserauthRequest":
        r = PayloadReader(payload, 1)
        user, service, method = r.text(), r.text(), r.text()
        password = None
        if method == "password":
            r.boolean()
            password = r.text()
        return cls(user, service, method, password)


@dataclass
class _Channel:
    open: bool = False
    peer_id: int = 0
    exec_command: Optional[bytes] = None


class ServerSession:
    def __init__(self, server: "SulServer", drop_at: Optional[int] = None):
        self.server = server
        self.spec = server.spec
        self.outbox = bytearray()
        self.closed = False
        self.inbuf = bytearray()
        self.client_banner: Optional[str] = None
        self.phase = PRE_KEXINIT
        self.seq = SequenceCounters()
        self.send_cipher = CipherState()
        self.recv_cipher = CipherState()
        self.pending_send: Optional[CipherState] = None
        self.pending_recv: Optional[CipherState] = None
        self.transcript = kx.KexTranscript(server_banner=self.spec.banner().line())
        self.flow: Optional[kx.KexFlowType] = None
        self.strict = False
        self.gex_group_sent = False
        self.pre_kexinit_packets = 0
        self.tainted = False
        self.channel = _Channel()
        self.pending_auth: Optional[UserauthRequest] = None
        self.packets = 0
        self.drop_at = drop_at
        self.trace: list[tuple[str, str]] = []
        self.outbox += self.spec.banner().to_bytes()

    # -- plumbing
    def close(self) -> None:
        self.closed = True

    def send(self, payload: bytes) -> None:
        self.outbox += encode_packet(payload, self.send_cipher, self.seq)
        self.trace.append(("out", m.message_name(payload[0], self.flow)))

    def feed(self, data: bytes) -> None:
        if self.closed:
            return
        self.inbuf += data
        try:
            if self.client_banner is None:
                while self.client_banner is None:
                    line = take_line(self.inbuf)
                    if line is None:
                        return
                    if line.startswith(b"SSH-"):
                        self.client_banner = line.decode("ascii", "replace")
                        self.transcript.client_banner = self.client_banner
            while not self.closed:
                payload = try_decode_packet(self.inbuf, self.recv_cipher, self.seq)
                if payload is None:
                    return
                self.packets += 1
                if self.drop_at is not None and self.packets >= self.drop_at:
                    log.debug("flaky drop at packet %d", self.packets)
                    self.close()
                    return
                self.trace.append(("in", m.message_name(payload[0], self.flow)))
                self.handle(payload)
        except SSHError as exc:
            log.debug("session error: %s", exc)
            self.close()

    # -- dispatch
    def handle(self, payload: bytes) -> None:
        msg = payload[0]
        phase = self.phase
        if phase == PRE_KEXINIT:
            if msg == m.KEXINIT:
                self.on_kexinit(payload)
            else:
                self.pre_kexinit_packets += 1
                self.deviate(payload)
        elif phase == KEX:
            self.on_kex_message(payload)
        elif phase == AWAIT_NEWKEYS:
            if msg == m.NEWKEYS:
                self.on_client_newkeys()
            else:
                self.deviate(payload)
        elif phase == SECURE:
            if msg == m.SERVICE_REQUEST:
                self.on_service_request(payload, AUTH)
            elif msg in OPTIONAL:
                pass
            else:
                self.deviate(payload)
        elif phase == AUTH:
            if msg == m.USERAUTH_REQUEST:
                self.authenticate(UserauthRequest.parse(payload))
            elif msg in OPTIONAL:
                pass
            else:
                self.deviate(payload)
        elif phase == AUTHENTICATED:
            if msg == m.SERVICE_REQUEST:
                self.on_service_request(payload, AUTHENTICATED)
            elif msg == m.USERAUTH_REQUEST:
                self.send(bytes([m.USERAUTH_SUCCESS]))
            elif msg in OPTIONAL:
                pass
            else:
                self.close()

    def deviate(self, payload: bytes) -> None:
        msg = payload[0]
        for rule in self.spec.deviations:
            if rule.matches(self.phase, msg, self.flow):
                getattr(self, "act_" + rule.action.replace("-", "_"))(payload)
                return
        self.close()

    # -- deviation actions
    def act_tolerate(self, payload: bytes) -> None:
        pass

    def act_unimplemented(self, payload: bytes) -> None:
        self.send(bytes([m.UNIMPLEMENTED]) + uint32(self.seq.receive - 1))

    def act_taint(self, payload: bytes) -> None:
        self.tainted = True

    def act_channel(self, payload: bytes) -> None:
        msg = payload[0]
        ch = self.channel
        if msg == m.CHANNEL_OPEN:
            if not ch.open:
                r = PayloadReader(payload, 1)
                r.text()
                ch.open, ch.peer_id = True, r.uint32()
        elif msg == m.CHANNEL_CLOSE:
            if not ch.open:
                self.close()
            else:
                self.channel = _Channel()
        elif msg == m.CHANNEL_REQUEST:
            if not ch.open:
                self.close()
                return
            r = PayloadReader(payload, 1)
            r.uint32()
            if r.text() == "exec":
                r.boolean()
                ch.exec_command = r.string()

    def act_buffer_userauth(self, payload: bytes) -> None:
        if self.pending_auth is None:
            self.pending_auth = UserauthRequest.parse(payload)

    def act_auth_early(self, payload: bytes) -> None:
        self.authenticate(UserauthRequest.parse(payload))

    def act_gex_repeat(self, payload: bytes) -> None:
        if self.flow is not None and self.flow.variant == "DHGEX" and payload[0] == kx.MSG_KEX_DH_GEX_REQUEST:
            self.on_gex_request(payload)
        else:
            self.close()

    # -- handshake
    def server_kexinit(self) -> KexInit:
        kex = list(self.spec.algorithms) + ([STRICT_KEX_SERVER] if self.spec.strict else [])
        return KexInit(kex=kex)

    def on_kexinit(self, payload: bytes) -> None:
        client = KexInit.parse(payload)
        server = self.server_kexinit()
        if self.spec.retroactive and self.pre_kexinit_packets and m.STRICT_KEX_CLIENT in client.kex \
                and self.spec.strict:
            self.close()
            return
        server_payload = server.to_payload()
        self.send(server_payload)
        negotiated = m.negotiate(client, server)
        if negotiated is None:
            self.close()
            return
        self.flow = negotiated.flow
        self.strict = negotiated.strict
        self.negotiated = negotiated
        self.transcript.reset_exchange()
        self.transcript.client_kexinit = payload
        self.transcript.server_kexinit = server_payload
        self.gex_group_sent = False
        self.phase = KEX

    def on_kex_message(self, payload: bytes) -> None:
        msg = payload[0]
        variant = self.flow.variant
        if variant == "DHGEX":
            if msg == kx.MSG_KEX_DH_GEX_REQUEST and not self.gex_group_sent:
                self.on_gex_request(payload)
                return
            if msg == kx.MSG_KEX_DH_GEX_INIT and self.gex_group_sent:
                self.on_kex_init(payload)
                return
        elif msg == kx.MSG_KEX_ECDH_INIT:
            self.on_kex_init(payload)
            return
        self.deviate(payload)

    def on_gex_request(self, payload: bytes) -> None:
        kx.parse_gex_request(payload, self.transcript)
        if not self.transcript.gex_min <= 2048 <= self.transcript.gex_max:
            self.close()
            return
        self.transcript.p, self.transcript.g = kx.GROUP14_P, kx.GROUP14_G
        self.send(kx.gex_group_payload())
        self.gex_group_sent = True

    def on_kex_init(self, payload: bytes) -> None:
        t = self.transcript
        reply = kx.server_kex_reply(self.flow, payload, t, self.server.host_key)
        keys = kx.derive_keys(t.shared_secret, t.exchange_hash, t.session_id, self.flow.hash)
        self.pending_recv, self.pending_send = keys.cipher_states(self.negotiated.encryption,
                                                                  self.negotiated.mac)
        self.send(reply)
        self.send(bytes([m.NEWKEYS]))
        self.send_cipher = self.pending_send
        if self.strict:
            reset_direction(self.seq, "send")
        self.phase = AWAIT_NEWKEYS

    def on_client_newkeys(self) -> None:
        self.recv_cipher = self.pending_recv
        if self.strict:
            reset_direction(self.seq, "receive")
        if self.tainted and self.strict:
            self.close()
            return
        self.phase = SECURE
        if self.channel.open:
            self.flush_channel()
        if self.pending_auth is not None:
            request, self.pending_auth = self.pending_auth, None
            self.authenticate(request)

    def flush_channel(self) -> None:
        ch, self.channel = self.channel, _Channel()
        ours = 0
        self.send(bytes([m.CHANNEL_OPEN_CONFIRMATION]) + uint32(ch.peer_id) + uint32(ours)
                  + uint32(2 ** 21) + uint32(32768))
        if ch.exec_command is None:
            return
        self.send(bytes([m.CHANNEL_SUCCESS]) + uint32(ch.peer_id))
        self.send(bytes([m.CHANNEL_DATA]) + uint32(ch.peer_id) + string(ERLANG_OUTPUT))
        self.send(bytes([m.CHANNEL_REQUEST]) + uint32(ch.peer_id) + string("exit-status")
                  + boolean(False) + uint32(0))
        self.send(bytes([m.CHANNEL_EOF]) + uint32(ch.peer_id))
        self.send(bytes([m.CHANNEL_CLOSE]) + uint32(ch.peer_id))

    # -- post handshake
    def on_service_request(self, payload: bytes, next_phase: str) -> None:
        service = PayloadReader(payload, 1).text()
        if service != "ssh-userauth":
            self.close()
            return
        self.send(bytes([m.SERVICE_ACCEPT]) + string(service))
        self.phase = next_phase

    def authenticate(self, request: UserauthRequest) -> None:
        cred = self.spec.attacker_credential
        if cred is not None and request.method == "password" and (request.user, request.password) == cred:
            self.send(bytes([m.USERAUTH_SUCCESS]))
            self.phase = AUTHENTICATED
        else:
            self.send(bytes([m.USERAUTH_FAILURE]) + namelist(["publickey", "password"]) + boolean(False))


class SulServer:
    """A simulated server: one host key, one seeded RNG, many sessions."""

    def __init__(self, spec: SulSpec, host_key: Optional[kx.HostKey] = None):
        self.spec = spec
        self.host_key = host_key or kx.HostKey()
        self.rng = random.Random(spec.seed)
        self.connections = 0
        self._lock = threading.Lock()

    def open_session(self) -> ServerSession:
        with self._lock:
            self.connections += 1
            drop_at = None
            if self.spec.flaky and self.rng.random() < self.spec.flaky:
                drop_at = self.rng.randint(1, 6)
        return ServerSession(self, drop_at)


class InProcessEndpoint:
    def __init__(self, server: SulServer):
        self.server = server
        self.connections = 0

    def connect(self):
        from .transport import InProcessTransport
        self.connections += 1
        return InProcessTransport(self.server.open_session())

    def __str__(self):
        return f"inprocess:{self.server.spec.name}"


def in_process(spec_or_name, **overrides) -> InProcessEndpoint:
    spec = builtin_spec(spec_or_name, **overrides) if isinstance(spec_or_name, str) else spec_or_name
    return InProcessEndpoint(SulServer(spec))


# -- TCP serving ---------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        session = self.server.sul.open_session()
        sock = self.request
        try:
            sock.sendall(bytes(session.outbox))
            session.outbox.clear()
            while not session.closed:
                data = sock.recv(65536)
                if not data:
                    break
                session.feed(data)
                if session.outbox:
                    sock.sendall(bytes(session.outbox))
                    session.outbox.clear()
        except OSError:
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


@dataclass
class ServerHandle:
    server: _TCPServer
    thread: threading.Thread
    sul: SulServer
    address: tuple = field(default=())

    @property
    def port(self) -> int:
        return self.address[1]

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def serve(spec: SulSpec, host: str = "127.0.0.1", port: int = 0) -> ServerHandle:
    try:
        srv = _TCPServer((host, port), _Handler)
    except OSError as exc:
        raise RuntimeError(f"cannot bind {host}:{port}: {exc}") from exc
    srv.sul = SulServer(spec)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    return ServerHandle(srv, thread, srv.sul, srv.server_address)
