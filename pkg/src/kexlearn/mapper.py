"""Translate abstract symbols into SSH messages and server responses into output letters.

The mapper keeps a full client-side session context. Every message it sends
or receives updates that context as if the peer handled it normally, so any
symbol can be executed at any position of any word.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from cryptography.hazmat.primitives.asymmetric import ed25519
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import kex as kx
from . import messages as m
from .alphabet import Alphabet, Symbol, UNDEFINED
from .wire import (CLIENT_BANNER, Banner, CipherState, ConnectionClosed, FramingError,
                   IntegrityError, SSHError, SequenceCounters, boolean,
                   encode_packet, exchange_banner, namelist, reset_direction, string,
                   try_decode_packet, uint32)

log = logging.getLogger(__name__)

NO_RESPONSE = "NO_RESPONSE"
CONNECTION_CLOSED = "CONNECTION_CLOSED"
DECRYPT_FAILED = "DECRYPT_FAILED"
SEPARATOR = "|"
SERVICE = "ssh-userauth"
CONNECTION_SERVICE = "ssh-connection"


def tokens(letter: str) -> list[str]:
    return letter.split(SEPARATOR)


def is_closing(letter: str) -> bool:
    """True when the letter ends the connection for the rest of the trace."""
    last = letter.rsplit(SEPARATOR, 1)[-1]
    return last in (CONNECTION_CLOSED, DECRYPT_FAILED)


def close_outputs(outputs: Sequence[str], length: int) -> tuple[str, ...]:
    """Pad an output word with CONNECTION_CLOSED after its first closing letter."""
    out = []
    for letter in outputs:
        out.append(letter)
        if is_closing(letter):
            break
    out.extend([CONNECTION_CLOSED] * (length - len(out)))
    return tuple(out)


@dataclass
class Credentials:
    user: str = "kexlearn-nonexistent"
    password: str = "wrong-password"


@dataclass
class SessionContext:
    flow: kx.KexFlowType
    transcript: kx.KexTranscript = field(default_factory=kx.KexTranscript)
    seq: SequenceCounters = field(default_factory=SequenceCounters)
    send_cipher: CipherState = field(default_factory=CipherState)
    recv_cipher: CipherState = field(default_factory=CipherState)
    pending_c2s: Optional[CipherState] = None
    pending_s2c: Optional[CipherState] = None
    negotiated: Optional[m.Negotiated] = None
    strict_kex_negotiated: bool = False
    service_requested: bool = False
    newkeys_sent: bool = False
    closed: bool = False
    trace: list = field(default_factory=list)

    def promote(self, direction: str) -> None:
        """NEWKEYS handling: install the pending cipher and, under strict KEX,
        reset that direction's sequence number."""
        if direction == "send":
            self.send_cipher, self.pending_c2s = self.pending_c2s or CipherState(), None
            self.newkeys_sent = True
        else:
            self.recv_cipher, self.pending_s2c = self.pending_s2c or CipherState(), None
        if self.strict_kex_negotiated:
            reset_direction(self.seq, direction)

    def renegotiate(self) -> None:
        t = self.transcript
        if not (t.client_kexinit and t.server_kexinit):
            return
        try:
            self.negotiated = m.negotiate(m.KexInit.parse(t.client_kexinit),
                                          m.KexInit.parse(t.server_kexinit))
        except SSHError:
            self.negotiated = None
        if self.negotiated is not None:
            self.strict_kex_negotiated = self.negotiated.strict

    def derive(self) -> None:
        t = self.transcript
        n = self.negotiated
        enc, mac = (n.encryption, n.mac) if n else ("aes128-ctr", "hmac-sha2-256")
        keys = kx.derive_keys(t.shared_secret, t.exchange_hash, t.session_id, self.flow.hash)
        self.pending_c2s, self.pending_s2c = keys.cipher_states(enc, mac)


class Mapper:
    def __init__(self, endpoint, alphabet: Alphabet, credentials: Optional[Credentials] = None,
                 rekey_cutoff: bool = False, banner: Banner = CLIENT_BANNER):
        self.endpoint = endpoint
        self.alphabet = alphabet
        self.flow = alphabet.flow
        self.credentials = credentials or Credentials()
        self.rekey_cutoff = rekey_cutoff
        self.banner = banner
        self.queries = 0
        # signs forged server replies and the publickey auth variant; never authorized anywhere
        self.forge_key = kx.HostKey()
        self.client_key = ed25519.Ed25519PrivateKey.generate()

    # -- queries
    def run_query(self, word: Sequence[Symbol]) -> tuple[str, ...]:
        return self.run_trace(word)[0]

    def run_trace(self, word: Sequence[Symbol],
                  credentials: Optional[Credentials] = None) -> tuple[tuple[str, ...], list]:
        """Run one word on a fresh connection; returns outputs and the message trace."""
        self.queries += 1
        word = list(word)
        if not word:
            return (), []
        ctx = SessionContext(self.flow)
        transport = self.endpoint.connect()
        saved = self.credentials
        if credentials is not None:
            self.credentials = credentials
        try:
            try:
                server = exchange_banner(transport, self.banner)
            except SSHError as exc:
                log.debug("banner exchange failed: %s", exc)
                return (CONNECTION_CLOSED,) * len(word), [("in", CONNECTION_CLOSED)]
            ctx.transcript.client_banner = self.banner.line()
            ctx.transcript.server_banner = server.line()
            outputs = []
            for symbol in word:
                letter = self.execute_symbol(ctx, transport, symbol)
                outputs.append(letter)
            return tuple(outputs), ctx.trace
        finally:
            self.credentials = saved
            transport.close()

    def execute_symbol(self, ctx: SessionContext, transport, symbol: Symbol) -> str:
        if ctx.closed:
            return CONNECTION_CLOSED
        if (self.rekey_cutoff and symbol.message_id == m.KEXINIT and ctx.newkeys_sent):
            ctx.closed = True
            transport.close()
            return CONNECTION_CLOSED
        payload = self.build(symbol, ctx)
        ctx.trace.append(("out", symbol.name))
        try:
            transport.send(encode_packet(payload, ctx.send_cipher, ctx.seq))
        except ConnectionClosed:
            ctx.closed = True
            return CONNECTION_CLOSED
        self.after_send(ctx, symbol, payload)
        return self.collect(ctx, transport)

    # -- building
    def build(self, symbol: Symbol, ctx: SessionContext) -> bytes:
        msg = symbol.message_id
        head = bytes([msg])
        if symbol.msg_class == UNDEFINED:
            return head
        if msg == m.KEXINIT:
            return m.default_kexinit_payload(self.flow)
        if msg == m.USERAUTH_REQUEST:
            return self.build_userauth_request(symbol.variant or "none", ctx)
        if msg == m.CHANNEL_REQUEST:
            return head + _channel_request(symbol.variant or "exec")
        if 30 <= msg <= 49:
            return self.build_kex(msg, ctx) or head
        return head + STATIC_BODIES.get(msg, b"")

    def build_kex(self, msg: int, ctx: SessionContext) -> Optional[bytes]:
        t = ctx.transcript
        variant = self.flow.variant
        if variant == "DHGEX":
            if msg == kx.MSG_KEX_DH_GEX_REQUEST:
                return kx.gex_request_payload(t)
            if msg == kx.MSG_KEX_DH_GEX_REQUEST_OLD:
                return bytes([msg]) + uint32(kx.GEX_REQUEST_BOUNDS[1])
            if msg == kx.MSG_KEX_DH_GEX_GROUP:
                return kx.gex_group_payload(*t.group())
            if msg == kx.MSG_KEX_DH_GEX_INIT:
                return kx.generate_kex_init_message(self.flow, t)
            if msg == kx.MSG_KEX_DH_GEX_REPLY:
                return kx.forge_kex_reply(self.flow, t, self.forge_key)
            return None
        if msg == kx.MSG_KEX_ECDH_INIT:
            return kx.generate_kex_init_message(self.flow, t)
        if msg == kx.MSG_KEX_ECDH_REPLY:
            return kx.forge_kex_reply(self.flow, t, self.forge_key)
        return None

    def build_userauth_request(self, variant: str, ctx: SessionContext) -> bytes:
        user = self.credentials.user
        head = (bytes([m.USERAUTH_REQUEST]) + string(user) + string(CONNECTION_SERVICE)
                + string(variant))
        if variant == "none":
            return head
        if variant == "password":
            return head + boolean(False) + string(self.credentials.password)
        if variant == "publickey":
            raw = self.client_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
            blob = string(kx.HOST_KEY_ALGORITHM) + string(raw)
            body = boolean(True) + string(kx.HOST_KEY_ALGORITHM) + string(blob)
            signed = string(ctx.transcript.session_id) + head + body
            signature = string(kx.HOST_KEY_ALGORITHM) + string(self.client_key.sign(signed))
            return head + body + string(signature)
        raise ValueError(f"unknown USERAUTH_REQUEST variant {variant!r}")

    def after_send(self, ctx: SessionContext, symbol: Symbol, payload: bytes) -> None:
        msg = symbol.message_id
        t = ctx.transcript
        if msg == m.KEXINIT:
            t.reset_exchange()
            t.client_kexinit = payload
            ctx.renegotiate()
        elif msg == m.NEWKEYS:
            ctx.promote("send")
        elif msg == m.SERVICE_REQUEST:
            ctx.service_requested = True

    # -- receiving
    def collect(self, ctx: SessionContext, transport) -> str:
        names: list[str] = []
        received = False
        while True:
            while True:
                try:
                    payload = try_decode_packet(transport.buffer, ctx.recv_cipher, ctx.seq)
                except (IntegrityError, FramingError) as exc:
                    log.debug("undecryptable packet: %s", exc)
                    ctx.closed = True
                    transport.close()
                    ctx.trace.append(("in", DECRYPT_FAILED))
                    return SEPARATOR.join(names + [DECRYPT_FAILED])
                if payload is None:
                    break
                name = m.message_name(payload[0], self.flow)
                names.append(name)
                ctx.trace.append(("in", name))
                self.after_receive(ctx, payload)
            if transport.eof:
                break
            if not transport.fill(first=not received):
                break
            received = True
        if transport.eof:
            ctx.closed = True
            ctx.trace.append(("in", CONNECTION_CLOSED))
            return SEPARATOR.join(names + [CONNECTION_CLOSED])
        return SEPARATOR.join(names) if names else NO_RESPONSE

    def after_receive(self, ctx: SessionContext, payload: bytes) -> None:
        msg = payload[0]
        t = ctx.transcript
        variant = self.flow.variant
        try:
            if msg == m.KEXINIT:
                t.server_kexinit = payload
                ctx.renegotiate()
            elif msg == m.NEWKEYS:
                ctx.promote("receive")
            elif variant == "DHGEX" and msg == kx.MSG_KEX_DH_GEX_GROUP:
                kx.handle_gex_group(payload, t)
            elif (variant == "DHGEX" and msg == kx.MSG_KEX_DH_GEX_REPLY) or \
                    (variant != "DHGEX" and msg == kx.MSG_KEX_ECDH_REPLY):
                kx.process_kex_reply(self.flow, payload, t)
                ctx.derive()
        except SSHError as exc:
            # keys stay underived; a later mismatch shows up as DECRYPT_FAILED
            log.debug("could not process %s: %s", m.message_name(msg, self.flow), exc)


def _channel_request(variant: str) -> bytes:
    body = uint32(0) + string(variant) + boolean(True)
    if variant == "exec":
        return body + string("id")
    if variant == "pty-req":
        return body + string("xterm") + uint32(80) + uint32(24) + uint32(0) + uint32(0) + string(b"")
    return body


_WINDOW = uint32(2 ** 21) + uint32(32768)

STATIC_BODIES = {
    m.DISCONNECT: uint32(11) + string("bye") + string(""),
    m.IGNORE: string(""),
    m.UNIMPLEMENTED: uint32(0),
    m.DEBUG: boolean(False) + string("") + string(""),
    m.SERVICE_REQUEST: string(SERVICE),
    m.SERVICE_ACCEPT: string(SERVICE),
    m.EXT_INFO: uint32(0),
    m.USERAUTH_FAILURE: namelist(["password"]) + boolean(False),
    m.USERAUTH_BANNER: string("") + string(""),
    m.USERAUTH_INFO_REQUEST: string("") + string("") + string("") + uint32(0),
    m.USERAUTH_INFO_RESPONSE: uint32(0),
    m.GLOBAL_REQUEST: string("keepalive@openssh.com") + boolean(True),
    m.CHANNEL_OPEN: string("session") + uint32(0) + _WINDOW,
    m.CHANNEL_OPEN_CONFIRMATION: uint32(0) + uint32(0) + _WINDOW,
    m.CHANNEL_OPEN_FAILURE: uint32(0) + uint32(2) + string("") + string(""),
    m.CHANNEL_WINDOW_ADJUST: uint32(0) + uint32(1024),
    m.CHANNEL_DATA: uint32(0) + string("data"),
    m.CHANNEL_EXTENDED_DATA: uint32(0) + uint32(1) + string("data"),
    m.CHANNEL_EOF: uint32(0),
    m.CHANNEL_CLOSE: uint32(0),
    m.CHANNEL_SUCCESS: uint32(0),
    m.CHANNEL_FAILURE: uint32(0),
}
