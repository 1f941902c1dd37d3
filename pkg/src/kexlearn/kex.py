"""Key exchange cryptography for the three supported flows.

curve25519-sha256 (RFC 8731), diffie-hellman-group14-sha256 (RFC 8268) and
diffie-hellman-group-exchange-sha256 (RFC 4419), with ed25519 host keys and
RFC 4253 key derivation. Both client and server roles are provided: the
simulated servers use the server half, and the mapper uses it to forge
server-role messages.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import dh, ed25519, x25519
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .wire import CipherState, PayloadReader, ProtocolError, SSHError, mpint, string, uint32

MSG_KEXDH_INIT = 30
MSG_KEXDH_REPLY = 31
MSG_KEX_ECDH_INIT = 30
MSG_KEX_ECDH_REPLY = 31
MSG_KEX_DH_GEX_REQUEST_OLD = 30
MSG_KEX_DH_GEX_GROUP = 31
MSG_KEX_DH_GEX_INIT = 32
MSG_KEX_DH_GEX_REPLY = 33
MSG_KEX_DH_GEX_REQUEST = 34

# RFC 3526 2048-bit MODP group
GROUP14_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)
GROUP14_G = 2
MIN_GEX_BITS = 1024
GEX_REQUEST_BOUNDS = (2048, 2048, 8192)

HOST_KEY_ALGORITHM = "ssh-ed25519"


class CryptoError(SSHError):
    pass


class ParameterError(CryptoError):
    pass


class UnsupportedFlow(SSHError):
    pass


@dataclass(frozen=True)
class KexFlowType:
    variant: str
    algorithm_name: str

    @property
    def supported(self) -> bool:
        return self.variant in ("ECDH", "DH", "DHGEX")

    def activate(self) -> "KexFlowType":
        if not self.supported:
            raise UnsupportedFlow(f"{self.variant} key exchange is not implemented")
        return self

    @property
    def hash(self):
        return hashlib.sha512 if self.algorithm_name.endswith("sha512") else hashlib.sha256

    @property
    def key(self) -> str:
        return self.variant.lower()


ECDH = KexFlowType("ECDH", "curve25519-sha256")
DH = KexFlowType("DH", "diffie-hellman-group14-sha256")
DHGEX = KexFlowType("DHGEX", "diffie-hellman-group-exchange-sha256")
RSA = KexFlowType("RSA", "rsa2048-sha256")
PQ_HYBRID = KexFlowType("PQ_HYBRID", "sntrup761x25519-sha512@openssh.com")

FLOWS = {f.key: f for f in (ECDH, DH, DHGEX, RSA, PQ_HYBRID)}
FLOWS_BY_ALGORITHM = {f.algorithm_name: f for f in FLOWS.values()}


def flow_by_name(name: str) -> KexFlowType:
    try:
        return FLOWS[name.lower().replace("-", "_")]
    except KeyError:
        raise UnsupportedFlow(f"unknown key exchange flow {name!r}") from None


# -- host keys ---------------------------------------------------------------

class HostKey:
    def __init__(self, private: Optional[ed25519.Ed25519PrivateKey] = None):
        self.private = private or ed25519.Ed25519PrivateKey.generate()
        raw = self.private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.blob = string(HOST_KEY_ALGORITHM) + string(raw)

    def sign(self, data: bytes) -> bytes:
        return string(HOST_KEY_ALGORITHM) + string(self.private.sign(data))


def verify_host_signature(key_blob: bytes, signature_blob: bytes, data: bytes) -> None:
    key = PayloadReader(key_blob)
    sig = PayloadReader(signature_blob)
    if key.text() != HOST_KEY_ALGORITHM or sig.text() != HOST_KEY_ALGORITHM:
        raise CryptoError("unsupported host key algorithm")
    try:
        public = ed25519.Ed25519PublicKey.from_public_bytes(key.string())
        public.verify(sig.string(), data)
    except (InvalidSignature, ValueError) as exc:
        raise CryptoError("host key signature invalid") from exc


# -- transcript ------------------------------------------------------------

@dataclass
class KexTranscript:
    client_banner: str = ""
    server_banner: str = ""
    client_kexinit: bytes = b""
    server_kexinit: bytes = b""
    host_key_blob: bytes = b""
    q_c: bytes = b""
    q_s: bytes = b""
    e: int = 0
    f: int = 0
    gex_min: int = GEX_REQUEST_BOUNDS[0]
    gex_n: int = GEX_REQUEST_BOUNDS[1]
    gex_max: int = GEX_REQUEST_BOUNDS[2]
    p: int = 0
    g: int = 0
    shared_secret: Optional[int] = None
    exchange_hash: bytes = b""
    session_id: bytes = b""
    keys_available: bool = False
    # ephemeral private keys, never hashed
    ecdh_private: Optional[x25519.X25519PrivateKey] = field(default=None, repr=False)
    dh_private: Optional[dh.DHPrivateKey] = field(default=None, repr=False)

    def group(self) -> tuple[int, int]:
        """Current DH group, falling back to group14."""
        if self.p:
            return self.p, self.g
        return GROUP14_P, GROUP14_G

    def reset_exchange(self) -> None:
        """Forget per-exchange values when a new KEXINIT starts a key exchange."""
        self.q_c = self.q_s = b""
        self.e = self.f = 0
        self.p = self.g = 0
        self.shared_secret = None
        self.exchange_hash = b""
        self.keys_available = False
        self.ecdh_private = self.dh_private = None


def exchange_hash(flow: KexFlowType, t: KexTranscript) -> bytes:
    head = (string(t.client_banner) + string(t.server_banner)
            + string(t.client_kexinit) + string(t.server_kexinit) + string(t.host_key_blob))
    if flow.variant == "ECDH":
        body = string(t.q_c) + string(t.q_s)
    elif flow.variant == "DH":
        body = mpint(t.e) + mpint(t.f)
    elif flow.variant == "DHGEX":
        body = (uint32(t.gex_min) + uint32(t.gex_n) + uint32(t.gex_max)
                + mpint(t.p) + mpint(t.g) + mpint(t.e) + mpint(t.f))
    else:
        raise UnsupportedFlow(flow.variant)
    return flow.hash(head + body + mpint(t.shared_secret)).digest()


# -- DH helpers ------------------------------------------------------------

@lru_cache(maxsize=16)
def _dh_parameters(p: int, g: int) -> dh.DHParameters:
    return dh.DHParameterNumbers(p, g).parameters()


def _dh_keypair(p: int, g: int) -> tuple[dh.DHPrivateKey, int]:
    private = _dh_parameters(p, g).generate_private_key()
    return private, private.public_key().public_numbers().y


def _dh_shared(private: dh.DHPrivateKey, peer: int, p: int, g: int) -> int:
    if not 1 < peer < p - 1:
        raise CryptoError("DH public value out of range")
    try:
        public = dh.DHPublicNumbers(peer, dh.DHParameterNumbers(p, g)).public_key()
        return int.from_bytes(private.exchange(public), "big")
    except ValueError as exc:
        raise CryptoError(str(exc)) from exc


def _x25519_keypair() -> tuple[x25519.X25519PrivateKey, bytes]:
    private = x25519.X25519PrivateKey.generate()
    return private, private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def _x25519_shared(private: x25519.X25519PrivateKey, peer: bytes) -> int:
    if len(peer) != 32:
        raise ProtocolError("x25519 public key must be 32 bytes")
    try:
        secret = private.exchange(x25519.X25519PublicKey.from_public_bytes(peer))
    except ValueError as exc:  # OpenSSL rejects low-order points itself
        raise CryptoError("x25519 shared secret is all zero") from exc
    if secret == bytes(32):
        raise CryptoError("x25519 shared secret is all zero")
    return int.from_bytes(secret, "big")


# -- client role -------------------------------------------------------------

def gex_request_payload(ctx: KexTranscript, bounds: tuple[int, int, int] = GEX_REQUEST_BOUNDS) -> bytes:
    ctx.gex_min, ctx.gex_n, ctx.gex_max = bounds
    return bytes([MSG_KEX_DH_GEX_REQUEST]) + b"".join(uint32(v) for v in bounds)


def generate_kex_init_message(flow: KexFlowType, ctx: KexTranscript) -> bytes:
    """Client key exchange initiation, built from defaults where context is missing."""
    flow.activate()
    if flow.variant == "ECDH":
        ctx.ecdh_private, ctx.q_c = _x25519_keypair()
        return bytes([MSG_KEX_ECDH_INIT]) + string(ctx.q_c)
    p, g = ctx.group() if flow.variant == "DHGEX" else (GROUP14_P, GROUP14_G)
    ctx.dh_private, ctx.e = _dh_keypair(p, g)
    msg_id = MSG_KEX_DH_GEX_INIT if flow.variant == "DHGEX" else MSG_KEXDH_INIT
    return bytes([msg_id]) + mpint(ctx.e)


def handle_gex_group(payload: bytes, ctx: KexTranscript) -> tuple[int, int]:
    r = PayloadReader(payload, 1)
    p, g = r.mpint(), r.mpint()
    if p.bit_length() < MIN_GEX_BITS:
        raise ParameterError(f"group modulus of {p.bit_length()} bits is too small")
    if not 1 < g < p - 1:
        raise ParameterError("bad group generator")
    ctx.p, ctx.g = p, g
    return p, g


def process_kex_reply(flow: KexFlowType, payload: bytes, ctx: KexTranscript) -> tuple[int, bytes]:
    """Client side: compute K and H from the server reply and verify its signature."""
    flow.activate()
    r = PayloadReader(payload, 1)
    ctx.host_key_blob = r.string()
    if flow.variant == "ECDH":
        ctx.q_s = r.string()
        if ctx.ecdh_private is None:
            ctx.ecdh_private, ctx.q_c = _x25519_keypair()
        k = _x25519_shared(ctx.ecdh_private, ctx.q_s)
    else:
        ctx.f = r.mpint()
        p, g = ctx.group() if flow.variant == "DHGEX" else (GROUP14_P, GROUP14_G)
        if flow.variant == "DHGEX" and not ctx.p:
            ctx.p, ctx.g = p, g
        if ctx.dh_private is None:
            ctx.dh_private, ctx.e = _dh_keypair(p, g)
        k = _dh_shared(ctx.dh_private, ctx.f, p, g)
    signature = r.string()
    ctx.shared_secret = k
    h = exchange_hash(flow, ctx)
    verify_host_signature(ctx.host_key_blob, signature, h)
    ctx.exchange_hash = h
    if not ctx.session_id:
        ctx.session_id = h
    ctx.keys_available = True
    return k, h


# -- server role -------------------------------------------------------------

def gex_group_payload(p: int = GROUP14_P, g: int = GROUP14_G) -> bytes:
    return bytes([MSG_KEX_DH_GEX_GROUP]) + mpint(p) + mpint(g)


def parse_gex_request(payload: bytes, ctx: KexTranscript) -> None:
    r = PayloadReader(payload, 1)
    ctx.gex_min, ctx.gex_n, ctx.gex_max = r.uint32(), r.uint32(), r.uint32()
    if not ctx.gex_min <= ctx.gex_n <= ctx.gex_max:
        raise ParameterError("inconsistent group size request")


def server_kex_reply(flow: KexFlowType, init_payload: bytes, ctx: KexTranscript,
                     host_key: HostKey) -> bytes:
    """Answer a client initiation; sets K, H and the session id on ``ctx``."""
    flow.activate()
    r = PayloadReader(init_payload, 1)
    ctx.host_key_blob = host_key.blob
    if flow.variant == "ECDH":
        ctx.q_c = r.string()
        private, ctx.q_s = _x25519_keypair()
        ctx.shared_secret = _x25519_shared(private, ctx.q_c)
        reply_id, value = MSG_KEX_ECDH_REPLY, string(ctx.q_s)
    else:
        ctx.e = r.mpint()
        p, g = ctx.group() if flow.variant == "DHGEX" else (GROUP14_P, GROUP14_G)
        private, ctx.f = _dh_keypair(p, g)
        ctx.shared_secret = _dh_shared(private, ctx.e, p, g)
        reply_id = MSG_KEX_DH_GEX_REPLY if flow.variant == "DHGEX" else MSG_KEXDH_REPLY
        value = mpint(ctx.f)
    h = exchange_hash(flow, ctx)
    ctx.exchange_hash = h
    if not ctx.session_id:
        ctx.session_id = h
    ctx.keys_available = True
    return bytes([reply_id]) + string(host_key.blob) + value + string(host_key.sign(h))


def forge_kex_reply(flow: KexFlowType, ctx: KexTranscript, host_key: HostKey) -> bytes:
    """A well-formed server reply built from the mapper's own transcript view.

    Works on a copy so the client-side exchange state is left untouched.
    """
    view = KexTranscript(**{k: getattr(ctx, k) for k in ctx.__dataclass_fields__})
    if flow.variant == "ECDH":
        if not view.q_c:
            _, view.q_c = _x25519_keypair()
        init = bytes([MSG_KEX_ECDH_INIT]) + string(view.q_c)
    else:
        if not view.e:
            _, view.e = _dh_keypair(*(view.group() if flow.variant == "DHGEX" else (GROUP14_P, GROUP14_G)))
        init = bytes([MSG_KEXDH_INIT]) + mpint(view.e)
    return server_kex_reply(flow, init, view, host_key)


# -- key derivation ----------------------------------------------------------

@dataclass(frozen=True)
class DerivedKeys:
    iv_c2s: bytes
    iv_s2c: bytes
    enc_c2s: bytes
    enc_s2c: bytes
    mac_c2s: bytes
    mac_s2c: bytes
    session_id: bytes

    def cipher_states(self, encryption: str = "aes128-ctr",
                      mac: str = "hmac-sha2-256") -> tuple[CipherState, CipherState]:
        """(client-to-server, server-to-client) cipher states."""
        if encryption == "none" and mac == "none":
            return CipherState(), CipherState()
        c2s = CipherState(encryption, mac, self.enc_c2s, self.iv_c2s, self.mac_c2s)
        s2c = CipherState(encryption, mac, self.enc_s2c, self.iv_s2c, self.mac_s2c)
        return c2s, s2c


def derive_keys(k: int, h: bytes, session_id: bytes, hash_fn=hashlib.sha256,
                enc_length: int = 16, iv_length: int = 16, mac_length: int = 32) -> DerivedKeys:
    secret = mpint(k)

    def expand(letter: bytes, length: int) -> bytes:
        out = hash_fn(secret + h + letter + session_id).digest()
        while len(out) < length:
            out += hash_fn(secret + h + out).digest()
        return out[:length]

    return DerivedKeys(
        iv_c2s=expand(b"A", iv_length), iv_s2c=expand(b"B", iv_length),
        enc_c2s=expand(b"C", enc_length), enc_s2c=expand(b"D", enc_length),
        mac_c2s=expand(b"E", mac_length), mac_s2c=expand(b"F", mac_length),
        session_id=session_id,
    )
