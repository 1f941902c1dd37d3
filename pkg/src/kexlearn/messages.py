"""SSH message numbers, names and the KEXINIT codec shared by client and servers."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

from .kex import FLOWS_BY_ALGORITHM, HOST_KEY_ALGORITHM, KexFlowType, UnsupportedFlow
from .wire import PayloadReader, boolean, namelist, uint32

DISCONNECT = 1
IGNORE = 2
UNIMPLEMENTED = 3
DEBUG = 4
SERVICE_REQUEST = 5
SERVICE_ACCEPT = 6
EXT_INFO = 7
NEWCOMPRESS = 8
KEXINIT = 20
NEWKEYS = 21
USERAUTH_REQUEST = 50
USERAUTH_FAILURE = 51
USERAUTH_SUCCESS = 52
USERAUTH_BANNER = 53
USERAUTH_INFO_REQUEST = 60
USERAUTH_INFO_RESPONSE = 61
GLOBAL_REQUEST = 80
REQUEST_SUCCESS = 81
REQUEST_FAILURE = 82
CHANNEL_OPEN = 90
CHANNEL_OPEN_CONFIRMATION = 91
CHANNEL_OPEN_FAILURE = 92
CHANNEL_WINDOW_ADJUST = 93
CHANNEL_DATA = 94
CHANNEL_EXTENDED_DATA = 95
CHANNEL_EOF = 96
CHANNEL_CLOSE = 97
CHANNEL_REQUEST = 98
CHANNEL_SUCCESS = 99
CHANNEL_FAILURE = 100

GENERIC_NAMES = {
    DISCONNECT: "DISCONNECT", IGNORE: "IGNORE", UNIMPLEMENTED: "UNIMPLEMENTED",
    DEBUG: "DEBUG", SERVICE_REQUEST: "SERVICE_REQUEST", SERVICE_ACCEPT: "SERVICE_ACCEPT",
    EXT_INFO: "EXT_INFO", NEWCOMPRESS: "NEWCOMPRESS", KEXINIT: "KEXINIT", NEWKEYS: "NEWKEYS",
    USERAUTH_REQUEST: "USERAUTH_REQUEST", USERAUTH_FAILURE: "USERAUTH_FAILURE",
    USERAUTH_SUCCESS: "USERAUTH_SUCCESS", USERAUTH_BANNER: "USERAUTH_BANNER",
    USERAUTH_INFO_REQUEST: "USERAUTH_INFO_REQUEST", USERAUTH_INFO_RESPONSE: "USERAUTH_INFO_RESPONSE",
    GLOBAL_REQUEST: "GLOBAL_REQUEST", REQUEST_SUCCESS: "REQUEST_SUCCESS",
    REQUEST_FAILURE: "REQUEST_FAILURE", CHANNEL_OPEN: "CHANNEL_OPEN",
    CHANNEL_OPEN_CONFIRMATION: "CHANNEL_OPEN_CONFIRMATION",
    CHANNEL_OPEN_FAILURE: "CHANNEL_OPEN_FAILURE", CHANNEL_WINDOW_ADJUST: "CHANNEL_WINDOW_ADJUST",
    CHANNEL_DATA: "CHANNEL_DATA", CHANNEL_EXTENDED_DATA: "CHANNEL_EXTENDED_DATA",
    CHANNEL_EOF: "CHANNEL_EOF", CHANNEL_CLOSE: "CHANNEL_CLOSE", CHANNEL_REQUEST: "CHANNEL_REQUEST",
    CHANNEL_SUCCESS: "CHANNEL_SUCCESS", CHANNEL_FAILURE: "CHANNEL_FAILURE",
}

FLOW_NAMES = {
    "ECDH": {30: "KEX_ECDH_INIT", 31: "KEX_ECDH_REPLY"},
    "DH": {30: "KEXDH_INIT", 31: "KEXDH_REPLY"},
    "DHGEX": {30: "KEX_DH_GEX_REQUEST_OLD", 31: "KEX_DH_GEX_GROUP", 32: "KEX_DH_GEX_INIT",
              33: "KEX_DH_GEX_REPLY", 34: "KEX_DH_GEX_REQUEST"},
}

# one id from each unassigned range of the IANA registry
UNDEFINED_IDS = (9, 14, 35, 45, 54, 62, 79, 83, 101, 192)

STRICT_KEX_CLIENT = "kex-strict-c-v00@openssh.com"
STRICT_KEX_SERVER = "kex-strict-s-v00@openssh.com"
PSEUDO_ALGORITHMS = {STRICT_KEX_CLIENT, STRICT_KEX_SERVER, "ext-info-c", "ext-info-s"}


def known_ids(flow: Optional[KexFlowType]) -> set[int]:
    ids = set(GENERIC_NAMES)
    if flow is not None:
        ids |= set(FLOW_NAMES.get(flow.variant, {}))
    return ids


def message_name(msg_id: int, flow: Optional[KexFlowType] = None) -> str:
    if flow is not None and msg_id in FLOW_NAMES.get(flow.variant, {}):
        return FLOW_NAMES[flow.variant][msg_id]
    if msg_id in GENERIC_NAMES:
        return GENERIC_NAMES[msg_id]
    if 30 <= msg_id <= 49 and flow is None:
        return f"KEX_{msg_id}"
    return f"UNKNOWN_{msg_id}"


@dataclass
class KexInit:
    kex: list[str]
    host_key: list[str] = field(default_factory=lambda: [HOST_KEY_ALGORITHM])
    enc_c2s: list[str] = field(default_factory=lambda: ["aes128-ctr"])
    enc_s2c: list[str] = field(default_factory=lambda: ["aes128-ctr"])
    mac_c2s: list[str] = field(default_factory=lambda: ["hmac-sha2-256"])
    mac_s2c: list[str] = field(default_factory=lambda: ["hmac-sha2-256"])
    comp_c2s: list[str] = field(default_factory=lambda: ["none"])
    comp_s2c: list[str] = field(default_factory=lambda: ["none"])
    lang_c2s: list[str] = field(default_factory=list)
    lang_s2c: list[str] = field(default_factory=list)
    first_kex_follows: bool = False
    cookie: bytes = b""

    LISTS = ("kex", "host_key", "enc_c2s", "enc_s2c", "mac_c2s", "mac_s2c",
             "comp_c2s", "comp_s2c", "lang_c2s", "lang_s2c")

    def to_payload(self, cookie: Optional[bytes] = None) -> bytes:
        cookie = cookie if cookie is not None else (self.cookie or os.urandom(16))
        body = b"".join(namelist(getattr(self, name)) for name in self.LISTS)
        return bytes([KEXINIT]) + cookie + body + boolean(self.first_kex_follows) + uint32(0)

    @classmethod
    def parse(cls, payload: bytes) -> "KexInit":
        r = PayloadReader(payload, 1)
        cookie = r.raw(16)
        lists = [r.namelist() for _ in cls.LISTS]
        follows = r.boolean()
        r.uint32()
        return cls(*lists, first_kex_follows=follows, cookie=cookie)


def default_kexinit(flow: KexFlowType) -> KexInit:
    flow.activate()
    return KexInit(kex=[flow.algorithm_name, STRICT_KEX_CLIENT])


def default_kexinit_payload(flow: KexFlowType) -> bytes:
    return default_kexinit(flow).to_payload()


@dataclass(frozen=True)
class Negotiated:
    flow: KexFlowType
    host_key: str
    encryption: str
    mac: str
    strict: bool


def _choose(client: list[str], server: list[str]) -> Optional[str]:
    for name in client:
        if name in server and name not in PSEUDO_ALGORITHMS:
            return name
    return None


def negotiate(client: KexInit, server: KexInit) -> Optional[Negotiated]:
    """RFC 4253 algorithm selection; None when any list has no overlap."""
    kex = _choose(client.kex, server.kex)
    host_key = _choose(client.host_key, server.host_key)
    enc = _choose(client.enc_c2s, server.enc_c2s)
    mac = _choose(client.mac_c2s, server.mac_c2s)
    if None in (kex, host_key, enc, mac) or kex not in FLOWS_BY_ALGORITHM:
        return None
    flow = FLOWS_BY_ALGORITHM[kex]
    if not flow.supported:
        raise UnsupportedFlow(flow.variant)
    strict = STRICT_KEX_CLIENT in client.kex and STRICT_KEX_SERVER in server.kex
    return Negotiated(flow, host_key, enc, mac, strict)
