"""SSH identification banners and the Binary Packet Protocol (RFC 4253).

Framing, padding, per-direction sequence numbers and the two supported
cipher states (``none`` and ``aes128-ctr`` + ``hmac-sha2-256``).
"""
from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

MAX_PACKET_SIZE = 262144
MAX_BANNER_LENGTH = 255
MAX_PREAMBLE_LINES = 64
MIN_PADDING = 4

_UINT32 = struct.Struct(">I")


class SSHError(Exception):
    pass


class ProtocolError(SSHError):
    pass


class FramingError(ProtocolError):
    pass


class OversizeError(SSHError):
    pass


class IntegrityError(SSHError):
    """MAC verification failed for an inbound packet."""


class ConnectionClosed(SSHError):
    pass


# -- RFC 4251 data types ---------------------------------------------------

def uint32(value: int) -> bytes:
    return _UINT32.pack(value & 0xFFFFFFFF)


def string(value: bytes | str) -> bytes:
    if isinstance(value, str):
        value = value.encode()
    return _UINT32.pack(len(value)) + value


def boolean(value: bool) -> bytes:
    return b"\x01" if value else b"\x00"


def namelist(names) -> bytes:
    return string(",".join(names))


def mpint(value: int) -> bytes:
    if value == 0:
        return _UINT32.pack(0)
    if value < 0:
        raise ValueError("negative mpint not supported")
    # one extra byte exactly when the top bit is set, so it reads as positive
    return string(value.to_bytes((value.bit_length() + 8) // 8, "big"))


class PayloadReader:
    """Sequential reader over an SSH message payload."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = bytes(data)
        self.pos = offset

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated message field")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def byte(self) -> int:
        return self._take(1)[0]

    def boolean(self) -> bool:
        return self._take(1) != b"\x00"

    def uint32(self) -> int:
        return _UINT32.unpack(self._take(4))[0]

    def string(self) -> bytes:
        return self._take(self.uint32())

    def text(self) -> str:
        return self.string().decode("utf-8", "replace")

    def namelist(self) -> list[str]:
        raw = self.text()
        return raw.split(",") if raw else []

    def mpint(self) -> int:
        raw = self.string()
        if raw and raw[0] & 0x80:
            raise ProtocolError("negative mpint")
        return int.from_bytes(raw, "big")

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def remaining(self) -> int:
        return len(self.data) - self.pos


# -- sequence numbers and cipher state -------------------------------------

@dataclass
class SequenceCounters:
    send: int = 0
    receive: int = 0

    def next_send(self) -> int:
        current = self.send
        self.send = (self.send + 1) % 2**32
        return current

    def next_receive(self) -> int:
        current = self.receive
        self.receive = (self.receive + 1) % 2**32
        return current


def reset_direction(seq: SequenceCounters, direction: str) -> SequenceCounters:
    if direction == "send":
        seq.send = 0
    elif direction == "receive":
        seq.receive = 0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return seq


ENCRYPTIONS = {"none": (8, 0, 0), "aes128-ctr": (16, 16, 16)}  # block, key, iv
MACS = {"none": (0, 0), "hmac-sha2-256": (32, 32)}  # key, tag


class CipherState:
    """One direction's packet protection.

    AES-CTR is tracked as an explicit block counter so a packet header can be
    decrypted speculatively before the rest of the packet has arrived.
    """

    def __init__(self, encryption: str = "none", mac: str = "none",
                 key: bytes = b"", iv: bytes = b"", mac_key: bytes = b""):
        if encryption not in ENCRYPTIONS:
            raise ValueError(f"unsupported cipher {encryption!r}")
        if mac not in MACS:
            raise ValueError(f"unsupported mac {mac!r}")
        block, key_len, iv_len = ENCRYPTIONS[encryption]
        mac_key_len, tag_len = MACS[mac]
        if len(key) != key_len or len(iv) != iv_len:
            raise ValueError(f"{encryption} needs a {key_len}-byte key and {iv_len}-byte IV")
        if len(mac_key) != mac_key_len:
            raise ValueError(f"{mac} needs a {mac_key_len}-byte key")
        self.encryption = encryption
        self.mac = mac
        self.key = key
        self.iv = iv
        self.mac_key = mac_key
        self.block_size = block
        self.mac_length = tag_len
        self._counter = int.from_bytes(iv, "big") if iv else 0
        self._aes = algorithms.AES(key) if encryption == "aes128-ctr" else None

    @classmethod
    def none(cls) -> "CipherState":
        return cls()

    @property
    def is_none(self) -> bool:
        return self.encryption == "none" and self.mac == "none"

    def _apply(self, data: bytes, block_offset: int = 0) -> bytes:
        if self._aes is None:
            return data
        nonce = ((self._counter + block_offset) % 2**128).to_bytes(16, "big")
        return Cipher(self._aes, modes.CTR(nonce)).encryptor().update(data)

    def peek(self, data: bytes, block_offset: int = 0) -> bytes:
        return self._apply(data, block_offset)

    def advance(self, nbytes: int) -> None:
        if self._aes is not None:
            self._counter += nbytes // 16

    def sign(self, seqnr: int, packet: bytes) -> bytes:
        if self.mac == "none":
            return b""
        return hmac.new(self.mac_key, uint32(seqnr) + packet, hashlib.sha256).digest()

    def __repr__(self):
        return f"CipherState({self.encryption}, {self.mac})"


# -- packets ----------------------------------------------------------------

@dataclass
class PacketBytes:
    payload: bytes
    padding_length: int
    mac: bytes = b""


def frame(payload: bytes, block_size: int, rng: Callable[[int], bytes] = os.urandom) -> bytes:
    """Unencrypted packet: length, padding length, payload, random padding."""
    padding = block_size - (5 + len(payload)) % block_size
    if padding < MIN_PADDING:
        padding += block_size
    return _UINT32.pack(1 + len(payload) + padding) + bytes([padding]) + payload + rng(padding)


def encode_packet(payload: bytes, cipher: CipherState, seq: SequenceCounters,
                  max_size: int = MAX_PACKET_SIZE,
                  rng: Callable[[int], bytes] = os.urandom) -> bytes:
    if not payload:
        raise ValueError("payload must contain a message id")
    if len(payload) > max_size:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds {max_size}")
    plain = frame(payload, cipher.block_size, rng)
    seqnr = seq.next_send()
    mac = cipher.sign(seqnr, plain)
    wire = cipher.peek(plain)
    cipher.advance(len(plain))
    return wire + mac


def try_decode_packet(buffer: bytearray, cipher: CipherState, seq: SequenceCounters,
                      max_size: int = MAX_PACKET_SIZE) -> Optional[bytes]:
    """Consume one packet from ``buffer``; None if it is not complete yet."""
    bs = cipher.block_size
    if len(buffer) < bs:
        return None
    first = cipher.peek(bytes(buffer[:bs]))
    packet_length = _UINT32.unpack_from(first)[0]
    if packet_length < 5 or packet_length > max_size + 256:
        raise FramingError(f"bad packet length {packet_length}")
    if (packet_length + 4) % bs:
        raise FramingError("packet length is not a multiple of the block size")
    total = 4 + packet_length + cipher.mac_length
    if len(buffer) < total:
        return None
    body = 4 + packet_length
    plain = first + cipher.peek(bytes(buffer[bs:body]), bs // 16)
    mac = bytes(buffer[body:total])
    seqnr = seq.next_receive()
    if cipher.mac != "none" and not hmac.compare_digest(mac, cipher.sign(seqnr, plain)):
        raise IntegrityError(f"MAC mismatch on packet {seqnr}")
    cipher.advance(body)
    del buffer[:total]
    padding = plain[4]
    if padding < MIN_PADDING or padding + 1 >= packet_length:
        raise FramingError(f"bad padding length {padding}")
    return plain[5:4 + packet_length - padding]


def decode_packet(stream: bytearray, cipher: CipherState, seq: SequenceCounters,
                  max_size: int = MAX_PACKET_SIZE) -> bytes:
    """Decode from a finished stream; running out of bytes means the peer closed."""
    payload = try_decode_packet(stream, cipher, seq, max_size)
    if payload is None:
        raise ConnectionClosed("stream ended inside a packet")
    return payload


def split_packet(wire: bytes) -> PacketBytes:
    """Inspect an unencrypted frame (tests and diagnostics)."""
    length = _UINT32.unpack_from(wire)[0]
    padding = wire[4]
    return PacketBytes(wire[5:4 + length - padding], padding, wire[4 + length:])


# -- banners ---------------------------------------------------------------

@dataclass(frozen=True)
class Banner:
    software_version: str
    protocol_version: str = "2.0"
    comment: Optional[str] = None

    def line(self) -> str:
        text = f"SSH-{self.protocol_version}-{self.software_version}"
        if self.comment:
            text += " " + self.comment
        return text

    def to_bytes(self) -> bytes:
        data = (self.line() + "\r\n").encode("ascii")
        if len(data) > MAX_BANNER_LENGTH:
            raise ProtocolError("banner longer than 255 bytes")
        return data

    @classmethod
    def parse(cls, line: str) -> "Banner":
        line = line.rstrip("\r\n")
        if not line.startswith("SSH-"):
            raise ProtocolError(f"not an identification string: {line!r}")
        parts = line.split("-", 2)
        if len(parts) != 3:
            raise ProtocolError(f"malformed identification string: {line!r}")
        if parts[1] not in ("2.0", "1.99"):
            raise ProtocolError(f"unsupported protocol version {parts[1]}")
        software, _, comment = parts[2].partition(" ")
        return cls(software, parts[1], comment or None)


CLIENT_BANNER = Banner("OpenSSH_9.0")


def take_line(buffer: bytearray) -> Optional[bytes]:
    """Pop one LF-terminated line (without terminator) from the buffer."""
    idx = buffer.find(b"\n")
    if idx < 0:
        if len(buffer) > MAX_BANNER_LENGTH:
            raise ProtocolError("identification line longer than 255 bytes")
        return None
    if idx + 1 > MAX_BANNER_LENGTH:
        raise ProtocolError("identification line longer than 255 bytes")
    line = bytes(buffer[:idx])
    del buffer[:idx + 1]
    return line.rstrip(b"\r")


def read_banner(buffer: bytearray, fill: Callable[[], bool]) -> Banner:
    """Read the peer banner, skipping up to 64 preamble lines.

    ``fill`` pulls more bytes into ``buffer`` and returns False once nothing
    more can arrive.
    """
    skipped = 0
    while True:
        line = take_line(buffer)
        if line is None:
            if not fill():
                raise ConnectionClosed("no identification string received")
            continue
        if line.startswith(b"SSH-"):
            return Banner.parse(line.decode("ascii", "replace"))
        skipped += 1
        if skipped > MAX_PREAMBLE_LINES:
            raise ProtocolError("too many lines before identification string")


def exchange_banner(transport, own: Banner = CLIENT_BANNER) -> Banner:
    transport.send(own.to_bytes())
    return read_banner(transport.buffer, transport.fill)
