"""Client-side byte transports: in-process pipes to simulated servers and TCP."""
from __future__ import annotations

import select
import socket
from dataclasses import dataclass

from .wire import ConnectionClosed


@dataclass
class ResponseWindow:
    """Read until ``idle`` seconds of silence after the first byte, or
    ``first`` seconds total with no bytes at all."""
    first: float = 0.4
    idle: float = 0.15


class InProcessTransport:
    """Pipe to a server session object living in the same process.

    The session exposes ``feed(bytes)``, an ``outbox`` bytearray and a
    ``closed`` flag; it processes input synchronously, so a response window
    needs no waiting.
    """

    def __init__(self, session):
        self.session = session
        self.buffer = bytearray()
        self.eof = False

    def send(self, data: bytes) -> None:
        if self.session.closed:
            raise ConnectionClosed("peer closed the connection")
        self.session.feed(data)

    def fill(self, first: bool = True) -> bool:
        out = self.session.outbox
        if out:
            self.buffer += out
            out.clear()
            return True
        if self.session.closed:
            self.eof = True
        return False

    def close(self) -> None:
        self.session.close()


class TCPTransport:
    def __init__(self, sock: socket.socket, window: ResponseWindow):
        self.sock = sock
        self.window = window
        self.buffer = bytearray()
        self.eof = False

    @classmethod
    def connect(cls, host: str, port: int, window: ResponseWindow, timeout: float = 5.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, window)

    def send(self, data: bytes) -> None:
        if self.eof:
            raise ConnectionClosed("peer closed the connection")
        try:
            self.sock.sendall(data)
        except OSError as exc:
            self.eof = True
            raise ConnectionClosed(str(exc)) from exc

    def fill(self, first: bool = True) -> bool:
        if self.eof:
            return False
        timeout = self.window.first if first else self.window.idle
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return False
        try:
            chunk = self.sock.recv(65536)
        except OSError:
            chunk = b""
        if not chunk:
            self.eof = True
            return False
        self.buffer += chunk
        return True

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TCPEndpoint:
    def __init__(self, host: str, port: int, window: ResponseWindow | None = None):
        self.host = host
        self.port = port
        self.window = window or ResponseWindow()
        self.connections = 0

    def connect(self) -> TCPTransport:
        self.connections += 1
        return TCPTransport.connect(self.host, self.port, self.window)

    def __str__(self):
        return f"{self.host}:{self.port}"


def parse_endpoint(text: str, window: ResponseWindow | None = None) -> TCPEndpoint:
    host, _, port = text.rpartition(":")
    return TCPEndpoint(host or "127.0.0.1", int(port), window)
