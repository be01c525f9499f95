"""Length-prefixed JSON frames for the rollout protocol.

A frame is a 4-byte big-endian unsigned body length followed by a UTF-8
JSON object with a ``"type"`` field. Floats are written as the shortest
decimal that round-trips the 64-bit value, so numbers survive the wire
bit-exactly.
"""

from __future__ import annotations

import json
import socket
import struct

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_BODY = 1 << 20

HELLO = "HELLO"
RESET = "RESET"
RESET_OK = "RESET_OK"
STEP = "STEP"
STEP_OK = "STEP_OK"
CRASHED = "CRASHED"
SHUTDOWN = "SHUTDOWN"
ERROR = "ERROR"
MESSAGE_TYPES = frozenset({HELLO, RESET, RESET_OK, STEP, STEP_OK, CRASHED, SHUTDOWN, ERROR})


class FrameError(ValueError):
    """The byte stream does not hold a well-formed frame; resync by reconnecting."""


class ConnectionClosed(ConnectionError):
    pass


def encode(msg: dict) -> bytes:
    if not isinstance(msg.get("type"), str):
        raise ValueError("message needs a string 'type'")
    body = json.dumps(msg, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(body) > MAX_BODY:
        raise ValueError(f"message body of {len(body)} bytes exceeds {MAX_BODY}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> dict:
    try:
        msg = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"undecodable body: {exc}") from None
    if not isinstance(msg, dict) or not isinstance(msg.get("type"), str):
        raise FrameError("body is not an object with a string 'type'")
    return msg


def decode(frame: bytes) -> dict:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise FrameError("frame shorter than its header")
    (length,) = HEADER.unpack_from(frame)
    if length != len(frame) - HEADER.size:
        raise FrameError(f"length prefix {length} != body size {len(frame) - HEADER.size}")
    return decode_body(frame[HEADER.size :])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        chunks += chunk
    return bytes(chunks)


def read_message(sock: socket.socket) -> dict:
    (length,) = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > MAX_BODY:
        raise FrameError(f"frame length {length} exceeds {MAX_BODY}")
    return decode_body(_recv_exact(sock, length))


def write_message(sock: socket.socket, msg: dict) -> None:
    sock.sendall(encode(msg))


def error(message: str) -> dict:
    return {"type": ERROR, "message": message}


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)
