"""Framed wire protocol with challenge-response auth and resumable sessions.

The transport contract is deliberately connection-agnostic: everything a node
needs to continue after a disconnect lives in its SessionTicket plus the
coordinator's checkpoint, so any reliable byte stream (or an in-process
simulated one) can carry the frames. Exact byte layouts are documented in
PROTOCOL.md at the repository root.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional

from .errors import (
    BadProof,
    MalformedPayload,
    NonceExpired,
    NonceReused,
    OversizePayload,
    TruncatedFrame,
    UnknownMessageType,
)
from .tensors import TensorMap, deserialize, serialize

# Message type codes
HELLO = 0x01
CHALLENGE = 0x02
AUTH_PROOF = 0x03
JOIN_ACK = 0x04
ROUND_START = 0x05
ROUND_RESULT = 0x06
ROUND_ACK = 0x07
HEARTBEAT = 0x08
RESUME_REQ = 0x09
RESUME_STATE = 0x0A
ERROR = 0x0B
SHUTDOWN = 0x0C

MESSAGE_TYPES = frozenset(range(HELLO, SHUTDOWN + 1))

TYPE_NAMES = {
    HELLO: "HELLO", CHALLENGE: "CHALLENGE", AUTH_PROOF: "AUTH_PROOF",
    JOIN_ACK: "JOIN_ACK", ROUND_START: "ROUND_START", ROUND_RESULT: "ROUND_RESULT",
    ROUND_ACK: "ROUND_ACK", HEARTBEAT: "HEARTBEAT", RESUME_REQ: "RESUME_REQ",
    RESUME_STATE: "RESUME_STATE", ERROR: "ERROR", SHUTDOWN: "SHUTDOWN",
}

MAX_PAYLOAD = 64 * 1024 * 1024  # configurable cap, 64 MiB by default
HEADER_LEN = 5  # u32 payload length + u8 type

NONCE_LEN = 32
SESSION_ID_LEN = 16
DEFAULT_NONCE_TTL = 30.0


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    @property
    def type_name(self) -> str:
        return TYPE_NAMES.get(self.msg_type, f"0x{self.msg_type:02x}")


def encode_frame(msg_type: int, payload: bytes = b"", max_payload: int = MAX_PAYLOAD) -> bytes:
    """u32 big-endian payload length, u8 type code, payload bytes."""
    if msg_type not in MESSAGE_TYPES:
        raise UnknownMessageType(f"undefined message type 0x{msg_type:02x}")
    if len(payload) > max_payload:
        raise OversizePayload(f"payload {len(payload)} exceeds cap {max_payload}")
    return struct.pack(">IB", len(payload), msg_type) + payload


def decode_frame(data: bytes, max_payload: int = MAX_PAYLOAD) -> Frame:
    """Decode exactly one frame; trailing bytes are an error."""
    frame, consumed = read_frame(data, max_payload=max_payload)
    if consumed != len(data):
        raise TruncatedFrame(f"{len(data) - consumed} unexpected trailing bytes")
    return frame


def read_frame(data: bytes, offset: int = 0, max_payload: int = MAX_PAYLOAD) -> tuple[Frame, int]:
    """Decode one frame starting at offset; returns (frame, next offset)."""
    if len(data) - offset < HEADER_LEN:
        raise TruncatedFrame(f"{len(data) - offset} bytes is shorter than a frame header")
    length, msg_type = struct.unpack_from(">IB", data, offset)
    if msg_type not in MESSAGE_TYPES:
        raise UnknownMessageType(f"undefined message type 0x{msg_type:02x}")
    if length > max_payload:
        raise OversizePayload(f"declared payload {length} exceeds cap {max_payload}")
    end = offset + HEADER_LEN + length
    if end > len(data):
        raise TruncatedFrame(f"payload declared {length} bytes, only {len(data) - offset - HEADER_LEN} present")
    return Frame(msg_type, bytes(data[offset + HEADER_LEN:end])), end


def iter_frames(data: bytes, max_payload: int = MAX_PAYLOAD) -> Iterator[Frame]:
    """Yield complete frames in order; raises at the first malformed point."""
    offset = 0
    while offset < len(data):
        frame, offset = read_frame(data, offset, max_payload)
        yield frame


# --- blocking socket helpers --------------------------------------------------------

def send_frame(sock, frame: Frame, max_payload: int = MAX_PAYLOAD) -> None:
    sock.sendall(encode_frame(frame.msg_type, frame.payload, max_payload))


def recv_frame(sock, max_payload: int = MAX_PAYLOAD) -> Optional[Frame]:
    """Read exactly one frame from a blocking socket; None on orderly EOF."""
    header = _recv_exact(sock, HEADER_LEN)
    if header is None:
        return None
    length, msg_type = struct.unpack(">IB", header)
    if msg_type not in MESSAGE_TYPES:
        raise UnknownMessageType(f"undefined message type 0x{msg_type:02x}")
    if length > max_payload:
        raise OversizePayload(f"declared payload {length} exceeds cap {max_payload}")
    payload = _recv_exact(sock, length) if length else b""
    if length and payload is None:
        raise TruncatedFrame("stream ended inside a frame payload")
    return Frame(msg_type, payload or b"")


_MID_FRAME_STALL_LIMIT = 30


def _recv_exact(sock, n: int) -> Optional[bytes]:
    buf = bytearray()
    stalls = 0
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except TimeoutError:
            if not buf:
                raise  # idle between frames; caller treats this as a tick
            stalls += 1  # mid-frame: keep waiting, bounded, to preserve framing
            if stalls >= _MID_FRAME_STALL_LIMIT:
                raise TruncatedFrame(f"peer stalled {n - len(buf)} bytes into a frame")
            continue
        if not chunk:
            if buf:
                raise TruncatedFrame(f"stream ended {n - len(buf)} bytes short")
            return None
        buf += chunk
        stalls = 0
    return bytes(buf)


# --- payload codecs -------------------------------------------------------------

def encode_payload(fields: dict) -> bytes:
    """Canonical UTF-8 text map: JSON with sorted keys and compact separators."""
    return json.dumps(fields, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_payload(payload: bytes) -> dict:
    try:
        decoded = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"payload is not a canonical text map: {exc}") from exc
    if not isinstance(decoded, dict):
        raise MalformedPayload(f"payload must be a map, got {type(decoded).__name__}")
    return decoded


def encode_tensor_payload(header: dict, tensors: TensorMap) -> bytes:
    """Text header section (u32 BE length + canonical map) followed by FTM1 bytes."""
    head = encode_payload(header)
    return struct.pack(">I", len(head)) + head + serialize(tensors)


def decode_tensor_payload(payload: bytes) -> tuple[dict, TensorMap]:
    if len(payload) < 4:
        raise MalformedPayload("tensor payload shorter than its header length field")
    (head_len,) = struct.unpack_from(">I", payload)
    if 4 + head_len > len(payload):
        raise MalformedPayload("tensor payload header extends past the payload")
    header = decode_payload(payload[4:4 + head_len])
    tensors = deserialize(payload[4 + head_len:])
    return header, tensors


# --- challenge-response authentication --------------------------------------------

@dataclass
class AuthChallenge:
    """Single-use nonce; verification consumes it regardless of outcome."""

    nonce: bytes
    issued_at: float
    consumed: bool = False


def prove(token: bytes, nonce: bytes, node_id: str) -> bytes:
    """HMAC-SHA256 over nonce || UTF-8(node_id), keyed by the node token."""
    return hmac.new(token, nonce + node_id.encode("utf-8"), hashlib.sha256).digest()


class ChallengeStore:
    """Issues nonces and enforces their single-use, time-limited lifecycle."""

    def __init__(self, ttl: float = DEFAULT_NONCE_TTL):
        self.ttl = ttl
        self._challenges: dict[bytes, AuthChallenge] = {}

    def issue(self, now: float, nonce: Optional[bytes] = None) -> AuthChallenge:
        challenge = AuthChallenge(nonce=nonce or secrets.token_bytes(NONCE_LEN), issued_at=now)
        self._challenges[challenge.nonce] = challenge
        return challenge

    def verify(self, token: bytes, nonce: bytes, node_id: str, proof: bytes, now: float) -> bool:
        """Constant-time proof check; consumes the nonce whatever the outcome."""
        challenge = self._challenges.get(nonce)
        if challenge is None or challenge.consumed:
            raise NonceReused("nonce unknown or already consumed")
        challenge.consumed = True
        if now - challenge.issued_at > self.ttl:
            raise NonceExpired(f"nonce older than {self.ttl}s")
        if not hmac.compare_digest(prove(token, nonce, node_id), proof):
            raise BadProof(f"proof mismatch for node {node_id!r}")
        return True

    def sweep(self, now: float) -> None:
        """Drop consumed and expired entries; call opportunistically."""
        stale = [n for n, c in self._challenges.items() if c.consumed or now - c.issued_at > self.ttl]
        for nonce in stale:
            del self._challenges[nonce]


# --- session tickets and resume decisions ------------------------------------------

@dataclass
class SessionTicket:
    """Client-held resume cursor: identity plus the last acknowledged round."""

    session_id: bytes
    node_id: str
    last_acked_round: int = 0

    def advance(self, round_index: int) -> None:
        if round_index < self.last_acked_round:
            raise ValueError(
                f"last_acked_round may not move backwards ({self.last_acked_round} -> {round_index})"
            )
        self.last_acked_round = round_index


class ResumeDecision(Enum):
    RESUME = "resume"  # re-deliver the current ROUND_START
    WAIT = "wait"      # already contributed (or federation paused); hold
    DONE = "done"      # federation finished
    REJOIN = "rejoin"  # ticket unknown or stale; do a full fresh join


def resume_decision(
    *,
    session_known: bool,
    finished: bool,
    in_round: bool,
    node_contributed: bool,
) -> ResumeDecision:
    """Classify a resume attempt against the coordinator's current round state."""
    if not session_known:
        return ResumeDecision.REJOIN
    if finished:
        return ResumeDecision.DONE
    if node_contributed or not in_round:
        return ResumeDecision.WAIT
    return ResumeDecision.RESUME
