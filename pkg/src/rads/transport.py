"""Edge-cloud wire protocol: framing, bandwidth budgeting, reliable sessions.

Frame layout (big-endian), documented in docs/protocol.md:

    4 bytes  length of everything after this field
    1 byte   type tag (1 FrameBatch, 2 PseudoLabels, 3 ModelUpdate, 4 Ack, 5 Heartbeat)
    8 bytes  sequence number (strictly increasing per direction per session)
    32 bytes SHA-256 digest of the payload
    N bytes  payload

The same framing runs over an in-process channel in simulation and a TCP
stream in two-process mode. Sessions deliver application messages reliably
and in order over lossy channels via acknowledgements, retransmission and
duplicate suppression; a reconnect resumes from the last acknowledged
sequence number. One sender and one receiver task per direction; messages
are immutable after encoding.
"""

from __future__ import annotations

import hashlib
import queue
import socket
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from .labelaug import stable_seed

MAX_PAYLOAD = 16 * 1024 * 1024
HEADER_LEN = 1 + 8 + 32  # tag + seq + digest


class MessageType(IntEnum):
    FRAME_BATCH = 1
    PSEUDO_LABELS = 2
    MODEL_UPDATE = 3
    ACK = 4
    HEARTBEAT = 5


class TransportError(Exception):
    pass


class TruncatedFrameError(TransportError):
    pass


class HashMismatchError(TransportError):
    pass


class UnknownTagError(TransportError):
    pass


class MessageTooLargeError(TransportError):
    pass


class SessionError(TransportError):
    pass


@dataclass(frozen=True)
class Message:
    type: MessageType
    seq: int
    payload: bytes
    payload_hash: bytes = b""

    def __post_init__(self):
        if not self.payload_hash:
            object.__setattr__(self, "payload_hash", hashlib.sha256(self.payload).digest())


def encode(m: Message) -> bytes:
    if len(m.payload) > MAX_PAYLOAD:
        raise MessageTooLargeError(f"payload of {len(m.payload)} bytes exceeds {MAX_PAYLOAD}")
    body = struct.pack(">BQ", int(m.type), m.seq) + m.payload_hash + m.payload
    return struct.pack(">I", len(body)) + body


def decode(frame: bytes) -> Message:
    if len(frame) < 4:
        raise TruncatedFrameError("frame shorter than the length prefix")
    (length,) = struct.unpack(">I", frame[:4])
    if len(frame) != 4 + length or length < HEADER_LEN:
        raise TruncatedFrameError(f"expected {4 + length} bytes, got {len(frame)}")
    tag, seq = struct.unpack(">BQ", frame[4:13])
    try:
        mtype = MessageType(tag)
    except ValueError:
        raise UnknownTagError(f"unknown message tag {tag}") from None
    digest = frame[13:45]
    payload = frame[45:]
    if hashlib.sha256(payload).digest() != digest:
        raise HashMismatchError("payload digest does not match")
    return Message(type=mtype, seq=seq, payload=payload, payload_hash=digest)


# --- bandwidth accounting -------------------------------------------------


@dataclass
class BandwidthLedger:
    """Byte budget per accounting window; single-mutator resource."""

    budget_bytes: int
    window_seconds: float
    window_start: float = 0.0
    bytes_sent: int = 0

    def roll(self, now: float) -> None:
        while now >= self.window_start + self.window_seconds:
            self.window_start += self.window_seconds
            self.bytes_sent = 0

    def remaining(self) -> int:
        return self.budget_bytes - self.bytes_sent

    def charge(self, n: int) -> None:
        if n > self.remaining():
            raise ValueError("ledger overcommitted")
        self.bytes_sent += n


class BudgetedSender:
    """FIFO sender that defers frames exceeding the current window budget."""

    def __init__(self, ledger: BandwidthLedger, transmit: Callable[[bytes], None]):
        self.ledger = ledger
        self.transmit = transmit
        self.pending: Deque[bytes] = deque()

    def send(self, m: Message, now: float) -> str:
        """Returns "sent" or "deferred"; frames that can never fit raise."""
        frame = encode(m)
        if len(frame) > self.ledger.budget_bytes:
            raise MessageTooLargeError(
                f"frame of {len(frame)} bytes exceeds the whole-window budget"
            )
        self.ledger.roll(now)
        self.flush(now)
        if self.pending or len(frame) > self.ledger.remaining():
            self.pending.append(frame)
            return "deferred"
        self.ledger.charge(len(frame))
        self.transmit(frame)
        return "sent"

    def flush(self, now: float) -> int:
        """Transmit deferred frames that now fit; preserves FIFO order."""
        self.ledger.roll(now)
        sent = 0
        while self.pending and len(self.pending[0]) <= self.ledger.remaining():
            frame = self.pending.popleft()
            self.ledger.charge(len(frame))
            self.transmit(frame)
            sent += 1
        return sent


# --- channels ---------------------------------------------------------------


class InProcChannel:
    """One direction of an in-process duplex pipe with optional frame loss."""

    def __init__(self, out_q: "queue.Queue[bytes]", in_q: "queue.Queue[bytes]",
                 loss_rate: float = 0.0, seed: int = 0):
        self._out = out_q
        self._in = in_q
        self._loss = loss_rate
        self._rng = np.random.default_rng(stable_seed(seed, "channel"))

    def send(self, data: bytes) -> None:
        if self._loss > 0.0 and self._rng.random() < self._loss:
            return  # dropped on the wire
        self._out.put(data)

    def recv(self, timeout: float = 0.0) -> Optional[bytes]:
        try:
            if timeout <= 0:
                return self._in.get_nowait()
            return self._in.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        pass

    @classmethod
    def pair(cls, loss_rate: float = 0.0, seed: int = 0) -> Tuple["InProcChannel", "InProcChannel"]:
        a_to_b: "queue.Queue[bytes]" = queue.Queue()
        b_to_a: "queue.Queue[bytes]" = queue.Queue()
        return (
            cls(a_to_b, b_to_a, loss_rate, seed),
            cls(b_to_a, a_to_b, loss_rate, seed + 1),
        )


class TcpChannel:
    """Frame-oriented wrapper over a connected TCP socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buffer = b""

    def send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv(self, timeout: float = 0.0) -> Optional[bytes]:
        self._sock.settimeout(max(timeout, 1e-4))
        try:
            while True:
                if len(self._buffer) >= 4:
                    (length,) = struct.unpack(">I", self._buffer[:4])
                    if len(self._buffer) >= 4 + length:
                        frame = self._buffer[: 4 + length]
                        self._buffer = self._buffer[4 + length :]
                        return frame
                chunk = self._sock.recv(65536)
                if not chunk:
                    raise SessionError("peer closed the connection")
                self._buffer += chunk
        except socket.timeout:
            return None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    @classmethod
    def listen(cls, host: str, port: int) -> "TcpChannel":
        srv = socket.create_server((host, port))
        conn, _ = srv.accept()
        srv.close()
        return cls(conn)

    @classmethod
    def connect(cls, host: str, port: int, attempts: int = 50) -> "TcpChannel":
        last: Optional[Exception] = None
        for _ in range(attempts):
            try:
                return cls(socket.create_connection((host, port), timeout=5.0))
            except OSError as exc:
                last = exc
                time.sleep(0.1)
        raise SessionError(f"could not connect to {host}:{port}: {last}")


# --- reliable session -------------------------------------------------------


@dataclass
class _Outgoing:
    message: Message
    frame: bytes
    sent_at: float = -np.inf
    attempts: int = 0


class Session:
    """Reliable, ordered duplex exchange over an unreliable channel.

    Stop-and-wait per direction: one unacknowledged frame in flight,
    retransmitted after ``ack_timeout`` until acknowledged. Incoming
    application messages are acknowledged and de-duplicated by sequence
    number; in-order delivery lands them in :meth:`inbox`. The clock is
    injectable so simulations can pump with virtual time.
    """

    def __init__(
        self,
        channel,
        role: str,
        clock: Callable[[], float] = time.monotonic,
        ack_timeout: float = 0.05,
        max_retries: int = 500,
    ):
        if role not in ("edge", "cloud"):
            raise ValueError(f"role must be 'edge' or 'cloud', got {role!r}")
        self.channel = channel
        self.role = role
        self.clock = clock
        self.ack_timeout = ack_timeout
        self.max_retries = max_retries
        self._next_seq = 1
        self._outbox: Deque[_Outgoing] = deque()
        self._in_flight: Optional[_Outgoing] = None
        self._acked = 0  # highest own seq acknowledged by the peer
        self._delivered = 0  # highest peer seq delivered in order
        self._inbox: List[Message] = []

    # -- sending --

    def queue(self, mtype: MessageType, payload: bytes) -> Message:
        m = Message(type=mtype, seq=self._next_seq, payload=payload)
        self._next_seq += 1
        self._outbox.append(_Outgoing(message=m, frame=encode(m)))
        return m

    def attach(self, channel) -> None:
        """Resume on a fresh channel after a disconnect; unacked traffic
        retransmits from session state, so there is no gap and no loss."""
        self.channel = channel
        if self._in_flight is not None:
            self._in_flight.sent_at = -np.inf

    def pump(self) -> None:
        """One scheduling step: drain the channel, then (re)transmit."""
        now = self.clock()
        while True:
            raw = self.channel.recv(0)
            if raw is None:
                break
            self._handle(raw)
        if self._in_flight is None and self._outbox:
            self._in_flight = self._outbox.popleft()
        if self._in_flight is not None:
            due = self._in_flight.sent_at + self.ack_timeout
            if now >= due:
                if self._in_flight.attempts > self.max_retries:
                    raise SessionError(
                        f"message seq {self._in_flight.message.seq} unacknowledged after "
                        f"{self.max_retries} retries"
                    )
                self.channel.send(self._in_flight.frame)
                self._in_flight.sent_at = now
                self._in_flight.attempts += 1

    def _handle(self, raw: bytes) -> None:
        msg = decode(raw)
        if msg.type == MessageType.ACK:
            (acked,) = struct.unpack(">Q", msg.payload)
            if self._in_flight is not None and acked == self._in_flight.message.seq:
                self._acked = acked
                self._in_flight = None
            return
        # acknowledge every application frame, even duplicates
        ack_payload = struct.pack(">Q", msg.seq)
        ack = Message(type=MessageType.ACK, seq=self._next_seq, payload=ack_payload)
        self._next_seq += 1
        self.channel.send(encode(ack))
        if msg.seq == self._delivered + 1:
            self._delivered = msg.seq
            self._inbox.append(msg)
        # anything else is a duplicate or out-of-order retransmit: dropped

    def inbox(self) -> List[Message]:
        """Drain messages delivered so far (in order)."""
        out = self._inbox
        self._inbox = []
        return out

    @property
    def idle(self) -> bool:
        return self._in_flight is None and not self._outbox

    # -- blocking conveniences (real-clock use, e.g. TCP mode) --

    def send(self, mtype: MessageType, payload: bytes, timeout: float = 30.0) -> Message:
        m = self.queue(mtype, payload)
        deadline = time.monotonic() + timeout
        while not self.idle:
            self.pump()
            if time.monotonic() > deadline:
                raise SessionError("send timed out waiting for acknowledgement")
            time.sleep(0.001)
        return m

    def receive(self, timeout: float = 30.0) -> Message:
        deadline = time.monotonic() + timeout
        while True:
            self.pump()
            if self._inbox:
                return self._inbox.pop(0)
            if time.monotonic() > deadline:
                raise SessionError("receive timed out")
            time.sleep(0.001)


def pump_until(sessions: List[Session], done: Callable[[], bool], *,
               clock: List[float], tick: float = 0.01, max_steps: int = 10_000_000) -> None:
    """Drive sessions with a shared virtual clock until ``done()``.

    ``clock`` is a single-element list holding virtual time; sessions
    constructed with ``clock=lambda: clock[0]`` advance deterministically
    and without wall-clock sleeps.
    """
    for _ in range(max_steps):
        if done():
            return
        for s in sessions:
            s.pump()
        clock[0] += tick
    raise SessionError("pump_until exceeded max_steps")
