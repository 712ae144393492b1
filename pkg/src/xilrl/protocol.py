"""Master/Minion wire protocol: framing, messages, connections, sessions.

Frame layout (little-endian)::

    b"XRL1" | type u8 | length u32 | payload | crc32(type + length + payload) u32

Every payload is a fixed struct layout; experiences travel as packed
:data:`~xilrl.core.EXPERIENCE_DTYPE` records.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .core import EXPERIENCE_DTYPE, EpisodeSummary

log = logging.getLogger(__name__)

MAGIC = b"XRL1"
PROTOCOL_VERSION = 1
DEFAULT_PORT = 47120
MAX_PAYLOAD = 64 * 1024 * 1024
CHUNK_RECORDS = 512
HEARTBEAT_INTERVAL = 5.0  # s of send-idleness before a heartbeat goes out
PEER_TIMEOUT = 30.0  # s of receive-silence before the peer is declared dead

_PREFIX = struct.Struct("<4sBI")
_CRC = struct.Struct("<I")
FRAME_OVERHEAD = _PREFIX.size + _CRC.size


class MsgType(IntEnum):
    HELLO = 1
    POLICY = 2
    RUN_CYCLE = 3
    EXPERIENCES = 4
    CYCLE_DONE = 5
    HEARTBEAT = 6
    ERROR = 7
    SHUTDOWN = 8


class ErrorCode(IntEnum):
    VERSION_MISMATCH = 1
    PROTOCOL_VIOLATION = 2
    BAD_POLICY = 3
    ROLLOUT_FAILED = 4
    BAD_FRAME = 5


# -- errors -----------------------------------------------------------------


class ProtocolError(Exception):
    """Base class of everything that can go wrong on the wire."""


class DecodeError(ProtocolError):
    pass


class BadFrameMagicError(DecodeError):
    pass


class TruncatedFrameError(DecodeError):
    pass


class FrameChecksumError(DecodeError):
    pass


class UnknownMessageTypeError(DecodeError):
    pass


class FrameTooLargeError(DecodeError):
    pass


class MalformedPayloadError(DecodeError):
    pass


class ProtocolViolationError(ProtocolError):
    pass


class VersionMismatchError(ProtocolViolationError):
    pass


class PeerTimeoutError(ProtocolError):
    pass


class ConnectionClosedError(ProtocolError):
    pass


class RemoteError(ProtocolError):
    """The peer answered with an ERROR message."""

    def __init__(self, code: int, text: str):
        super().__init__(f"peer error {code}: {text}")
        self.code = code
        self.text = text


# -- messages ---------------------------------------------------------------

_MODES = ("train", "validate")


@dataclass(frozen=True)
class Hello:
    minion_id: str
    tier: str
    protocol_version: int = PROTOCOL_VERSION
    type = MsgType.HELLO


@dataclass(frozen=True)
class Policy:
    snapshot: bytes  # a serialized ``.pol`` snapshot
    type = MsgType.POLICY


@dataclass(frozen=True)
class RunCycle:
    """Command to collect one cycle.

    ``segment_plan`` of None means random segments. ``weights`` are the
    five reward factors the Minion evaluates each step with.
    """

    cycle_id: int
    mode: str
    experiences_target: int
    seed: int
    segment_plan: tuple[float, ...] | None = None
    weights: tuple[float, float, float, float, float] = (0.14, 1.42, 0.00016, 0.015, 20.0)
    episode_length_steps: int = 1500
    type = MsgType.RUN_CYCLE

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.weights) != 5:
            raise ValueError("five reward weights expected")


@dataclass(frozen=True, eq=False)
class Experiences:
    cycle_id: int
    records: np.ndarray = field(repr=False)
    type = MsgType.EXPERIENCES

    @property
    def count(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Experiences):
            return NotImplemented
        return self.cycle_id == other.cycle_id and self.records.tobytes() == other.records.tobytes()


@dataclass(frozen=True)
class CycleDone:
    cycle_id: int
    summaries: tuple[EpisodeSummary, ...] = ()
    type = MsgType.CYCLE_DONE


@dataclass(frozen=True)
class Heartbeat:
    type = MsgType.HEARTBEAT


@dataclass(frozen=True)
class Error:
    code: int
    text: str
    type = MsgType.ERROR


@dataclass(frozen=True)
class Shutdown:
    type = MsgType.SHUTDOWN


Message = Hello | Policy | RunCycle | Experiences | CycleDone | Heartbeat | Error | Shutdown


# -- payload codecs ---------------------------------------------------------

_U16 = struct.Struct("<H")
_RUN = struct.Struct("<QBIQI")  # cycle_id, mode, target, seed, episode length
_RUN_PLAN = struct.Struct("<BH")  # has_plan, n_plan
_WEIGHTS = struct.Struct("<5d")
_CYCLE_HDR = struct.Struct("<QI")
_SUMMARY = struct.Struct("<dIdddddB")
_ERR = struct.Struct("<H")


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise MalformedPayloadError("payload shorter than its layout")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))

    def text(self) -> str:
        (n,) = self.unpack(_U16)
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError(f"invalid utf-8: {exc}") from None

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedPayloadError(f"{len(self.data) - self.pos} trailing payload bytes")


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValueError("string too long for the wire")
    return _U16.pack(len(b)) + b


def encode_payload(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        return _U16.pack(msg.protocol_version) + _text(msg.tier) + _text(msg.minion_id)
    if isinstance(msg, Policy):
        return bytes(msg.snapshot)
    if isinstance(msg, RunCycle):
        plan = msg.segment_plan
        out = _RUN.pack(msg.cycle_id, _MODES.index(msg.mode), msg.experiences_target, msg.seed, msg.episode_length_steps)
        out += _RUN_PLAN.pack(plan is not None, len(plan or ()))
        out += struct.pack(f"<{len(plan or ())}d", *(plan or ()))
        return out + _WEIGHTS.pack(*msg.weights)
    if isinstance(msg, Experiences):
        recs = np.ascontiguousarray(msg.records, dtype=EXPERIENCE_DTYPE)
        return _CYCLE_HDR.pack(msg.cycle_id, len(recs)) + recs.tobytes()
    if isinstance(msg, CycleDone):
        out = [_CYCLE_HDR.pack(msg.cycle_id, len(msg.summaries))]
        for s in msg.summaries:
            out.append(
                _SUMMARY.pack(
                    s.segment_start,
                    s.steps,
                    s.total_reward,
                    s.nox,
                    s.soot,
                    s.mean_abs_boost_error,
                    s.mean_abs_speed_error,
                    s.failed,
                )
            )
        return b"".join(out)
    if isinstance(msg, Error):
        return _ERR.pack(msg.code) + _text(msg.text)
    if isinstance(msg, (Heartbeat, Shutdown)):
        return b""
    raise TypeError(f"not a protocol message: {msg!r}")


def decode_payload(kind: MsgType, payload: bytes) -> Message:
    r = _Reader(payload)
    if kind == MsgType.HELLO:
        (version,) = r.unpack(_U16)
        tier = r.text()
        minion_id = r.text()
        msg = Hello(minion_id, tier, version)
    elif kind == MsgType.POLICY:
        msg = Policy(bytes(r.take(len(payload))))
    elif kind == MsgType.RUN_CYCLE:
        cycle_id, mode, target, seed, length = r.unpack(_RUN)
        has_plan, n_plan = r.unpack(_RUN_PLAN)
        if mode >= len(_MODES) or has_plan > 1 or (n_plan and not has_plan):
            raise MalformedPayloadError("bad RUN_CYCLE flags")
        plan = struct.unpack(f"<{n_plan}d", r.take(8 * n_plan))
        weights = r.unpack(_WEIGHTS)
        msg = RunCycle(cycle_id, _MODES[mode], target, seed, plan if has_plan else None, weights, length)
    elif kind == MsgType.EXPERIENCES:
        cycle_id, count = r.unpack(_CYCLE_HDR)
        if count * EXPERIENCE_DTYPE.itemsize != len(payload) - _CYCLE_HDR.size:
            raise MalformedPayloadError(f"EXPERIENCES count {count} disagrees with payload size")
        recs = np.frombuffer(r.take(count * EXPERIENCE_DTYPE.itemsize), dtype=EXPERIENCE_DTYPE).copy()
        msg = Experiences(cycle_id, recs)
    elif kind == MsgType.CYCLE_DONE:
        cycle_id, n = r.unpack(_CYCLE_HDR)
        if n * _SUMMARY.size != len(payload) - _CYCLE_HDR.size:
            raise MalformedPayloadError(f"CYCLE_DONE count {n} disagrees with payload size")
        summaries = []
        for _ in range(n):
            start, steps, reward, nox, soot, dp, dv, failed = r.unpack(_SUMMARY)
            summaries.append(EpisodeSummary(start, steps, reward, nox, soot, dp, dv, bool(failed)))
        msg = CycleDone(cycle_id, tuple(summaries))
    elif kind == MsgType.ERROR:
        (code,) = r.unpack(_ERR)
        msg = Error(code, r.text())
    elif kind == MsgType.HEARTBEAT:
        msg = Heartbeat()
    else:
        msg = Shutdown()
    r.done()
    return msg


# -- framing ----------------------------------------------------------------


def encode(msg: Message) -> bytes:
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLargeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    prefix = _PREFIX.pack(MAGIC, int(msg.type), len(payload))
    crc = zlib.crc32(prefix[4:])
    crc = zlib.crc32(payload, crc)
    return prefix + payload + _CRC.pack(crc)


def _parse_prefix(buf) -> tuple[MsgType, int]:
    magic, kind, length = _PREFIX.unpack(bytes(buf[: _PREFIX.size]))
    if magic != MAGIC:
        raise BadFrameMagicError(f"bad frame magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise FrameTooLargeError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise UnknownMessageTypeError(f"unknown message type {kind}") from None
    return kind, length


def decode_frame(data: bytes) -> tuple[Message, int]:
    """Decode the frame at the start of ``data``; return it and bytes consumed."""
    if len(data) < _PREFIX.size:
        raise TruncatedFrameError(f"{len(data)} bytes is shorter than a frame header")
    kind, length = _parse_prefix(data)
    end = _PREFIX.size + length + _CRC.size
    if len(data) < end:
        raise TruncatedFrameError(f"frame needs {end} bytes, got {len(data)}")
    (crc,) = _CRC.unpack(bytes(data[end - _CRC.size : end]))
    if zlib.crc32(bytes(data[4 : end - _CRC.size])) != crc:
        raise FrameChecksumError("frame CRC mismatch")
    return decode_payload(kind, bytes(data[_PREFIX.size : end - _CRC.size])), end


def decode(data: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, used = decode_frame(data)
    if used != len(data):
        raise MalformedPayloadError(f"{len(data) - used} bytes after the frame")
    return msg


def experience_frames(cycle_id: int, records: np.ndarray, chunk: int = CHUNK_RECORDS) -> list[Experiences]:
    return [Experiences(cycle_id, records[i : i + chunk]) for i in range(0, len(records), chunk)]


# -- connection -------------------------------------------------------------


class Connection:
    """A framed, heartbeating message stream over a connected socket.

    ``send`` is safe to call from several threads. ``recv`` hides
    heartbeats and raises :class:`PeerTimeoutError` once nothing at all
    has arrived for ``peer_timeout`` seconds.
    """

    def __init__(
        self,
        sock: socket.socket,
        heartbeat_interval: float = HEARTBEAT_INTERVAL,
        peer_timeout: float = PEER_TIMEOUT,
    ):
        self.sock = sock
        self.heartbeat_interval = heartbeat_interval
        self.peer_timeout = peer_timeout
        self._send_lock = threading.Lock()
        self._last_sent = time.monotonic()
        self._last_recv = time.monotonic()
        self._closed = threading.Event()
        self._hb_thread: threading.Thread | None = None
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def start_heartbeat(self) -> None:
        if self._hb_thread is None:
            self._hb_thread = threading.Thread(target=self._heartbeat_loop, daemon=True, name="xrl-heartbeat")
            self._hb_thread.start()

    def _heartbeat_loop(self) -> None:
        tick = min(self.heartbeat_interval, 1.0) / 2
        while not self._closed.wait(tick):
            if time.monotonic() - self._last_sent >= self.heartbeat_interval:
                try:
                    self.send(Heartbeat())
                except (OSError, ProtocolError):
                    return

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, msg: Message) -> None:
        data = encode(msg)
        with self._send_lock:
            if self._closed.is_set():
                raise ConnectionClosedError("send on a closed connection")
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self._closed.set()
                raise ConnectionClosedError(f"send failed: {exc}") from exc
            self._last_sent = time.monotonic()

    def _read_exact(self, n: int) -> bytes:
        parts, got = [], 0
        while got < n:
            remaining = self.peer_timeout - (time.monotonic() - self._last_recv)
            if remaining <= 0:
                raise PeerTimeoutError(f"peer silent for more than {self.peer_timeout} s")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except socket.timeout:
                continue
            except OSError as exc:
                self._closed.set()
                raise ConnectionClosedError(f"receive failed: {exc}") from exc
            if not chunk:
                self._closed.set()
                raise ConnectionClosedError("peer closed the connection")
            self._last_recv = time.monotonic()
            parts.append(chunk)
            got += len(chunk)
        return b"".join(parts)

    def recv_any(self) -> Message:
        """Next message, heartbeats included."""
        head = self._read_exact(_PREFIX.size)
        _, length = _parse_prefix(head)
        rest = self._read_exact(length + _CRC.size)
        msg, _ = decode_frame(head + rest)
        return msg

    def recv(self) -> Message:
        while True:
            msg = self.recv_any()
            if not isinstance(msg, Heartbeat):
                return msg

    def close(self) -> None:
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    """``host:port``, ``:port`` or ``host`` (default port)."""
    host, sep, port = text.rpartition(":")
    if not sep:
        return text or default_host, DEFAULT_PORT
    try:
        port_num = int(port)
    except ValueError:
        raise ValueError(f"bad port in {text!r}") from None
    if not 0 <= port_num < 65536:
        raise ValueError(f"port out of range in {text!r}")
    return host or default_host, port_num


# -- session state machine --------------------------------------------------


class State(IntEnum):
    CONNECTED = 0
    HELLO_SENT = 1
    IDLE = 2  # handshake done, no policy yet
    READY = 3  # holds a policy
    RUNNING = 4  # a cycle is in flight
    CLEAN_SHUTDOWN = 5
    CLOSED = 6


class Session:
    """Message-order rules shared by both ends of one connection.

    Feed every message, sent or received, with the role of its sender
    (``"master"`` or ``"minion"``). Out-of-order traffic raises
    :class:`ProtocolViolationError`; the machine itself does no I/O.
    """

    def __init__(self):
        self.state = State.CONNECTED
        self.cycle_id: int | None = None
        self.last_cycle_id = -1
        self.received = 0
        self.target = 0

    def _violation(self, sender: str, msg: Message):
        return ProtocolViolationError(f"{type(msg).__name__} from {sender} in state {self.state.name}")

    def feed(self, sender: str, msg: Message) -> State:
        if sender not in ("master", "minion"):
            raise ValueError(f"unknown sender role {sender!r}")
        s = self.state
        if s in (State.CLEAN_SHUTDOWN, State.CLOSED):
            raise self._violation(sender, msg)
        if isinstance(msg, Heartbeat):
            return s
        if isinstance(msg, Error):
            if s in (State.CONNECTED, State.HELLO_SENT):
                self.state = State.CLOSED
            elif s == State.RUNNING and sender == "minion":
                self.cycle_id = None
                self.state = State.READY
            return self.state
        if s == State.CONNECTED and sender == "minion" and isinstance(msg, Hello):
            self.state = State.HELLO_SENT
        elif s == State.HELLO_SENT and sender == "master" and isinstance(msg, Hello):
            self.state = State.IDLE
        elif s in (State.IDLE, State.READY) and sender == "master" and isinstance(msg, Policy):
            self.state = State.READY
        elif s == State.READY and sender == "master" and isinstance(msg, RunCycle):
            if msg.cycle_id <= self.last_cycle_id:
                raise ProtocolViolationError(f"cycle id {msg.cycle_id} does not increase past {self.last_cycle_id}")
            self.cycle_id = self.last_cycle_id = msg.cycle_id
            self.received, self.target = 0, msg.experiences_target
            self.state = State.RUNNING
        elif s == State.RUNNING and sender == "minion" and isinstance(msg, Experiences):
            if msg.cycle_id != self.cycle_id:
                raise ProtocolViolationError(f"experiences for cycle {msg.cycle_id} while running {self.cycle_id}")
            self.received += msg.count
            if self.target and self.received > self.target:
                raise ProtocolViolationError(f"{self.received} experiences exceed target {self.target}")
        elif s == State.RUNNING and sender == "minion" and isinstance(msg, CycleDone):
            if msg.cycle_id != self.cycle_id:
                raise ProtocolViolationError(f"CYCLE_DONE for {msg.cycle_id} while running {self.cycle_id}")
            self.cycle_id = None
            self.state = State.READY
        elif s in (State.IDLE, State.READY, State.RUNNING) and sender == "master" and isinstance(msg, Shutdown):
            self.state = State.CLEAN_SHUTDOWN
        else:
            raise self._violation(sender, msg)
        return self.state


class SessionConnection:
    """A :class:`Connection` whose traffic is checked against a :class:`Session`."""

    def __init__(self, conn: Connection, role: str):
        if role not in ("master", "minion"):
            raise ValueError(f"unknown role {role!r}")
        self.conn = conn
        self.role = role
        self.peer = "minion" if role == "master" else "master"
        self.session = Session()

    @property
    def state(self) -> State:
        return self.session.state

    def send(self, msg: Message) -> None:
        self.session.feed(self.role, msg)
        self.conn.send(msg)

    def recv(self) -> Message:
        msg = self.conn.recv()
        self.session.feed(self.peer, msg)
        return msg

    def close(self) -> None:
        if self.session.state != State.CLEAN_SHUTDOWN:
            self.session.state = State.CLOSED
        self.conn.close()
