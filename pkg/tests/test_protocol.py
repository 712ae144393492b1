import socket
import struct
import threading
import time
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixtures import framed, fuzz_frames, synthetic_records
from xilrl.agent import PolicySnapshot, init_mlp, serialize
from xilrl.core import EXPERIENCE_DTYPE, EpisodeSummary
from xilrl.protocol import (
    FRAME_OVERHEAD,
    BadFrameMagicError,
    Connection,
    CycleDone,
    DecodeError,
    Error,
    ErrorCode,
    Experiences,
    FrameChecksumError,
    FrameTooLargeError,
    Heartbeat,
    Hello,
    MalformedPayloadError,
    MsgType,
    PeerTimeoutError,
    Policy,
    ProtocolViolationError,
    RunCycle,
    Session,
    SessionConnection,
    Shutdown,
    State,
    TruncatedFrameError,
    UnknownMessageTypeError,
    ConnectionClosedError,
    decode,
    decode_frame,
    encode,
    experience_frames,
    parse_address,
)


def policy_bytes(seed=0):
    return serialize(PolicySnapshot("PPO", init_mlp((8, 4, 1), np.random.default_rng(seed)), -0.69, 3))


SAMPLES = [
    Hello("m-1", "hil"),
    Policy(policy_bytes()),
    RunCycle(4, "train", 9200, 77),
    RunCycle(5, "validate", 0, 12345, (0.0, 300.0, 600.0), (0.2, 1.0, 0.0, 0.01, 5.0), 1000),
    CycleDone(4, (EpisodeSummary(30.0, 1500, -13.2, 50.1, 2.1, 3.3, 0.4, False), EpisodeSummary(60.0, 200, -21.0, 4.0, 0.1, 0.0, 0.0, True))),
    Heartbeat(),
    Error(ErrorCode.BAD_POLICY, "checksum mismatch é"),
    Shutdown(),
]


class TestFraming:
    def test_heartbeat_layout(self):
        frame = encode(Heartbeat())
        assert len(frame) == 4 + 1 + 4 + 4 == FRAME_OVERHEAD
        assert frame == b"XRL1" + bytes([6]) + b"\0\0\0\0" + struct.pack("<I", zlib.crc32(bytes([6, 0, 0, 0, 0])))

    def test_matches_hand_built_frame(self):
        assert encode(Shutdown()) == framed(8, b"")
        assert encode(Error(3, "x")) == framed(7, struct.pack("<HH", 3, 1) + b"x")

    @pytest.mark.parametrize("msg", SAMPLES, ids=lambda m: type(m).__name__)
    def test_round_trip(self, msg):
        assert decode(encode(msg)) == msg

    def test_full_cycle_of_experiences(self, rng):
        msg = Experiences(9, synthetic_records(rng, 9200))
        frame = encode(msg)
        assert len(frame) == FRAME_OVERHEAD + 12 + 9200 * 133
        assert decode(frame) == msg

    def test_chunking(self, rng):
        recs = synthetic_records(rng, 1300)
        chunks = experience_frames(2, recs)
        assert [c.count for c in chunks] == [512, 512, 276]
        assert np.concatenate([c.records for c in chunks]).tobytes() == recs.tobytes()

    def test_stream_of_frames(self):
        data = b"".join(encode(m) for m in SAMPLES)
        out, pos = [], 0
        while pos < len(data):
            msg, used = decode_frame(data[pos:])
            out.append(msg)
            pos += used
        assert out == SAMPLES

    def test_corrupted_payload_byte(self):
        frame = bytearray(encode(Hello("a", "mil")))
        frame[12] ^= 0x40
        with pytest.raises(FrameChecksumError):
            decode(bytes(frame))

    def test_bad_magic(self):
        with pytest.raises(BadFrameMagicError):
            decode(b"XRL2" + encode(Shutdown())[4:])

    def test_truncated(self):
        frame = encode(Hello("a", "mil"))
        for cut in (0, 5, len(frame) - 1):
            with pytest.raises(TruncatedFrameError):
                decode(frame[:cut])

    def test_unknown_type(self):
        with pytest.raises(UnknownMessageTypeError):
            decode(framed(42, b""))

    def test_declared_length_cap(self):
        with pytest.raises(FrameTooLargeError):
            decode(b"XRL1" + struct.pack("<BI", 4, 64 * 1024 * 1024 + 1))

    def test_trailing_bytes(self):
        with pytest.raises(MalformedPayloadError):
            decode(encode(Shutdown()) + b"\0")

    def test_inconsistent_record_count(self):
        with pytest.raises(MalformedPayloadError):
            decode(framed(4, struct.pack("<QI", 1, 3) + bytes(133)))

    def test_distinct_errors(self):
        kinds = {BadFrameMagicError, TruncatedFrameError, FrameChecksumError, UnknownMessageTypeError}
        assert len(kinds) == 4 and all(issubclass(k, DecodeError) for k in kinds)

    @given(st.binary(max_size=80))
    def test_noise_never_crashes(self, data):
        try:
            decode(data)
        except DecodeError:
            pass

    def test_fuzz(self):
        rng = np.random.default_rng(7)
        seeds = [encode(m) for m in SAMPLES]
        decoded = 0
        for data in fuzz_frames(rng, 3000, seeds):
            try:
                decode(data)
                decoded += 1
            except DecodeError:
                pass
        assert decoded > 0


class TestRunCycleValidation:
    def test_mode(self):
        with pytest.raises(ValueError):
            RunCycle(1, "explore", 10, 0)

    def test_weights(self):
        with pytest.raises(ValueError):
            RunCycle(1, "train", 10, 0, weights=(1.0, 2.0))


class TestAddress:
    def test_forms(self):
        assert parse_address("10.0.0.2:5000") == ("10.0.0.2", 5000)
        assert parse_address(":6000") == ("127.0.0.1", 6000)
        assert parse_address("bench") == ("bench", 47120)

    def test_bad_port(self):
        with pytest.raises(ValueError):
            parse_address("h:99999")


HAPPY = [
    ("minion", Hello("m", "mil")),
    ("master", Hello("master", "mil")),
    ("master", Policy(b"p")),
    ("master", RunCycle(1, "train", 600, 0)),
    ("minion", Experiences(1, np.zeros(512, EXPERIENCE_DTYPE))),
    ("minion", Heartbeat()),
    ("minion", Experiences(1, np.zeros(88, EXPERIENCE_DTYPE))),
    ("minion", CycleDone(1)),
    ("master", Policy(b"q")),
    ("master", RunCycle(2, "validate", 0, 1)),
    ("minion", CycleDone(2)),
    ("master", Shutdown()),
]


class TestSession:
    def test_happy_path(self):
        s = Session()
        for sender, msg in HAPPY:
            s.feed(sender, msg)
        assert s.state == State.CLEAN_SHUTDOWN

    def test_run_before_policy(self):
        s = Session()
        s.feed("minion", Hello("m", "mil"))
        s.feed("master", Hello("master", "mil"))
        with pytest.raises(ProtocolViolationError):
            s.feed("master", RunCycle(1, "train", 10, 0))

    def test_cycle_ids_increase(self):
        s = Session()
        for sender, msg in HAPPY[:8]:
            s.feed(sender, msg)
        s.feed("master", Policy(b"p"))
        with pytest.raises(ProtocolViolationError):
            s.feed("master", RunCycle(1, "train", 10, 0))

    def test_overdelivery(self):
        s = Session()
        for sender, msg in HAPPY[:4]:
            s.feed(sender, msg)
        with pytest.raises(ProtocolViolationError):
            s.feed("minion", Experiences(1, np.zeros(601, EXPERIENCE_DTYPE)))

    def test_wrong_cycle_id(self):
        s = Session()
        for sender, msg in HAPPY[:4]:
            s.feed(sender, msg)
        with pytest.raises(ProtocolViolationError):
            s.feed("minion", CycleDone(7))

    def test_minion_error_returns_to_ready(self):
        s = Session()
        for sender, msg in HAPPY[:4]:
            s.feed(sender, msg)
        assert s.feed("minion", Error(ErrorCode.ROLLOUT_FAILED, "boom")) == State.READY
        s.feed("master", RunCycle(2, "train", 10, 0))

    def test_nothing_after_shutdown(self):
        s = Session()
        for sender, msg in HAPPY:
            s.feed(sender, msg)
        with pytest.raises(ProtocolViolationError):
            s.feed("master", Policy(b"p"))

    @given(st.permutations(range(len(HAPPY))))
    def test_reordering_is_caught_or_harmless(self, order):
        s = Session()
        try:
            for i in order:
                s.feed(*HAPPY[i])
        except ProtocolViolationError:
            return
        # only orders equivalent to the script survive
        assert s.state == State.CLEAN_SHUTDOWN


@pytest.fixture
def pair():
    a, b = socket.socketpair()
    ca, cb = Connection(a), Connection(b)
    yield ca, cb
    ca.close()
    cb.close()


class TestConnection:
    def test_send_recv(self, pair, rng):
        a, b = pair
        msg = Experiences(3, synthetic_records(rng, 2000))
        t = threading.Thread(target=a.send, args=(msg,))
        t.start()
        assert b.recv() == msg
        t.join()

    def test_error_round_trip_keeps_connection(self, pair):
        a, b = pair
        a.send(Error(ErrorCode.BAD_POLICY, "bad"))
        assert b.recv() == Error(ErrorCode.BAD_POLICY, "bad")
        b.send(Policy(b"again"))
        assert a.recv() == Policy(b"again")

    def test_heartbeats_are_hidden(self):
        x, y = socket.socketpair()
        a, b = Connection(x, heartbeat_interval=0.05), Connection(y)
        a.start_heartbeat()
        time.sleep(0.2)
        assert b.recv_any() == Heartbeat()
        a.send(Shutdown())
        assert b.recv() == Shutdown()
        a.close()
        b.close()

    def test_peer_timeout(self):
        x, y = socket.socketpair()
        b = Connection(y, peer_timeout=0.2)
        with pytest.raises(PeerTimeoutError):
            b.recv()
        x.close()
        b.close()

    def test_heartbeat_keeps_alive(self):
        x, y = socket.socketpair()
        a, b = Connection(x, heartbeat_interval=0.05), Connection(y, peer_timeout=0.3)
        a.start_heartbeat()
        threading.Timer(0.6, a.send, args=(Shutdown(),)).start()
        assert b.recv() == Shutdown()
        a.close()
        b.close()

    def test_peer_close(self, pair):
        a, b = pair
        a.close()
        with pytest.raises(ConnectionClosedError):
            b.recv()

    def test_session_connection_blocks_bad_send(self, pair):
        a, _ = pair
        master = SessionConnection(a, "master")
        with pytest.raises(ProtocolViolationError):
            master.send(RunCycle(1, "train", 10, 0))


def test_message_types_are_stable():
    assert [int(m) for m in MsgType] == list(range(1, 9))
