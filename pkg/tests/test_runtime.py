"""Wire protocol and two-party inference runtime tests.

Covers the frame codec (strict parsing, resync after garbage, size
caps), the activation/response payload codecs, the deterministic link
simulator, and a live localhost server: correctness against local
inference, statelessness, error-frame behaviour, and the privacy
property that only the *perturbed* activation ever crosses the link.
"""

from __future__ import annotations

import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitnoise import collector as C
from splitnoise import datasets as D
from splitnoise import network as N
from splitnoise import runtime as R
from splitnoise import sampler as S
from splitnoise.tensor import Tensor

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def one_entry_collection(trained, b: float, seed: int = 123) -> C.DistributionCollection:
    """A valid collection holding a single Laplace(0, b) distribution."""
    rng = np.random.Generator(np.random.Philox(seed))
    shape = trained.split.activation_shape
    fake = rng.normal(size=shape).astype(np.float32)
    entry = C.DistributionEntry(
        params=C.LaplaceParams(mu=0.0, b=b),
        order=C.descending_order(Tensor(fake)),
        accuracy=0.97,
        sse=0.01,
        seed=seed,
    )
    coll = C.DistributionCollection(
        network_hash=N.network_hash(trained.split.net, trained.weights),
        cut_index=trained.split.cut_index,
        noise_shape=shape,
    )
    coll.append(entry)
    return coll


def sample_inputs(trained, k: int = 5) -> list[Tensor]:
    xin = D.to_model_input(trained.test.images[:k])
    return [Tensor(xin[i]) for i in range(k)]


class _RecordingSocket:
    """Socket proxy that keeps a copy of every byte sent."""

    def __init__(self, inner: socket.socket):
        self._inner = inner
        self.sent = bytearray()

    def sendall(self, data):
        self.sent.extend(data)
        return self._inner.sendall(data)

    def recv(self, n):
        return self._inner.recv(n)

    def close(self):
        return self._inner.close()


@pytest.fixture(scope="module")
def server(trained):
    with R.CloudServer(trained.split, trained.weights) as srv:
        yield srv


# ---------------------------------------------------------------------------
# frame codec
# ---------------------------------------------------------------------------


class TestFrameCodec:
    def test_header_layout_is_pinned(self):
        frame = R.encode_message(R.WireMessage(R.KIND_ACTIVATION, b"abc"))
        assert frame == b"SHRP" + bytes([1, R.KIND_ACTIVATION]) + struct.pack("<I", 3) + b"abc"

    @pytest.mark.parametrize("kind", [R.KIND_ACTIVATION, R.KIND_RESPONSE, R.KIND_ERROR])
    def test_round_trip_each_kind(self, kind):
        msg = R.WireMessage(kind, b"\x00\x01payload\xff")
        out = R.decode_message(R.encode_message(msg))
        assert out == msg

    def test_empty_payload_round_trips(self):
        msg = R.WireMessage(R.KIND_ERROR, b"")
        assert R.decode_message(R.encode_message(msg)) == msg

    def test_bad_magic_rejected(self):
        frame = b"XHRP" + bytes([1, 1]) + struct.pack("<I", 0)
        with pytest.raises(R.FrameError, match="magic"):
            R.decode_message(frame)

    def test_bad_version_rejected(self):
        frame = b"SHRP" + bytes([9, 1]) + struct.pack("<I", 0)
        with pytest.raises(R.FrameError, match="version"):
            R.decode_message(frame)

    def test_unknown_kind_rejected(self):
        frame = b"SHRP" + bytes([1, 0x42]) + struct.pack("<I", 0)
        with pytest.raises(R.FrameError, match="kind"):
            R.decode_message(frame)

    def test_short_frame_rejected(self):
        with pytest.raises(R.FrameError, match="shorter"):
            R.decode_message(b"SHRP\x01")

    def test_length_mismatch_rejected(self):
        good = R.encode_message(R.WireMessage(R.KIND_ERROR, b"abc"))
        with pytest.raises(R.FrameError, match="length"):
            R.decode_message(good + b"x")
        with pytest.raises(R.FrameError, match="length"):
            R.decode_message(good[:-1])

    def test_oversize_payload_refused_on_encode(self):
        big = bytes(R.MAX_PAYLOAD + 1)
        with pytest.raises(R.FrameError, match="cap"):
            R.encode_message(R.WireMessage(R.KIND_ACTIVATION, big))

    def test_oversize_declared_length_refused_on_decode(self):
        frame = b"SHRP" + bytes([1, 1]) + struct.pack("<I", R.MAX_PAYLOAD + 1)
        with pytest.raises(R.FrameError, match="cap"):
            R.decode_message(frame)

    @settings(max_examples=200, deadline=None)
    @given(data=st.binary(max_size=64))
    def test_fuzz_decode_never_crashes(self, data):
        try:
            msg = R.decode_message(data)
        except R.FrameError:
            return
        assert R.encode_message(msg) == data

    @settings(max_examples=100, deadline=None)
    @given(
        kind=st.sampled_from([R.KIND_ACTIVATION, R.KIND_RESPONSE, R.KIND_ERROR]),
        payload=st.binary(max_size=512),
    )
    def test_fuzz_round_trip(self, kind, payload):
        msg = R.WireMessage(kind, payload)
        assert R.decode_message(R.encode_message(msg)) == msg


class TestStreamReading:
    def _pair(self):
        a, b = socket.socketpair()
        a.settimeout(5)
        b.settimeout(5)
        return a, b

    def test_back_to_back_frames_stay_in_sync(self):
        a, b = self._pair()
        try:
            first = R.WireMessage(R.KIND_ERROR, b"one")
            second = R.WireMessage(R.KIND_RESPONSE, b"\x01\x00\x00\x00" + b"\x00" * 4)
            a.sendall(R.encode_message(first) + R.encode_message(second))
            assert R.read_frame(b) == first
            assert R.read_frame(b) == second
        finally:
            a.close()
            b.close()

    def test_garbage_frame_is_skipped_then_resyncs(self):
        a, b = self._pair()
        try:
            # well-formed length, bad magic: skippable garbage
            garbage = b"JUNK" + bytes([1, 1]) + struct.pack("<I", 4) + b"\xde\xad\xbe\xef"
            good = R.WireMessage(R.KIND_ERROR, b"fine")
            a.sendall(garbage + R.encode_message(good))
            with pytest.raises(R.FrameError, match="magic"):
                R.read_frame(b)
            assert R.read_frame(b) == good
        finally:
            a.close()
            b.close()

    def test_oversize_length_is_fatal(self):
        a, b = self._pair()
        try:
            a.sendall(b"SHRP" + bytes([1, 1]) + struct.pack("<I", R.MAX_PAYLOAD + 1))
            with pytest.raises(R.FatalFrameError, match="cap"):
                R.read_frame(b)
        finally:
            a.close()
            b.close()

    def test_peer_close_mid_frame(self):
        a, b = self._pair()
        try:
            a.sendall(b"SHRP" + bytes([1, 1]))  # partial header
            a.close()
            with pytest.raises(ConnectionError, match="mid-frame"):
                R.read_frame(b)
        finally:
            b.close()


# ---------------------------------------------------------------------------
# payload codecs
# ---------------------------------------------------------------------------


class TestActivationCodec:
    @pytest.mark.parametrize("shape", [(400,), (16, 5, 5), (3, 2, 2, 2)])
    def test_round_trip_is_bit_exact(self, shape):
        rng = np.random.Generator(np.random.Philox(7))
        t = Tensor(rng.normal(size=shape).astype(np.float32))
        out = R.decode_activation(R.encode_activation(t))
        assert out.shape == t.shape
        assert np.array_equal(out.array, t.array)

    def test_frame_size_accounting(self):
        t = Tensor(np.zeros((16, 5, 5), np.float32))
        frame = R.encode_message(R.WireMessage(R.KIND_ACTIVATION, R.encode_activation(t)))
        assert len(frame) == R.activation_frame_bytes((16, 5, 5))

    def test_round_trip_at_max_ndarray_rank(self):
        tall = Tensor(np.full((1,) * 64, 2.5, np.float32))
        out = R.decode_activation(R.encode_activation(tall))
        assert out.shape == tall.shape
        assert np.array_equal(out.array, tall.array)

    def test_empty_payload_rejected(self):
        with pytest.raises(R.FrameError, match="empty"):
            R.decode_activation(b"")

    def test_zero_rank_rejected(self):
        with pytest.raises(R.FrameError, match="rank"):
            R.decode_activation(b"\x00")

    def test_truncated_extents_rejected(self):
        with pytest.raises(R.FrameError, match="extents"):
            R.decode_activation(b"\x02" + struct.pack("<I", 4))

    def test_zero_extent_rejected(self):
        payload = b"\x01" + struct.pack("<I", 0)
        with pytest.raises(R.FrameError, match="positive"):
            R.decode_activation(payload)

    def test_payload_length_mismatch_rejected(self):
        payload = b"\x01" + struct.pack("<I", 2) + b"\x00" * 4  # promises 2 floats, ships 1
        with pytest.raises(R.FrameError, match="match"):
            R.decode_activation(payload)

    def test_nonfinite_values_rejected(self):
        bad = b"\x01" + struct.pack("<I", 1) + struct.pack("<f", np.inf)
        with pytest.raises(R.FrameError, match="non-finite"):
            R.decode_activation(bad)


class TestResponseCodec:
    def test_round_trip(self):
        logits = np.linspace(-2, 2, 10, dtype=np.float32)
        label, out = R.decode_response(R.encode_response(7, logits))
        assert label == 7
        assert np.array_equal(out, logits)

    @pytest.mark.parametrize("payload", [b"", b"\x01\x02\x03", b"\x00" * 7])
    def test_bad_lengths_rejected(self, payload):
        with pytest.raises(R.FrameError, match="length"):
            R.decode_response(payload)

    def test_missing_logits_rejected(self):
        with pytest.raises(R.FrameError, match="logits"):
            R.decode_response(struct.pack("<I", 3))


# ---------------------------------------------------------------------------
# link simulation
# ---------------------------------------------------------------------------


class TestLinkSimulator:
    def test_delay_formula(self):
        link = R.LinkSimulator(bandwidth_bytes_per_s=1000.0, latency_ms=5.0)
        assert link.delay_s(500) == pytest.approx(0.005 + 0.5)

    def test_delay_grows_with_size(self):
        link = R.LinkSimulator(bandwidth_bytes_per_s=1e6)
        sizes = [0, 100, 10_000, 1_000_000]
        delays = [link.delay_s(n) for n in sizes]
        assert delays == sorted(delays)
        assert delays[-1] > delays[0]

    def test_slower_link_waits_longer(self):
        nbytes = R.activation_frame_bytes((400,))
        fast = R.LinkSimulator(bandwidth_bytes_per_s=100e6, latency_ms=1.0)
        starved = R.LinkSimulator(bandwidth_bytes_per_s=16e3, latency_ms=200.0)
        assert starved.delay_s(nbytes) > fast.delay_s(nbytes)

    @pytest.mark.parametrize("bw", [0.0, -5.0])
    def test_bad_bandwidth_rejected(self, bw):
        with pytest.raises(ValueError, match="bandwidth"):
            R.LinkSimulator(bandwidth_bytes_per_s=bw).delay_s(10)


# ---------------------------------------------------------------------------
# live server + client
# ---------------------------------------------------------------------------


class TestRemoteInference:
    def test_zero_noise_matches_local(self, trained, server):
        xs = sample_inputs(trained)
        with R.EdgeClient(trained.split, trained.weights, None,
                          address=server.address, zero_noise=True) as client:
            for x in xs:
                local = N.run_cloud(trained.split, trained.weights,
                                    N.run_edge(trained.split, trained.weights, x))
                got = client.infer(x)
                assert got.label == int(np.argmax(local.array))
                assert np.array_equal(got.logits, local.array)

    def test_zero_noise_is_deterministic(self, trained, server):
        x = sample_inputs(trained, 1)[0]
        with R.EdgeClient(trained.split, trained.weights, None,
                          address=server.address, zero_noise=True) as client:
            first = client.infer(x)
            second = client.infer(x)
        assert np.array_equal(first.logits, second.logits)

    def test_fresh_noise_each_call(self, trained, server):
        coll = one_entry_collection(trained, b=0.5)
        x = sample_inputs(trained, 1)[0]
        with R.EdgeClient(trained.split, trained.weights, coll,
                          address=server.address, rng=S.make_rng(3)) as client:
            first = client.infer(x)
            second = client.infer(x)
        assert not np.array_equal(first.logits, second.logits)

    def test_small_noise_keeps_the_label(self, trained, server):
        coll = one_entry_collection(trained, b=0.01)
        xs = sample_inputs(trained)
        with R.EdgeClient(trained.split, trained.weights, coll,
                          address=server.address, rng=S.make_rng(4)) as client:
            for x in xs:
                clean = N.run_cloud(trained.split, trained.weights,
                                    N.run_edge(trained.split, trained.weights, x))
                assert client.infer(x).label == int(np.argmax(clean.array))

    def test_wire_carries_perturbed_activation_only(self, trained, server):
        coll = one_entry_collection(trained, b=100.0)
        x = sample_inputs(trained, 1)[0]
        clean = N.run_edge(trained.split, trained.weights, x)
        with R.EdgeClient(trained.split, trained.weights, coll,
                          address=server.address, rng=S.make_rng(5)) as client:
            rec = _RecordingSocket(client._sock)
            client._sock = rec
            client.infer(x)
        msg = R.decode_message(bytes(rec.sent))
        assert msg.kind == R.KIND_ACTIVATION
        wire = R.decode_activation(msg.payload)
        assert wire.shape == clean.shape
        diff = np.abs(wire.array - clean.array)
        # mean |Laplace(0, 100)| is 100; the clean activation is O(1)
        assert diff.mean() > 10.0
        assert not np.array_equal(wire.array, clean.array)

    def test_server_is_stateless_under_replay(self, trained, server):
        x = sample_inputs(trained, 1)[0]
        a = N.run_edge(trained.split, trained.weights, x)
        frame = R.encode_message(R.WireMessage(R.KIND_ACTIVATION, R.encode_activation(a)))
        with socket.create_connection(server.address, timeout=10) as sock:
            sock.sendall(frame)
            first = R.read_frame(sock)
            sock.sendall(frame)
            second = R.read_frame(sock)
        assert first.kind == R.KIND_RESPONSE
        assert first == second

    def test_connection_survives_garbage_frame(self, trained, server):
        x = sample_inputs(trained, 1)[0]
        a = N.run_edge(trained.split, trained.weights, x)
        good = R.encode_message(R.WireMessage(R.KIND_ACTIVATION, R.encode_activation(a)))
        garbage = b"JUNK" + bytes([1, 1]) + struct.pack("<I", 2) + b"xy"
        with socket.create_connection(server.address, timeout=10) as sock:
            sock.sendall(garbage)
            err = R.read_frame(sock)
            assert err.kind == R.KIND_ERROR
            assert b"magic" in err.payload
            sock.sendall(good)
            assert R.read_frame(sock).kind == R.KIND_RESPONSE

    def test_oversize_frame_closes_connection(self, trained, server):
        header = b"SHRP" + bytes([1, 1]) + struct.pack("<I", R.MAX_PAYLOAD + 1)
        with socket.create_connection(server.address, timeout=10) as sock:
            sock.sendall(header)
            err = R.read_frame(sock)
            assert err.kind == R.KIND_ERROR
            assert b"cap" in err.payload
            assert sock.recv(1) == b""  # server hung up

    def test_wrong_shape_activation_rejected(self, trained, server):
        bogus = Tensor(np.zeros((7,), np.float32))
        frame = R.encode_message(R.WireMessage(R.KIND_ACTIVATION, R.encode_activation(bogus)))
        with socket.create_connection(server.address, timeout=10) as sock:
            sock.sendall(frame)
            err = R.read_frame(sock)
        assert err.kind == R.KIND_ERROR
        assert b"does not match cut" in err.payload

    def test_unexpected_kind_rejected(self, trained, server):
        frame = R.encode_message(R.WireMessage(R.KIND_RESPONSE, b"\x00" * 8))
        with socket.create_connection(server.address, timeout=10) as sock:
            sock.sendall(frame)
            err = R.read_frame(sock)
        assert err.kind == R.KIND_ERROR
        assert b"unexpected frame kind" in err.payload

    def test_client_raises_remote_error(self, trained, server):
        # a client cut differently from the server ships the wrong shape
        other = N.make_split(trained.net, 2)
        x = sample_inputs(trained, 1)[0]
        with R.EdgeClient(other, trained.weights, None,
                          address=server.address, zero_noise=True) as client:
            with pytest.raises(R.RemoteError, match="does not match cut"):
                client.infer(x)

    def test_mismatched_collection_refused_before_connecting(self, trained):
        coll = one_entry_collection(trained, b=1.0)
        coll.network_hash = bytes(32)
        with pytest.raises(C.CollectionMismatchError, match="different network"):
            R.EdgeClient(trained.split, trained.weights, coll,
                         address=("127.0.0.1", 1))

    def test_collection_required_unless_zero_noise(self, trained):
        with pytest.raises(ValueError, match="collection"):
            R.EdgeClient(trained.split, trained.weights, None,
                         address=("127.0.0.1", 1))

    def test_one_shot_helper(self, trained, server):
        coll = one_entry_collection(trained, b=0.01)
        x = sample_inputs(trained, 1)[0]
        clean = N.run_cloud(trained.split, trained.weights,
                            N.run_edge(trained.split, trained.weights, x))
        got = R.infer_remote(trained.split, trained.weights, coll, x,
                             address=server.address, rng=S.make_rng(6))
        assert got.label == int(np.argmax(clean.array))
        assert got.logits.shape == (10,)

    def test_timing_fields_are_populated(self, trained, server):
        x = sample_inputs(trained, 1)[0]
        link = R.LinkSimulator(bandwidth_bytes_per_s=1e9, latency_ms=40.0)
        with R.EdgeClient(trained.split, trained.weights, None,
                          address=server.address, zero_noise=True, link=link) as client:
            t = client.infer(x).timing
        assert t.edge_ms >= 0 and t.sample_ms >= 0
        assert t.transmit_ms >= 20.0  # the simulated 40 ms latency dominates
        assert t.roundtrip_ms >= t.transmit_ms
