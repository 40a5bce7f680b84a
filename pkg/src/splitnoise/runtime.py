"""Socket runtime for two-party split inference.

The edge side runs its partition locally, perturbs the cut-point
activation with freshly sampled noise, and ships only that perturbed
tensor over a length-prefixed binary frame.  The cloud side answers with
the predicted class and the logit vector.  Nothing about the noise — not
its presence, parameters, or order — ever crosses the link, and the
server keeps no state between requests beyond the loaded weights.

Frame layout (little-endian): magic ``SHRP``, version u8, kind u8,
payload length u32, payload.  Kinds: 0x01 activation request, 0x02
prediction response, 0x7F error.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping

import numpy as np

from . import network as net_mod
from .network import Split, run_cloud, run_edge
from .tensor import Tensor

WIRE_MAGIC = b"SHRP"
WIRE_VERSION = 1
KIND_ACTIVATION = 0x01
KIND_RESPONSE = 0x02
KIND_ERROR = 0x7F

HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024  # frames above this are refused outright


class FrameError(Exception):
    """Malformed frame; the connection can keep going."""


class FatalFrameError(FrameError):
    """Malformed frame that cannot be skipped (unknown remaining length)."""


class RemoteError(Exception):
    """The peer answered with an error frame."""


@dataclass(frozen=True)
class WireMessage:
    kind: int
    payload: bytes


def encode_message(msg: WireMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(msg.payload)} bytes exceeds the frame cap")
    return HEADER.pack(WIRE_MAGIC, WIRE_VERSION, msg.kind, len(msg.payload)) + msg.payload


def decode_message(data: bytes) -> WireMessage:
    """Strict parse of one complete frame from a byte string."""
    if len(data) < HEADER.size:
        raise FrameError("frame shorter than header")
    magic, version, kind, length = HEADER.unpack_from(data)
    if magic != WIRE_MAGIC:
        raise FrameError("bad magic")
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload of {length} bytes exceeds the frame cap")
    if len(data) != HEADER.size + length:
        raise FrameError("frame length does not match declared payload length")
    if kind not in (KIND_ACTIVATION, KIND_RESPONSE, KIND_ERROR):
        raise FrameError(f"unknown frame kind 0x{kind:02x}")
    return WireMessage(kind=kind, payload=data[HEADER.size :])


def activation_frame_bytes(shape) -> int:
    """Total bytes on the wire for an activation of the given shape."""
    numel = int(np.prod(shape))
    return HEADER.size + 1 + 4 * len(shape) + 4 * numel


def encode_activation(t: Tensor) -> bytes:
    if t.ndim < 1 or t.size < 1:
        raise FrameError("cannot encode an empty activation")
    if t.ndim > 255:
        raise FrameError("activation rank does not fit the wire format")
    head = struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.array.astype("<f4", copy=False).tobytes()


def decode_activation(payload: bytes) -> Tensor:
    if len(payload) < 1:
        raise FrameError("activation payload is empty")
    rank = payload[0]
    if rank < 1:
        raise FrameError("activation rank must be at least 1")
    need = 1 + 4 * rank
    if len(payload) < need:
        raise FrameError("activation payload truncated in extents")
    shape = struct.unpack_from(f"<{rank}I", payload, 1)
    if any(e < 1 for e in shape):
        raise FrameError("activation extents must be positive")
    numel = 1
    for e in shape:
        numel *= e
    if len(payload) != need + 4 * numel:
        raise FrameError("activation payload length does not match extents")
    arr = np.frombuffer(payload, dtype="<f4", offset=need).reshape(shape)
    if not np.isfinite(arr).all():
        raise FrameError("activation payload contains non-finite values")
    return Tensor(arr)


def encode_response(label: int, logits: np.ndarray) -> bytes:
    return struct.pack("<I", int(label)) + np.asarray(logits, dtype="<f4").tobytes()


def decode_response(payload: bytes) -> tuple[int, np.ndarray]:
    if len(payload) < 4 or (len(payload) - 4) % 4 != 0:
        raise FrameError("response payload has a bad length")
    (label,) = struct.unpack_from("<I", payload)
    logits = np.frombuffer(payload, dtype="<f4", offset=4)
    if logits.size < 1:
        raise FrameError("response carries no logits")
    return int(label), logits.copy()


def encode_error(reason: str) -> bytes:
    return reason.encode("utf-8", errors="replace")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            raise ConnectionError("peer closed the connection mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> WireMessage:
    """Read one frame; skippable garbage raises FrameError after the
    declared payload has been consumed, so the stream stays in sync."""
    header = _recv_exact(sock, HEADER.size)
    magic, version, kind, length = HEADER.unpack_from(header)
    if length > MAX_PAYLOAD:
        raise FatalFrameError(f"declared payload of {length} bytes exceeds the frame cap")
    payload = _recv_exact(sock, length) if length else b""
    if magic != WIRE_MAGIC:
        raise FrameError("bad magic")
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    if kind not in (KIND_ACTIVATION, KIND_RESPONSE, KIND_ERROR):
        raise FrameError(f"unknown frame kind 0x{kind:02x}")
    return WireMessage(kind=kind, payload=payload)


# ---------------------------------------------------------------------------
# link simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkSimulator:
    """Deterministic transmission delay from message size alone."""

    bandwidth_bytes_per_s: float
    latency_ms: float = 0.0

    def delay_s(self, nbytes: int) -> float:
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("bandwidth must be positive")
        return self.latency_ms / 1000.0 + nbytes / self.bandwidth_bytes_per_s


# ---------------------------------------------------------------------------
# cloud server
# ---------------------------------------------------------------------------


class CloudServer:
    """Threaded TCP server running the cloud partition.

    The handler is stateless: each response is a pure function of the
    request frame and the loaded (frozen) weights, so replaying a
    recorded request yields a byte-identical response.
    """

    def __init__(self, split: Split, weights: Mapping[str, Tensor], host="127.0.0.1", port=0):
        self.split = split
        self.weights = weights
        expected = split.activation_shape
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                while True:
                    try:
                        msg = read_frame(sock)
                    except FatalFrameError as exc:
                        _try_send(sock, WireMessage(KIND_ERROR, encode_error(str(exc))))
                        return
                    except FrameError as exc:
                        _try_send(sock, WireMessage(KIND_ERROR, encode_error(str(exc))))
                        continue
                    except (ConnectionError, OSError):
                        return
                    reply = outer._respond(msg, expected)
                    if not _try_send(sock, reply):
                        return

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self._thread: threading.Thread | None = None

    def _respond(self, msg: WireMessage, expected_shape) -> WireMessage:
        if msg.kind != KIND_ACTIVATION:
            return WireMessage(KIND_ERROR, encode_error(f"unexpected frame kind 0x{msg.kind:02x}"))
        try:
            activation = decode_activation(msg.payload)
        except FrameError as exc:
            return WireMessage(KIND_ERROR, encode_error(str(exc)))
        if activation.shape != expected_shape:
            return WireMessage(
                KIND_ERROR,
                encode_error(
                    f"activation shape {activation.shape} does not match cut "
                    f"{self.split.cut_index} (expected {expected_shape})"
                ),
            )
        logits = run_cloud(self.split, self.weights, activation)
        label = int(np.argmax(logits.array))
        return WireMessage(KIND_RESPONSE, encode_response(label, logits.array))

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> "CloudServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def _try_send(sock: socket.socket, msg: WireMessage) -> bool:
    try:
        sock.sendall(encode_message(msg))
        return True
    except (ConnectionError, OSError):
        return False


# ---------------------------------------------------------------------------
# edge client
# ---------------------------------------------------------------------------


@dataclass
class InferenceTiming:
    edge_ms: float
    sample_ms: float
    transmit_ms: float
    roundtrip_ms: float


@dataclass
class RemoteResult:
    label: int
    logits: np.ndarray
    timing: InferenceTiming


class EdgeClient:
    """Edge half of a split inference session.

    Holds one TCP connection; every ``infer`` call samples fresh noise
    from the collection (unless ``zero_noise``), so two identical inputs
    put different bytes on the wire.
    """

    def __init__(
        self,
        split: Split,
        weights: Mapping[str, Tensor],
        collection=None,
        *,
        address: tuple[str, int],
        link: LinkSimulator | None = None,
        rng=None,
        zero_noise: bool = False,
        timeout: float = 30.0,
    ):
        from . import sampler as sampler_mod

        if not zero_noise and collection is None:
            raise ValueError("a collection is required unless zero_noise is set")
        if collection is not None:
            expected = net_mod.network_hash(split.net, weights)
            collection.check_compatible(expected, split.cut_index, split.activation_shape)
        self.split = split
        self.weights = weights
        self.collection = collection
        self.link = link
        self.zero_noise = zero_noise
        self.rng = rng if rng is not None else sampler_mod.make_rng(None)
        self._sampler = sampler_mod
        self._sock = socket.create_connection(address, timeout=timeout)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def infer(self, x: Tensor) -> RemoteResult:
        t0 = time.perf_counter()
        activation = run_edge(self.split, self.weights, x)
        t1 = time.perf_counter()
        if self.zero_noise:
            noisy = activation
        else:
            sampled = self._sampler.sample_noise(self.collection, self.rng)
            noisy = self._sampler.add_noise(activation, sampled)
        t2 = time.perf_counter()
        frame = encode_message(WireMessage(KIND_ACTIVATION, encode_activation(noisy)))
        if self.link is not None:
            time.sleep(self.link.delay_s(len(frame)))
        self._sock.sendall(frame)
        t3 = time.perf_counter()
        reply = read_frame(self._sock)
        t4 = time.perf_counter()
        if reply.kind == KIND_ERROR:
            raise RemoteError(reply.payload.decode("utf-8", errors="replace"))
        label, logits = decode_response(reply.payload)
        timing = InferenceTiming(
            edge_ms=(t1 - t0) * 1000.0,
            sample_ms=(t2 - t1) * 1000.0,
            transmit_ms=(t3 - t2) * 1000.0,
            roundtrip_ms=(t4 - t2) * 1000.0,
        )
        return RemoteResult(label=label, logits=logits, timing=timing)


def infer_remote(
    split: Split,
    weights: Mapping[str, Tensor],
    collection,
    x: Tensor,
    address: tuple[str, int],
    **kwargs,
) -> RemoteResult:
    """One-shot remote inference over a fresh connection."""
    with EdgeClient(split, weights, collection, address=address, **kwargs) as client:
        return client.infer(x)
