"""Round orchestration: transports, dropout plans, instrumented rounds.

Every inter-party message crosses a transport as a length-prefixed frame,
with bytes tallied at both endpoints (relay costs are attributed to the
endpoints, not to whoever carries the frame).  Frames are recorded in
send order into a transcript whose canonical bytes exclude wall-clock
measurements, so two runs with the same seed produce the same digest
regardless of transport.

Dropouts strike after the masked models are uploaded: victims take part
in the offline and upload phases but never answer during recovery.

Wall measurements are taken per party and phase in this one-process
simulation, so per-phase totals are sums over parties rather than the
elapsed time of a real deployment.  The timeline turns those totals into
two arithmetic estimates: a serial one, and a pipelined one where the
offline phase runs concurrently with the (configurable) training delay.
"""

from __future__ import annotations

import hashlib
import json
import socket
import struct
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .baselines import (
    PairwiseMaskServer,
    PairwiseMaskUser,
    PairwiseVariant,
    complete_graph_variant,
    decode_secret_share_message,
    decode_share_response,
    encode_secret_share_message,
    encode_share_response,
    sparse_graph_variant,
)
from .coding import (
    EncodedMaskShare,
    decode_share_payload,
    encode_share_payload,
    segment_length,
)
from .config import ProtocolConfig, choose_recovery_quorum
from .costs import (
    PHASE_OFFLINE,
    PHASE_RECOVERY,
    PHASE_TRAINING,
    PHASE_UPLOAD,
    SERVER_PARTY,
    CostMeter,
    CostReport,
    user_party,
)
from .errors import (
    ConfigError,
    InsufficientSharesError,
    RecoveryFailedError,
    TranscriptError,
)
from .field import (
    DEFAULT_MODULUS,
    FieldVector,
    QuantizationScheme,
    SeedStream,
    quantize,
    vector_sum,
)
from .lightsecagg import MaskingUser, RecoveryServer, build_matrix

PROTOCOL_LIGHTSECAGG = "LightSecAgg"
PROTOCOL_SECAGG = "SecAgg"
PROTOCOL_SECAGG_PLUS = "SecAggPlus"
PROTOCOLS = (PROTOCOL_LIGHTSECAGG, PROTOCOL_SECAGG, PROTOCOL_SECAGG_PLUS)

PIPELINE_NONOVERLAPPED = "NonOverlapped"
PIPELINE_OVERLAPPED = "Overlapped"
PIPELINES = (PIPELINE_NONOVERLAPPED, PIPELINE_OVERLAPPED)

SERVER_ID = 0

KIND_MASK_SHARE = "mask_share"
KIND_PUBLIC_KEY = "public_key"
KIND_KEY_TABLE = "key_table"
KIND_SECRET_SHARES = "secret_shares"
KIND_MASKED_MODEL = "masked_model"
KIND_SURVIVOR_SET = "survivor_set"
KIND_AGGREGATE_SHARE = "aggregate_share"
KIND_SHARE_RESPONSE = "share_response"


# ---------------------------------------------------------------------------
# Envelopes and payload codecs
# ---------------------------------------------------------------------------

FRAME_PREFIX = struct.Struct(">I")
_ENVELOPE_HEADER = struct.Struct("<III")  # sender, recipient, kind length
_VECTOR_HEADER = struct.Struct("<II")  # element count, modulus
_ID_HEADER = struct.Struct("<I")
_KEY_ENTRY = struct.Struct("<IQ")


@dataclass(frozen=True)
class Envelope:
    """One protocol message in flight.  Party 0 is the server."""

    sender: int
    recipient: int
    kind: str
    payload: bytes


def encode_envelope(env: Envelope) -> bytes:
    kind = env.kind.encode("ascii")
    return (
        _ENVELOPE_HEADER.pack(env.sender, env.recipient, len(kind))
        + kind
        + env.payload
    )


def decode_envelope(body: bytes) -> Envelope:
    if len(body) < _ENVELOPE_HEADER.size:
        raise TranscriptError("envelope shorter than its header")
    sender, recipient, klen = _ENVELOPE_HEADER.unpack_from(body)
    end = _ENVELOPE_HEADER.size + klen
    if len(body) < end:
        raise TranscriptError("envelope kind field runs past the body")
    kind = body[_ENVELOPE_HEADER.size : end].decode("ascii")
    return Envelope(sender, recipient, kind, bytes(body[end:]))


def frame_bytes(env: Envelope) -> bytes:
    body = encode_envelope(env)
    return FRAME_PREFIX.pack(len(body)) + body


def frame_length(env: Envelope) -> int:
    return (
        FRAME_PREFIX.size
        + _ENVELOPE_HEADER.size
        + len(env.kind)
        + len(env.payload)
    )


def encode_vector(vec: FieldVector) -> bytes:
    return _VECTOR_HEADER.pack(len(vec), vec.modulus) + vec.values.astype(
        "<u4"
    ).tobytes()


def decode_vector(data: bytes, modulus: int) -> FieldVector:
    if len(data) < _VECTOR_HEADER.size:
        raise TranscriptError("vector payload shorter than its header")
    count, q = _VECTOR_HEADER.unpack_from(data)
    if q != modulus:
        raise TranscriptError(f"vector modulus {q} != expected {modulus}")
    if len(data) != _VECTOR_HEADER.size + 4 * count:
        raise TranscriptError("vector payload length disagrees with header")
    values = np.frombuffer(data, dtype="<u4", offset=_VECTOR_HEADER.size)
    if values.size and int(values.max()) >= modulus:
        raise TranscriptError("vector payload holds non-canonical elements")
    return FieldVector(values.astype(np.int64), modulus)


def encode_id_list(ids: Sequence[int]) -> bytes:
    return _ID_HEADER.pack(len(ids)) + struct.pack(f"<{len(ids)}I", *ids)


def decode_id_list(data: bytes) -> list[int]:
    if len(data) < _ID_HEADER.size:
        raise TranscriptError("id list payload shorter than its header")
    (count,) = _ID_HEADER.unpack_from(data)
    if len(data) != _ID_HEADER.size + 4 * count:
        raise TranscriptError("id list payload length disagrees with header")
    return list(struct.unpack_from(f"<{count}I", data, _ID_HEADER.size))


def encode_key_table(table: Mapping[int, int]) -> bytes:
    parts = [_ID_HEADER.pack(len(table))]
    for uid in sorted(table):
        parts.append(_KEY_ENTRY.pack(uid, table[uid]))
    return b"".join(parts)


def decode_key_table(data: bytes) -> dict[int, int]:
    if len(data) < _ID_HEADER.size:
        raise TranscriptError("key table payload shorter than its header")
    (count,) = _ID_HEADER.unpack_from(data)
    if len(data) != _ID_HEADER.size + _KEY_ENTRY.size * count:
        raise TranscriptError("key table payload length disagrees with header")
    table = {}
    offset = _ID_HEADER.size
    for _ in range(count):
        uid, key = _KEY_ENTRY.unpack_from(data, offset)
        offset += _KEY_ENTRY.size
        table[uid] = key
    return table


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------


class InProcessTransport:
    """Per-party frame queues; frames are still fully encoded and decoded."""

    name = "inprocess"

    def __init__(self):
        self._queues: dict[int, deque] | None = None

    def open(self, party_ids: Iterable[int]) -> None:
        self._queues = {pid: deque() for pid in party_ids}

    def send(self, env: Envelope) -> None:
        if self._queues is None:
            raise TranscriptError("transport is not open")
        if env.recipient not in self._queues:
            raise TranscriptError(f"no inbox for party {env.recipient}")
        self._queues[env.recipient].append(frame_bytes(env))

    def recv(self, party_id: int) -> Envelope:
        if self._queues is None:
            raise TranscriptError("transport is not open")
        queue = self._queues[party_id]
        if not queue:
            raise TranscriptError(f"party {party_id} has no queued message")
        frame = queue.popleft()
        (length,) = FRAME_PREFIX.unpack_from(frame)
        if length != len(frame) - FRAME_PREFIX.size:
            raise TranscriptError("frame length prefix disagrees with body")
        return decode_envelope(frame[FRAME_PREFIX.size :])

    def close(self) -> None:
        self._queues = None


def _read_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    got = 0
    while got < count:
        chunk = sock.recv(count - got)
        if not chunk:
            return None
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket) -> bytes | None:
    prefix = _read_exact(sock, FRAME_PREFIX.size)
    if prefix is None:
        return None
    (length,) = FRAME_PREFIX.unpack(prefix)
    body = _read_exact(sock, length)
    if body is None:
        return None
    return body


class TcpLoopbackTransport:
    """Frames over real loopback sockets through a hub router thread.

    Each party holds one full-duplex connection to the hub; the hub reads
    frames, looks at the recipient field and forwards them down the
    recipient's connection.  Useful for checking that nothing in the
    protocols depends on in-process shortcuts.
    """

    name = "tcploopback"

    def __init__(self, timeout: float = 30.0):
        self._timeout = timeout
        self._listener: socket.socket | None = None
        self._socks: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._ready = threading.Event()
        self._hub_error: BaseException | None = None

    def open(self, party_ids: Iterable[int]) -> None:
        ids = list(party_ids)
        self._listener = socket.create_server(("127.0.0.1", 0))
        self._listener.settimeout(self._timeout)
        port = self._listener.getsockname()[1]
        self._ready.clear()
        hub = threading.Thread(
            target=self._hub_main, args=(len(ids),), daemon=True
        )
        hub.start()
        self._threads = [hub]
        for pid in ids:
            sock = socket.create_connection(("127.0.0.1", port), self._timeout)
            sock.settimeout(self._timeout)
            sock.sendall(
                FRAME_PREFIX.pack(_ID_HEADER.size) + _ID_HEADER.pack(pid)
            )
            self._socks[pid] = sock
        if not self._ready.wait(self._timeout):
            raise TranscriptError("loopback hub never became ready")
        if self._hub_error is not None:
            raise TranscriptError(f"loopback hub failed: {self._hub_error}")

    def _hub_main(self, expected: int) -> None:
        routes: dict[int, socket.socket] = {}
        locks: dict[int, threading.Lock] = {}
        try:
            conns = []
            for _ in range(expected):
                conn, _ = self._listener.accept()
                conn.settimeout(self._timeout)
                conns.append(conn)
            for conn in conns:
                hello = _read_frame(conn)
                if hello is None or len(hello) != _ID_HEADER.size:
                    raise TranscriptError("malformed hub hello frame")
                (pid,) = _ID_HEADER.unpack(hello)
                routes[pid] = conn
                locks[pid] = threading.Lock()
        except BaseException as exc:  # surfaced to open()
            self._hub_error = exc
            self._ready.set()
            return
        self._ready.set()

        def route_from(conn: socket.socket) -> None:
            while True:
                try:
                    body = _read_frame(conn)
                except OSError:
                    return
                if body is None:
                    return
                (recipient,) = struct.unpack_from(
                    "<I", body, struct.calcsize("<I")
                )
                target = routes.get(recipient)
                if target is None:
                    continue
                with locks[recipient]:
                    try:
                        target.sendall(FRAME_PREFIX.pack(len(body)) + body)
                    except OSError:
                        return

        for conn in routes.values():
            worker = threading.Thread(
                target=route_from, args=(conn,), daemon=True
            )
            worker.start()
            self._threads.append(worker)

    def send(self, env: Envelope) -> None:
        sock = self._socks.get(env.sender)
        if sock is None:
            raise TranscriptError(f"no connection for party {env.sender}")
        sock.sendall(frame_bytes(env))

    def recv(self, party_id: int) -> Envelope:
        sock = self._socks.get(party_id)
        if sock is None:
            raise TranscriptError(f"no connection for party {party_id}")
        body = _read_frame(sock)
        if body is None:
            raise TranscriptError(f"connection for party {party_id} closed")
        return decode_envelope(body)

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._socks = {}
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for worker in self._threads:
            worker.join(timeout=self._timeout)
        self._threads = []


# ---------------------------------------------------------------------------
# Dropout plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutPlan:
    """Which users vanish after uploading, plus the rate that produced it."""

    victims: frozenset
    rate: float = 0.0

    @classmethod
    def none(cls) -> "DropoutPlan":
        return cls(frozenset())

    @classmethod
    def explicit(cls, victims: Iterable[int], rate: float = 0.0) -> "DropoutPlan":
        return cls(frozenset(int(v) for v in victims), rate)

    @classmethod
    def sampled(
        cls, num_users: int, rate: float, stream: SeedStream
    ) -> "DropoutPlan":
        """Exactly ``floor(rate * num_users)`` victims, chosen uniformly."""
        if not 0.0 <= rate < 1.0:
            raise ConfigError("rate", f"dropout rate {rate} not in [0, 1)")
        count = int(rate * num_users)
        keys = stream.draw_integers(num_users, 2**53)
        order = sorted(range(1, num_users + 1), key=lambda i: keys[i - 1])
        return cls(frozenset(order[:count]), rate)

    def survivors(self, num_users: int) -> list[int]:
        return [i for i in range(1, num_users + 1) if i not in self.victims]


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------


class RoundTranscript:
    """Frames in send order with a canonical, wall-clock-free byte form."""

    def __init__(self, header: bytes):
        self.header = header
        self.frames: list[Envelope] = []
        self._footer: bytes | None = None

    def record(self, env: Envelope) -> None:
        if self._footer is not None:
            raise TranscriptError("round transcript is already sealed")
        self.frames.append(env)

    def seal(self, footer: bytes) -> None:
        if self._footer is not None:
            raise TranscriptError("round transcript is already sealed")
        self._footer = footer

    @property
    def footer(self) -> bytes | None:
        return self._footer

    def canonical_bytes(self) -> bytes:
        if self._footer is None:
            raise TranscriptError("round transcript was never sealed")
        parts = [FRAME_PREFIX.pack(len(self.header)), self.header]
        parts.extend(frame_bytes(env) for env in self.frames)
        parts.append(FRAME_PREFIX.pack(len(self._footer)))
        parts.append(self._footer)
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def _round_header(
    protocol: str,
    config: ProtocolConfig,
    plan: DropoutPlan,
    seed: bytes,
    model_seed: bytes,
) -> bytes:
    weights = config.weights or ()
    return b"|".join(
        [
            b"agglab-round/1",
            protocol.encode("ascii"),
            struct.pack(
                "<IIIIIQ",
                config.num_users,
                config.privacy_threshold,
                config.dropout_tolerance,
                config.recovery_quorum,
                config.model_len,
                config.modulus,
            ),
            struct.pack(f"<{len(weights)}Q", *weights),
            encode_id_list(sorted(plan.victims)),
            hashlib.sha256(seed).digest(),
            hashlib.sha256(model_seed).digest(),
        ]
    )


def iter_canonical_chunks(data: bytes) -> list[bytes]:
    """Split canonical transcript bytes back into header, frames, footer."""
    chunks = []
    offset = 0
    while offset < len(data):
        if offset + FRAME_PREFIX.size > len(data):
            raise TranscriptError("canonical bytes end inside a length prefix")
        (length,) = FRAME_PREFIX.unpack_from(data, offset)
        offset += FRAME_PREFIX.size
        if offset + length > len(data):
            raise TranscriptError("canonical bytes end inside a chunk")
        chunks.append(bytes(data[offset : offset + length]))
        offset += length
    if len(chunks) < 2:
        raise TranscriptError("canonical bytes lack a header or footer")
    return chunks


# ---------------------------------------------------------------------------
# Timeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineTimeline:
    """Arithmetic round-length model from per-phase wall totals.

    The serial estimate runs the phases back to back; the pipelined one
    hides the offline phase behind the training delay, so it saves
    exactly min(offline, training).
    """

    offline_ms: float
    training_ms: float
    upload_ms: float
    recovery_ms: float

    @property
    def nonoverlapped_ms(self) -> float:
        return (
            self.offline_ms + self.training_ms + self.upload_ms + self.recovery_ms
        )

    @property
    def overlapped_ms(self) -> float:
        return (
            max(self.offline_ms, self.training_ms)
            + self.upload_ms
            + self.recovery_ms
        )

    @property
    def margin_ms(self) -> float:
        return min(self.offline_ms, self.training_ms)

    def total_ms(self, pipeline: str) -> float:
        if pipeline == PIPELINE_OVERLAPPED:
            return self.overlapped_ms
        if pipeline == PIPELINE_NONOVERLAPPED:
            return self.nonoverlapped_ms
        raise ConfigError("pipeline", f"unknown pipeline mode {pipeline!r}")


# ---------------------------------------------------------------------------
# Round results
# ---------------------------------------------------------------------------


@dataclass
class RoundResult:
    """Everything one simulated round produced.

    ``details`` carries the secret material drawn during the round (masks,
    seeds, keys) so verification can prove none of it crossed the wire; a
    deployment would never export it.
    """

    protocol: str
    config: ProtocolConfig
    plan: DropoutPlan
    survivors: list[int]
    responders: list[int]
    aggregate: FieldVector | None
    failure: str | None
    models: dict[int, FieldVector]
    float_models: dict | None
    quantization: QuantizationScheme | None
    report: CostReport
    timeline: PipelineTimeline
    transcript: RoundTranscript
    details: dict

    @property
    def ok(self) -> bool:
        return self.failure is None


@contextmanager
def _timed(meter: CostMeter, phase: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        meter.add_wall_ms(phase, (time.perf_counter() - start) * 1000.0)


class _Exchange:
    """Transport, metering and transcript from the orchestrator's seat."""

    def __init__(self, transport, transcript: RoundTranscript, meters):
        self.transport = transport
        self.transcript = transcript
        self.meters = meters

    def post(
        self, phase: str, sender: int, recipient: int, kind: str, payload: bytes
    ) -> None:
        env = Envelope(sender, recipient, kind, payload)
        self.transcript.record(env)
        self.transport.send(env)
        self.meters[sender].add_bytes_sent(phase, frame_length(env))

    def take(self, phase: str, recipient: int, kind: str) -> Envelope:
        env = self.transport.recv(recipient)
        if env.recipient != recipient:
            raise TranscriptError(
                f"party {recipient} pulled a frame addressed to {env.recipient}"
            )
        if env.kind != kind:
            raise TranscriptError(f"expected a {kind} frame, got {env.kind}")
        self.meters[recipient].add_bytes_received(phase, frame_length(env))
        return env


def _draw_models(
    config: ProtocolConfig,
    streams: Mapping[int, SeedStream],
    scheme: QuantizationScheme,
    meters: Mapping[int, CostMeter],
) -> tuple[dict[int, FieldVector], dict[int, np.ndarray]]:
    field_models: dict[int, FieldVector] = {}
    float_models: dict[int, np.ndarray] = {}
    d, q = config.model_len, config.modulus
    for uid in range(1, config.num_users + 1):
        with _timed(meters[uid], PHASE_TRAINING):
            raw = streams[uid].derive("model").draw_integers(d, 1 << 24)
            floats = (
                np.asarray(raw, dtype=np.float64) / float(1 << 23) - 1.0
            ) * scheme.clip_range
            float_models[uid] = floats
            field_models[uid] = quantize(floats, scheme, q)
            meters[uid].add_field_ops(PHASE_TRAINING, d)
    return field_models, float_models


# ---------------------------------------------------------------------------
# Protocol orchestration
# ---------------------------------------------------------------------------


def _collect_models(
    config: ProtocolConfig,
    exch: _Exchange,
    meters,
    user_objects,
    field_models,
    receive,
) -> None:
    q = config.modulus
    for uid in sorted(user_objects):
        with _timed(meters[uid], PHASE_UPLOAD):
            masked = user_objects[uid].masked_model(field_models[uid])
            exch.post(
                PHASE_UPLOAD, uid, SERVER_ID, KIND_MASKED_MODEL,
                encode_vector(masked),
            )
    with _timed(meters[SERVER_ID], PHASE_UPLOAD):
        for _ in user_objects:
            env = exch.take(PHASE_UPLOAD, SERVER_ID, KIND_MASKED_MODEL)
            receive(env.sender, decode_vector(env.payload, q))


def _run_lightsecagg(
    config: ProtocolConfig,
    exch: _Exchange,
    meters,
    streams,
    plan: DropoutPlan,
    field_models,
):
    n, q = config.num_users, config.modulus
    matrix = build_matrix(config)
    users: dict[int, MaskingUser] = {}
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            users[uid] = MaskingUser(
                uid, config, matrix, streams[uid], meters[uid]
            )
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            for share in users[uid].outgoing_combinations():
                exch.post(
                    PHASE_OFFLINE, uid, share.holder, KIND_MASK_SHARE,
                    encode_share_payload(share.origin, share.holder, 0,
                                         share.payload),
                )
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            for _ in range(n - 1):
                env = exch.take(PHASE_OFFLINE, uid, KIND_MASK_SHARE)
                origin, holder, _, payload = decode_share_payload(
                    env.payload, q
                )
                users[uid].receive_combination(
                    EncodedMaskShare(origin, holder, payload)
                )

    server = RecoveryServer(config, matrix, meters[SERVER_ID])
    _collect_models(
        config, exch, meters, users, field_models, server.receive_masked_model
    )

    survivors = plan.survivors(n)
    aggregate, failure = None, None
    responders: list[int] = []
    if not survivors:
        failure = "RecoveryFailedError: every user dropped this round"
    else:
        with _timed(meters[SERVER_ID], PHASE_UPLOAD):
            server.announce_survivors(survivors)
        responders = survivors[: config.recovery_quorum]
        with _timed(meters[SERVER_ID], PHASE_RECOVERY):
            for uid in responders:
                exch.post(
                    PHASE_RECOVERY, SERVER_ID, uid, KIND_SURVIVOR_SET,
                    encode_id_list(survivors),
                )
        for uid in responders:
            with _timed(meters[uid], PHASE_RECOVERY):
                env = exch.take(PHASE_RECOVERY, uid, KIND_SURVIVOR_SET)
                announced = decode_id_list(env.payload)
                combo = users[uid].aggregated_combination(announced)
                exch.post(
                    PHASE_RECOVERY, uid, SERVER_ID, KIND_AGGREGATE_SHARE,
                    encode_vector(combo),
                )
        with _timed(meters[SERVER_ID], PHASE_RECOVERY):
            try:
                for _ in responders:
                    env = exch.take(
                        PHASE_RECOVERY, SERVER_ID, KIND_AGGREGATE_SHARE
                    )
                    server.receive_aggregated_combination(
                        env.sender, decode_vector(env.payload, q)
                    )
                aggregate = server.recover()
            except (InsufficientSharesError, RecoveryFailedError) as exc:
                failure = f"{type(exc).__name__}: {exc}"

    details = {
        "matrix": matrix,
        "masks": {uid: users[uid].mask for uid in users},
        "stored_elements": {
            uid: users[uid].stored_elements() for uid in users
        },
        "quorum_ids": list(server.quorum_ids or responders),
    }
    return survivors, responders, aggregate, failure, details


def _run_pairwise(
    variant: PairwiseVariant,
    config: ProtocolConfig,
    exch: _Exchange,
    meters,
    streams,
    plan: DropoutPlan,
    field_models,
):
    n, q = config.num_users, config.modulus
    users: dict[int, PairwiseMaskUser] = {}
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            users[uid] = PairwiseMaskUser(
                uid, config, variant.graph, variant.share_threshold,
                streams[uid], meters[uid],
            )
    server = PairwiseMaskServer(
        config, variant.graph, variant.share_threshold, meters[SERVER_ID]
    )
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            exch.post(
                PHASE_OFFLINE, uid, SERVER_ID, KIND_PUBLIC_KEY,
                struct.pack("<Q", users[uid].public_key),
            )
    with _timed(meters[SERVER_ID], PHASE_OFFLINE):
        for _ in range(n):
            env = exch.take(PHASE_OFFLINE, SERVER_ID, KIND_PUBLIC_KEY)
            (key,) = struct.unpack("<Q", env.payload)
            server.receive_public_key(env.sender, key)
        table = encode_key_table(server.key_table)
        for uid in range(1, n + 1):
            exch.post(PHASE_OFFLINE, SERVER_ID, uid, KIND_KEY_TABLE, table)
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            env = exch.take(PHASE_OFFLINE, uid, KIND_KEY_TABLE)
            users[uid].install_peer_keys(decode_key_table(env.payload))
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            for holder, seed_share, key_share in users[uid].secret_share_messages():
                exch.post(
                    PHASE_OFFLINE, uid, holder, KIND_SECRET_SHARES,
                    encode_secret_share_message(
                        uid, holder, 0, seed_share, key_share
                    ),
                )
    for uid in range(1, n + 1):
        with _timed(meters[uid], PHASE_OFFLINE):
            for _ in range(variant.graph.degree(uid)):
                env = exch.take(PHASE_OFFLINE, uid, KIND_SECRET_SHARES)
                origin, holder, _, seed_share, key_share = (
                    decode_secret_share_message(env.payload)
                )
                if holder != uid:
                    raise TranscriptError(
                        f"user {uid} received shares for holder {holder}"
                    )
                users[uid].receive_secret_shares(origin, seed_share, key_share)

    _collect_models(
        config, exch, meters, users, field_models, server.receive_masked_model
    )

    survivors = plan.survivors(n)
    aggregate, failure = None, None
    responders: list[int] = []
    if not survivors:
        failure = "RecoveryFailedError: every user dropped this round"
    else:
        with _timed(meters[SERVER_ID], PHASE_UPLOAD):
            announced = server.announce_survivors(survivors)
        if variant.respond_all:
            responders = list(announced)
        else:
            responders = announced[: variant.share_threshold + 1]
        with _timed(meters[SERVER_ID], PHASE_RECOVERY):
            for uid in responders:
                exch.post(
                    PHASE_RECOVERY, SERVER_ID, uid, KIND_SURVIVOR_SET,
                    encode_id_list(announced),
                )
        for uid in responders:
            with _timed(meters[uid], PHASE_RECOVERY):
                env = exch.take(PHASE_RECOVERY, uid, KIND_SURVIVOR_SET)
                alive = set(decode_id_list(env.payload))
                gone = [i for i in range(1, n + 1) if i not in alive]
                records = users[uid].share_response(alive, gone)
                exch.post(
                    PHASE_RECOVERY, uid, SERVER_ID, KIND_SHARE_RESPONSE,
                    encode_share_response(uid, 0, records),
                )
        with _timed(meters[SERVER_ID], PHASE_RECOVERY):
            try:
                for _ in responders:
                    env = exch.take(
                        PHASE_RECOVERY, SERVER_ID, KIND_SHARE_RESPONSE
                    )
                    responder, _, records = decode_share_response(env.payload)
                    server.collect_share_response(responder, records)
                aggregate = server.recover()
            except (InsufficientSharesError, RecoveryFailedError) as exc:
                failure = f"{type(exc).__name__}: {exc}"

    details = {
        "variant": variant,
        "private_seeds": {uid: users[uid].private_seed for uid in users},
        "secret_keys": {uid: users[uid].secret_key for uid in users},
        "pair_seeds": {uid: dict(users[uid]._pair_seeds) for uid in users},
    }
    return survivors, responders, aggregate, failure, details


def _as_seed(seed) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, str):
        return seed.encode()
    raise ConfigError("seed", f"seed must be bytes or str, got {type(seed)}")


def build_variant(protocol: str, config: ProtocolConfig) -> PairwiseVariant:
    if protocol == PROTOCOL_SECAGG:
        return complete_graph_variant(config)
    if protocol == PROTOCOL_SECAGG_PLUS:
        return sparse_graph_variant(config)
    raise ConfigError("protocol", f"{protocol!r} has no pairwise variant")


def run_round(
    protocol: str,
    config: ProtocolConfig,
    seed: bytes | str = b"agglab",
    plan: DropoutPlan | None = None,
    transport=None,
    models: Mapping[int, FieldVector] | None = None,
    quantization: QuantizationScheme | None = None,
    training_delay_ms: float = 0.0,
    pipeline: str = PIPELINE_NONOVERLAPPED,
    model_seed: bytes | str | None = None,
) -> RoundResult:
    """Run one federated round of the named protocol, fully instrumented.

    ``model_seed`` decouples the models from the protocol randomness:
    repeated rounds with the same model seed but fresh round seeds mask
    differently yet aggregate identically.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(
            "protocol", f"unknown protocol {protocol!r}; choose from {PROTOCOLS}"
        )
    if pipeline not in PIPELINES:
        raise ConfigError(
            "pipeline", f"unknown pipeline {pipeline!r}; choose from {PIPELINES}"
        )
    if training_delay_ms < 0:
        raise ConfigError("training_delay_ms", "delay must be non-negative")
    plan = plan or DropoutPlan.none()
    stray = sorted(v for v in plan.victims if not 1 <= v <= config.num_users)
    if stray:
        raise ConfigError("plan", f"victims {stray} are not users")

    seed_bytes = _as_seed(seed)
    model_seed_bytes = (
        seed_bytes if model_seed is None else _as_seed(model_seed)
    )
    root = SeedStream(seed_bytes)
    model_root = SeedStream(model_seed_bytes)
    streams = {
        uid: root.derive(f"user/{uid}")
        for uid in range(1, config.num_users + 1)
    }
    model_streams = {
        uid: model_root.derive(f"user/{uid}")
        for uid in range(1, config.num_users + 1)
    }
    meters = {SERVER_ID: CostMeter(SERVER_PARTY)}
    for uid in range(1, config.num_users + 1):
        meters[uid] = CostMeter(user_party(uid))

    transcript = RoundTranscript(
        _round_header(protocol, config, plan, seed_bytes, model_seed_bytes)
    )
    transport = transport or InProcessTransport()
    exch = _Exchange(transport, transcript, meters)

    scheme = None
    if models is None:
        scheme = quantization or QuantizationScheme(8, 1.0)
        if not scheme.headroom_ok(config.modulus, config.num_users):
            raise ConfigError(
                "quantization",
                f"{config.num_users} summands at scale {scheme.scale} "
                f"can wrap modulo {config.modulus}",
            )

    transport.open([SERVER_ID, *streams])
    try:
        if models is None:
            field_models, float_models = _draw_models(
                config, model_streams, scheme, meters
            )
        else:
            absent = [uid for uid in streams if uid not in models]
            if absent:
                raise ConfigError("models", f"no model given for users {absent}")
            field_models = {uid: models[uid] for uid in streams}
            float_models = None
        if protocol == PROTOCOL_LIGHTSECAGG:
            outcome = _run_lightsecagg(
                config, exch, meters, streams, plan, field_models
            )
        else:
            variant = build_variant(protocol, config)
            outcome = _run_pairwise(
                variant, config, exch, meters, streams, plan, field_models
            )
    finally:
        transport.close()
    survivors, responders, aggregate, failure, details = outcome
    details["round_seed"] = seed_bytes
    details["model_seed"] = model_seed_bytes

    if failure is None:
        transcript.seal(b"ok|" + encode_vector(aggregate))
    else:
        transcript.seal(b"fail|" + failure.encode())

    def phase_wall(phase: str) -> float:
        return sum(m.phases[phase].wall_ms for m in meters.values())

    timeline = PipelineTimeline(
        offline_ms=phase_wall(PHASE_OFFLINE),
        training_ms=training_delay_ms + phase_wall(PHASE_TRAINING),
        upload_ms=phase_wall(PHASE_UPLOAD),
        recovery_ms=phase_wall(PHASE_RECOVERY),
    )

    rate = plan.rate
    if not rate and config.num_users:
        rate = round(len(plan.victims) / config.num_users, 6)
    metadata = {
        "protocol": protocol,
        "n": config.num_users,
        "p": rate,
        "u": config.recovery_quorum,
        "pipeline": pipeline,
        "transport": transport.name,
        "victims": sorted(plan.victims),
        "survivor_count": len(survivors),
        "failure": failure,
        "training_delay_ms": training_delay_ms,
        "timeline": {
            "offline_ms": round(timeline.offline_ms, 3),
            "training_ms": round(timeline.training_ms, 3),
            "upload_ms": round(timeline.upload_ms, 3),
            "recovery_ms": round(timeline.recovery_ms, 3),
            "nonoverlapped_ms": round(timeline.nonoverlapped_ms, 3),
            "overlapped_ms": round(timeline.overlapped_ms, 3),
        },
        "transcript_digest": transcript.digest(),
    }
    report = CostReport.from_meters(
        metadata, [meters[SERVER_ID]] + [meters[u] for u in sorted(streams)]
    )
    return RoundResult(
        protocol=protocol,
        config=config,
        plan=plan,
        survivors=survivors,
        responders=responders,
        aggregate=aggregate,
        failure=failure,
        models=field_models,
        float_models=float_models,
        quantization=scheme,
        report=report,
        timeline=timeline,
        transcript=transcript,
        details=details,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_config(
    num_users: int, dropout_rate: float, model_len: int,
    modulus: int = DEFAULT_MODULUS,
) -> ProtocolConfig:
    """Cell policy: half the users may collude, quorum set by the rate."""
    quorum = choose_recovery_quorum(num_users, dropout_rate)
    return ProtocolConfig(
        num_users=num_users,
        privacy_threshold=num_users // 2,
        dropout_tolerance=num_users - quorum,
        recovery_quorum=quorum,
        model_len=model_len,
        modulus=modulus,
    )


def sweep(
    protocols: Sequence[str],
    sizes: Sequence[int],
    rates: Sequence[float],
    model_len: int,
    seed: bytes | str = b"agglab-sweep",
    modulus: int = DEFAULT_MODULUS,
    transport_factory: Callable[[], object] = InProcessTransport,
    training_delay_ms: float = 0.0,
    pipelines: Sequence[str] = (PIPELINE_NONOVERLAPPED,),
    repeats: int = 1,
    quorum_for: Callable[[int, float], int] | None = None,
) -> list[RoundResult]:
    """One instrumented round per (protocol, size, rate, pipeline, repeat).

    Seed derivation rule: dropout plans and models depend only on the cell
    coordinates (size, rate), so every protocol, pipeline mode and repeat
    of a cell faces the same victims and aggregates the same models, while
    each repeat masks with fresh protocol randomness.  Recovery failures
    inside a cell are reported in that cell's metadata rather than raised,
    so a sweep always yields a full grid.
    """
    if repeats < 1:
        raise ConfigError("repeats", f"need at least one repeat, got {repeats}")
    root = SeedStream(_as_seed(seed))
    results = []
    for protocol in protocols:
        for num_users in sizes:
            for rate in rates:
                if quorum_for is None:
                    config = sweep_config(num_users, rate, model_len, modulus)
                else:
                    quorum = quorum_for(num_users, rate)
                    config = ProtocolConfig(
                        num_users=num_users,
                        privacy_threshold=num_users // 2,
                        dropout_tolerance=num_users - quorum,
                        recovery_quorum=quorum,
                        model_len=model_len,
                        modulus=modulus,
                    )
                plan = DropoutPlan.sampled(
                    num_users, rate, root.derive(f"plan/{num_users}/{rate}")
                )
                model_seed = root.derive(
                    f"models/{num_users}/{rate}"
                ).draw_bytes(32)
                for pipeline in pipelines:
                    for rep in range(repeats):
                        label = (
                            f"round/{protocol}/{num_users}/{rate}/"
                            f"{pipeline}/{rep}"
                        )
                        result = run_round(
                            protocol,
                            config,
                            seed=root.derive(label).draw_bytes(32),
                            plan=plan,
                            transport=transport_factory(),
                            training_delay_ms=training_delay_ms,
                            pipeline=pipeline,
                            model_seed=model_seed,
                        )
                        result.report.metadata["repeat"] = rep
                        results.append(result)
    return results


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    """Named pass/fail checks over one round, with failure details."""

    checks: dict
    problems: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def summary(self) -> str:
        lines = [
            f"{'pass' if good else 'FAIL'}  {name}"
            for name, good in sorted(self.checks.items())
        ]
        lines.extend(f"      {p}" for p in self.problems)
        return "\n".join(lines)


def vector_needle(vec: FieldVector) -> bytes:
    """The raw little-endian byte image a leaked vector would leave."""
    return vec.values.astype("<u4").tobytes()


def scan_frames(
    frames: Sequence[Envelope], needles: Mapping[str, bytes]
) -> list[str]:
    """Exact-substring scan of every frame payload for secret material."""
    hits = []
    for idx, env in enumerate(frames):
        for label, needle in needles.items():
            if needle and needle in env.payload:
                hits.append(
                    f"{label} appears in frame {idx} "
                    f"({env.kind} {env.sender}->{env.recipient})"
                )
    return hits


def _secret_needles(result: RoundResult) -> dict[str, bytes]:
    needles = {}
    for uid, model in result.models.items():
        needles[f"model[{uid}]"] = vector_needle(model)
    if result.protocol == PROTOCOL_LIGHTSECAGG:
        if result.config.privacy_threshold >= 1:
            for uid, mask in result.details["masks"].items():
                needles[f"mask[{uid}]"] = vector_needle(mask)
    else:
        variant = result.details["variant"]
        if variant.share_threshold >= 1:
            for uid, seed in result.details["private_seeds"].items():
                needles[f"private_seed[{uid}]"] = seed
            for uid, key in result.details["secret_keys"].items():
                needles[f"secret_key[{uid}]"] = struct.pack("<Q", key)
            for uid, pairs in result.details["pair_seeds"].items():
                for peer, seed in pairs.items():
                    if uid < peer:
                        needles[f"pair_seed[{uid},{peer}]"] = seed
    return needles


def _check(report: VerificationReport, name: str, good: bool, detail: str):
    report.checks[name] = bool(good)
    if not good:
        report.problems.append(f"{name}: {detail}")


def _verify_lightsecagg(result: RoundResult, report: VerificationReport):
    cfg = result.config
    n, d = cfg.num_users, cfg.model_len
    seg_len = segment_length(d, cfg.data_dim)
    frames = result.transcript.frames
    by_kind: dict[str, list[Envelope]] = {}
    for env in frames:
        by_kind.setdefault(env.kind, []).append(env)

    shares = by_kind.get(KIND_MASK_SHARE, [])
    _check(
        report, "offline_share_count", len(shares) == n * (n - 1),
        f"saw {len(shares)} mask shares, expected {n * (n - 1)}",
    )
    share_lens = {
        len(decode_share_payload(env.payload, cfg.modulus)[3])
        for env in shares
    }
    _check(
        report, "offline_share_elements", share_lens <= {seg_len},
        f"share lengths {share_lens}, expected {{{seg_len}}}",
    )
    stored = result.details["stored_elements"]
    want_storage = d + n * seg_len
    _check(
        report, "offline_storage_elements",
        all(v == want_storage for v in stored.values()),
        f"stored elements {sorted(set(stored.values()))}, "
        f"expected {want_storage}",
    )
    combos = by_kind.get(KIND_AGGREGATE_SHARE, [])
    combo_lens = {
        len(decode_vector(env.payload, cfg.modulus)) for env in combos
    }
    _check(
        report, "recovery_message_elements", combo_lens <= {seg_len},
        f"recovery message lengths {combo_lens}, expected {{{seg_len}}}",
    )
    if result.ok:
        intake = sum(
            len(decode_vector(env.payload, cfg.modulus)) for env in combos
        )
        want_intake = cfg.recovery_quorum * seg_len
        _check(
            report, "recovery_intake_elements", intake == want_intake,
            f"server recovery intake {intake} elements, "
            f"expected {want_intake}",
        )


def _verify_pairwise(result: RoundResult, report: VerificationReport):
    from .baselines import SEED_SHARE_LEN, KIND_SEED

    cfg = result.config
    variant = result.details["variant"]
    frames = result.transcript.frames
    by_kind: dict[str, list[Envelope]] = {}
    for env in frames:
        by_kind.setdefault(env.kind, []).append(env)

    share_msgs = by_kind.get(KIND_SECRET_SHARES, [])
    want = sum(
        variant.graph.degree(uid) for uid in range(1, cfg.num_users + 1)
    )
    _check(
        report, "offline_share_count", len(share_msgs) == want,
        f"saw {len(share_msgs)} share messages, expected {want}",
    )
    shapes_ok = True
    for env in by_kind.get(KIND_SHARE_RESPONSE, []):
        _, _, records = decode_share_response(env.payload)
        for origin, (kind, elems) in records.items():
            expect = SEED_SHARE_LEN if kind == KIND_SEED else 1
            if len(elems) != expect:
                shapes_ok = False
    _check(
        report, "share_record_shapes", shapes_ok,
        "a share response carried a record of the wrong length",
    )


def verify_round(result: RoundResult) -> VerificationReport:
    """Independent checks of one round: output, secrecy, sizes, counts."""
    report = VerificationReport(checks={})
    cfg = result.config

    if result.ok:
        expected = vector_sum(
            [
                result.models[uid].scale(cfg.weight_of(uid))
                for uid in result.survivors
            ]
        )
        _check(
            report, "aggregate_matches_survivor_sum",
            result.aggregate == expected,
            "aggregate differs from the weighted survivor sum",
        )
    else:
        _check(
            report, "failure_left_no_aggregate", result.aggregate is None,
            "a failed round still produced an aggregate",
        )

    uploads = [
        env for env in result.transcript.frames
        if env.kind == KIND_MASKED_MODEL
    ]
    _check(
        report, "upload_count", len(uploads) == cfg.num_users,
        f"saw {len(uploads)} uploads, expected {cfg.num_users}",
    )
    upload_lens = {
        len(decode_vector(env.payload, cfg.modulus)) for env in uploads
    }
    _check(
        report, "upload_elements", upload_lens <= {cfg.model_len},
        f"upload lengths {upload_lens}, expected {{{cfg.model_len}}}",
    )

    hits = scan_frames(result.transcript.frames, _secret_needles(result))
    _check(
        report, "no_secret_material_on_wire", not hits, "; ".join(hits)
    )

    on_wire = sum(frame_length(env) for env in result.transcript.frames)
    sent = sum(row["bytes_out"] for row in result.report.rows)
    received = sum(row["bytes_in"] for row in result.report.rows)
    _check(
        report, "transcript_bytes_balance",
        sent == on_wire and received == on_wire,
        f"frames carry {on_wire} bytes but counters say "
        f"{sent} sent / {received} received",
    )

    if result.protocol == PROTOCOL_LIGHTSECAGG:
        _verify_lightsecagg(result, report)
    else:
        _verify_pairwise(result, report)
    return report


# ---------------------------------------------------------------------------
# Transcript bundles: save a round, replay it later, audit the stored bytes
# ---------------------------------------------------------------------------

_BUNDLE_MAGIC = "agglab-bundle/1"


def save_round_bundle(result: RoundResult, path) -> None:
    """Store a round as replay inputs plus its canonical transcript bytes."""
    if result.float_models is None:
        raise ConfigError(
            "models",
            "rounds with externally supplied models cannot be replayed "
            "from a seed, so they cannot be bundled",
        )
    plan = result.plan
    header = {
        "magic": _BUNDLE_MAGIC,
        "protocol": result.protocol,
        "config": {
            "num_users": result.config.num_users,
            "privacy_threshold": result.config.privacy_threshold,
            "dropout_tolerance": result.config.dropout_tolerance,
            "recovery_quorum": result.config.recovery_quorum,
            "model_len": result.config.model_len,
            "modulus": result.config.modulus,
            "weights": list(result.config.weights)
            if result.config.weights
            else None,
        },
        "victims": sorted(plan.victims),
        "rate": plan.rate,
        "seed": result.details["round_seed"].hex(),
        "model_seed": result.details["model_seed"].hex(),
        "training_delay_ms": result.report.metadata["training_delay_ms"],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(result.transcript.canonical_bytes())


def load_round_bundle(path) -> tuple[dict, bytes]:
    """Read a bundle back as (replay inputs, stored canonical bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    newline = data.find(b"\n")
    if newline < 0:
        raise TranscriptError("bundle holds no header line")
    try:
        header = json.loads(data[:newline])
    except json.JSONDecodeError as exc:
        raise TranscriptError(f"bundle header is not valid JSON: {exc}")
    if header.get("magic") != _BUNDLE_MAGIC:
        raise TranscriptError("bundle header carries the wrong magic")
    return header, data[newline + 1 :]


def verify_bundle(path) -> VerificationReport:
    """Replay a bundled round and audit both the replay and stored bytes."""
    header, stored = load_round_bundle(path)
    cfg = header["config"]
    config = ProtocolConfig(
        num_users=cfg["num_users"],
        privacy_threshold=cfg["privacy_threshold"],
        dropout_tolerance=cfg["dropout_tolerance"],
        recovery_quorum=cfg["recovery_quorum"],
        model_len=cfg["model_len"],
        modulus=cfg["modulus"],
        weights=tuple(cfg["weights"]) if cfg["weights"] else None,
    )
    plan = DropoutPlan.explicit(header["victims"], header["rate"])
    fresh = run_round(
        header["protocol"],
        config,
        seed=bytes.fromhex(header["seed"]),
        plan=plan,
        training_delay_ms=header["training_delay_ms"],
        model_seed=bytes.fromhex(header["model_seed"]),
    )
    report = verify_round(fresh)
    replays = fresh.transcript.canonical_bytes() == stored
    _check(
        report, "transcript_replays", replays,
        "stored transcript differs from the deterministic replay",
    )
    try:
        chunks = iter_canonical_chunks(stored)
        stored_frames = [decode_envelope(body) for body in chunks[1:-1]]
    except TranscriptError as exc:
        _check(report, "stored_frames_parse", False, str(exc))
        return report
    _check(report, "stored_frames_parse", True, "")
    hits = scan_frames(stored_frames, _secret_needles(fresh))
    _check(
        report, "stored_frames_leak_free", not hits, "; ".join(hits)
    )
    return report
