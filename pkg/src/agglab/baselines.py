"""Pairwise-mask baselines over complete and sparse graphs.

Both baselines mask with pairwise cancelling streams: users i < j agree a
seed through plain discrete-log key exchange, user i adds the stream it
expands from that seed and user j subtracts it, and every user also adds
a stream from a private seed so its own model stays hidden even after
pairwise cancellation.  Dropouts leave uncancelled pairwise streams, so
the server reconstructs the dropped users' keys from Shamir shares, while
collecting private-seed shares for the survivors; collecting both kinds
for one user would unmask that user's model, so the collection step
refuses mixed kinds.

The complete-graph variant shares every secret with all users at the
configured privacy threshold.  The sparse variant restricts masking and
sharing to a connected regular assortment graph whose degree grows like
3 log2 N, with the local share threshold fixed at a third of the degree;
the threshold sits well below the expected surviving fraction of a
neighborhood, so reconstruction stays likely at moderate dropout while
opening any secret still takes several colluding neighbors.  Recovery
succeeds exactly when every relevant user still has enough surviving
share holders, and a shortfall raises a detected failure rather than a
silent wrong aggregate.

Server-side recovery expands one stream per survivor (private seeds) plus
one per edge at a dropped user (pairwise seeds), so its cost scales with
N^2 on the complete graph and with N log N on the sparse one.  The
one-shot protocol in :mod:`agglab.lightsecagg` replaces all of this with
a single decode.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import networkx as nx

from .coding import (
    elements_to_seed,
    seed_to_elements,
    shamir_reconstruct,
    shamir_share,
)
from .config import ProtocolConfig
from .costs import PHASE_RECOVERY, PHASE_UPLOAD, CostMeter
from .errors import (
    ConfigError,
    DuplicateShareError,
    MissingShareError,
    RecoveryFailedError,
    ShapeMismatchError,
    ShareConflictError,
)
from .field import FieldVector, SeedStream, vector_sum

# A fixed 61-bit safe prime; the simulation needs determinism and group
# structure, not cryptographic strength.
KEY_AGREEMENT_PRIME = 2305843009213691579
KEY_AGREEMENT_GENERATOR = 2

# Secrets (keys below 2^61, seed digits below 2^60) are shared over the
# Mersenne prime 2^61 - 1.
SHARING_MODULUS = 2**61 - 1

SEED_BYTES = 16
SEED_SHARE_LEN = len(seed_to_elements(b"\x00" * SEED_BYTES))

KIND_SEED = "seed"
KIND_KEY = "key"


def derive_public_key(secret_key: int, prime: int = KEY_AGREEMENT_PRIME,
                      generator: int = KEY_AGREEMENT_GENERATOR) -> int:
    return pow(generator, secret_key, prime)


def shared_group_element(peer_public: int, own_secret: int,
                         prime: int = KEY_AGREEMENT_PRIME) -> int:
    """Both endpoints of a pair compute the same element: g^(ab) mod p."""
    return pow(peer_public, own_secret, prime)


def pairwise_seed(shared_element: int) -> bytes:
    digest = hashlib.sha256(b"pairwise|" + shared_element.to_bytes(16, "big"))
    return digest.digest()[:SEED_BYTES]


def expand_mask_stream(seed: bytes, round_id: int, length: int,
                       modulus: int) -> FieldVector:
    """The mask stream both maskers and the server derive from one seed."""
    return SeedStream(seed).derive(f"round/{round_id}").draw_vector(length, modulus)


# ---------------------------------------------------------------------------
# Mask graphs
# ---------------------------------------------------------------------------


def default_assortment_degree(num_users: int) -> int:
    if num_users < 2:
        return 0
    return min(num_users - 1, max(2, math.ceil(3 * math.log2(num_users))))


@dataclass(frozen=True)
class MaskGraph:
    """Which user pairs share a cancelling mask (and secret shares)."""

    num_users: int
    neighbors: dict

    @classmethod
    def complete(cls, num_users: int) -> "MaskGraph":
        nbrs = {
            i: tuple(j for j in range(1, num_users + 1) if j != i)
            for i in range(1, num_users + 1)
        }
        return cls(num_users, nbrs)

    @classmethod
    def assortment(cls, num_users: int, target_degree: int | None = None) -> "MaskGraph":
        k = (default_assortment_degree(num_users)
             if target_degree is None else target_degree)
        if num_users < 2 or k >= num_users - 1:
            return cls.complete(num_users)
        if k < 2:
            raise ConfigError("target_degree", "a connected graph needs degree >= 2")
        graph = nx.hkn_harary_graph(k, num_users)
        if not nx.is_connected(graph):
            raise ConfigError("target_degree", "assortment graph came out disconnected")
        nbrs = {
            i + 1: tuple(sorted(j + 1 for j in graph.neighbors(i)))
            for i in range(num_users)
        }
        return cls(num_users, nbrs)

    def degree(self, user_id: int) -> int:
        return len(self.neighbors[user_id])

    def edge_count(self) -> int:
        return sum(len(v) for v in self.neighbors.values()) // 2


# ---------------------------------------------------------------------------
# Wire formats (8-byte elements: share modulus exceeds the 32-bit range)
# ---------------------------------------------------------------------------

_WIDE_HEADER = struct.Struct("<IIII")  # origin, holder, round, length
_RESPONSE_HEADER = struct.Struct("<III")  # responder, round, record count
_RECORD_HEADER = struct.Struct("<IBH")  # origin, kind, element count


def encode_secret_share_message(origin: int, holder: int, round_id: int,
                                seed_share: Sequence[int], key_share: int) -> bytes:
    elems = [*seed_share, key_share]
    return _WIDE_HEADER.pack(origin, holder, round_id, len(elems)) + struct.pack(
        f"<{len(elems)}Q", *elems
    )


def decode_secret_share_message(data: bytes) -> tuple[int, int, int, tuple, int]:
    origin, holder, round_id, length = _WIDE_HEADER.unpack_from(data)
    if length != SEED_SHARE_LEN + 1 or len(data) != _WIDE_HEADER.size + 8 * length:
        raise ShapeMismatchError("malformed secret share message")
    elems = struct.unpack_from(f"<{length}Q", data, _WIDE_HEADER.size)
    return origin, holder, round_id, tuple(elems[:-1]), elems[-1]


def encode_share_response(responder: int, round_id: int,
                          records: Mapping[int, tuple]) -> bytes:
    parts = [_RESPONSE_HEADER.pack(responder, round_id, len(records))]
    for origin, (kind, elems) in sorted(records.items()):
        code = 0 if kind == KIND_SEED else 1
        parts.append(_RECORD_HEADER.pack(origin, code, len(elems)))
        parts.append(struct.pack(f"<{len(elems)}Q", *elems))
    return b"".join(parts)


def decode_share_response(data: bytes) -> tuple[int, int, dict]:
    responder, round_id, count = _RESPONSE_HEADER.unpack_from(data)
    offset = _RESPONSE_HEADER.size
    records = {}
    for _ in range(count):
        origin, code, nelems = _RECORD_HEADER.unpack_from(data, offset)
        offset += _RECORD_HEADER.size
        elems = struct.unpack_from(f"<{nelems}Q", data, offset)
        offset += 8 * nelems
        records[origin] = (KIND_SEED if code == 0 else KIND_KEY, tuple(elems))
    return responder, round_id, records


# ---------------------------------------------------------------------------
# User state machine
# ---------------------------------------------------------------------------


class PairwiseMaskUser:
    """Client for one round of either pairwise-mask baseline."""

    def __init__(
        self,
        user_id: int,
        config: ProtocolConfig,
        graph: MaskGraph,
        share_threshold: int,
        stream: SeedStream,
        meter: CostMeter | None = None,
        round_id: int = 0,
    ):
        if graph.num_users != config.num_users:
            raise ShapeMismatchError("graph sized for a different user count")
        self.user_id = user_id
        self.config = config
        self.graph = graph
        self.share_threshold = share_threshold
        self.round_id = round_id
        self.meter = meter or CostMeter(f"user:{user_id}")
        self.secret_key = 1 + stream.derive("dh").draw_integers(
            1, KEY_AGREEMENT_PRIME - 2
        )[0]
        self.public_key = derive_public_key(self.secret_key)
        self.private_seed = stream.derive("seed").draw_bytes(SEED_BYTES)
        self._share_stream = stream.derive("shamir")
        self._pair_seeds: dict[int, bytes] = {}
        self._held: dict[int, tuple[tuple, int]] = {}

    # -- offline: key agreement and secret sharing ---------------------------

    def install_peer_keys(self, key_table: Mapping[int, int]) -> None:
        for j in self.graph.neighbors[self.user_id]:
            shared = shared_group_element(key_table[j], self.secret_key)
            self._pair_seeds[j] = pairwise_seed(shared)

    def holders(self) -> list[int]:
        """Share holders: the user itself plus its graph neighbors."""
        return sorted((self.user_id, *self.graph.neighbors[self.user_id]))

    def secret_share_messages(self) -> list[tuple[int, tuple, int]]:
        """(holder, seed_share, key_share) per holder; own share is kept."""
        holders = self.holders()
        seed_shares = shamir_share(
            seed_to_elements(self.private_seed),
            len(holders),
            self.share_threshold,
            SHARING_MODULUS,
            self._share_stream,
            holder_ids=holders,
        )
        key_shares = shamir_share(
            [self.secret_key],
            len(holders),
            self.share_threshold,
            SHARING_MODULUS,
            self._share_stream,
            holder_ids=holders,
        )
        out = []
        for h in holders:
            entry = (seed_shares.shares[h], key_shares.shares[h][0])
            if h == self.user_id:
                self.receive_secret_shares(self.user_id, *entry)
            else:
                out.append((h, *entry))
        return out

    def receive_secret_shares(self, origin: int, seed_share: tuple,
                              key_share: int) -> None:
        if origin in self._held:
            raise DuplicateShareError(
                f"user {self.user_id} already holds shares from {origin}"
            )
        self._held[origin] = (tuple(seed_share), int(key_share))

    # -- upload: masking -----------------------------------------------------

    def masked_model(self, model: FieldVector) -> FieldVector:
        cfg = self.config
        if len(model) != cfg.model_len:
            raise ShapeMismatchError(
                f"model length {len(model)} != configured {cfg.model_len}"
            )
        nbrs = self.graph.neighbors[self.user_id]
        missing = [j for j in nbrs if j not in self._pair_seeds]
        if missing:
            raise MissingShareError(
                f"user {self.user_id} has no agreed seed with {missing}"
            )
        d, q = cfg.model_len, cfg.modulus
        weight = cfg.weight_of(self.user_id)
        if weight != 1:
            model = model.scale(weight)
            self.meter.add_field_ops(PHASE_UPLOAD, d)
        out = model + expand_mask_stream(self.private_seed, self.round_id, d, q)
        for j in nbrs:
            pair = expand_mask_stream(self._pair_seeds[j], self.round_id, d, q)
            out = out + pair if self.user_id < j else out - pair
        applied = (len(nbrs) + 1) * d
        self.meter.add_prg_elements(PHASE_UPLOAD, applied)
        self.meter.add_field_ops(PHASE_UPLOAD, applied + d)
        return out

    # -- recovery: share response -------------------------------------------

    def share_response(self, survivors: Iterable[int],
                       dropped: Iterable[int]) -> dict[int, tuple]:
        """Held shares, keyed by origin: seed kind for survivors, key kind
        for dropped.  Never both for one origin."""
        survivors, dropped = set(survivors), set(dropped)
        records = {}
        for origin, (seed_share, key_share) in sorted(self._held.items()):
            if origin in survivors:
                records[origin] = (KIND_SEED, tuple(seed_share))
            elif origin in dropped:
                records[origin] = (KIND_KEY, (key_share,))
        return records


# ---------------------------------------------------------------------------
# Server state machine
# ---------------------------------------------------------------------------


class PairwiseMaskServer:
    """Server for one round of either pairwise-mask baseline."""

    def __init__(
        self,
        config: ProtocolConfig,
        graph: MaskGraph,
        share_threshold: int,
        meter: CostMeter | None = None,
        round_id: int = 0,
    ):
        self.config = config
        self.graph = graph
        self.share_threshold = share_threshold
        self.round_id = round_id
        self.meter = meter or CostMeter("server")
        self.key_table: dict[int, int] = {}
        self._masked: dict[int, FieldVector] = {}
        self.survivors: list[int] | None = None
        self.dropped: list[int] | None = None
        self._masked_sum: FieldVector | None = None
        # origin -> (kind, {responder: elements})
        self._collected: dict[int, tuple[str, dict[int, tuple]]] = {}

    def receive_public_key(self, user_id: int, public_key: int) -> None:
        if user_id in self.key_table:
            raise DuplicateShareError(f"user {user_id} announced two keys")
        self.key_table[user_id] = int(public_key)

    def receive_masked_model(self, user_id: int, masked: FieldVector) -> None:
        if len(masked) != self.config.model_len:
            raise ShapeMismatchError(
                f"masked model length {len(masked)} != {self.config.model_len}"
            )
        if user_id in self._masked:
            raise DuplicateShareError(f"user {user_id} uploaded twice")
        self._masked[user_id] = masked

    def announce_survivors(self, survivors: Sequence[int]) -> list[int]:
        ids = sorted(survivors)
        missing = [i for i in ids if i not in self._masked]
        if missing:
            raise MissingShareError(f"no masked model from survivors {missing}")
        self.survivors = ids
        self.dropped = [
            i for i in range(1, self.config.num_users + 1) if i not in set(ids)
        ]
        self._masked_sum = vector_sum([self._masked[i] for i in ids])
        self.meter.add_field_ops(
            PHASE_UPLOAD, max(0, len(ids) - 1) * self.config.model_len
        )
        return ids

    def collect_share_response(self, responder: int,
                               records: Mapping[int, tuple]) -> None:
        """Fold one responder's shares in, refusing mixed kinds per origin."""
        if self.survivors is None:
            raise MissingShareError("survivor set was never announced")
        expected = {i: KIND_SEED for i in self.survivors}
        expected.update({i: KIND_KEY for i in self.dropped})
        for origin, (kind, elems) in records.items():
            if kind != expected.get(origin):
                raise ShareConflictError(
                    f"{kind} shares for user {origin} would pair with its "
                    f"{expected.get(origin)} shares and unmask its model"
                )
            stored_kind, per_responder = self._collected.setdefault(
                origin, (kind, {})
            )
            if stored_kind != kind:
                raise ShareConflictError(
                    f"mixed share kinds collected for user {origin}"
                )
            if responder in per_responder:
                raise DuplicateShareError(
                    f"responder {responder} answered twice for user {origin}"
                )
            per_responder[responder] = tuple(elems)

    # -- reconstruction ------------------------------------------------------

    def _reconstruct(self, origin: int, expect_len: int) -> tuple:
        kind, per_responder = self._collected.get(origin, (None, {}))
        needed = self.share_threshold + 1
        if len(per_responder) < needed:
            raise RecoveryFailedError(
                f"user {origin}: {len(per_responder)} shares held, "
                f"{needed} needed"
            )
        secret = shamir_reconstruct(per_responder, SHARING_MODULUS, needed)
        if len(secret) != expect_len:
            raise RecoveryFailedError(
                f"user {origin}: reconstructed {len(secret)} elements, "
                f"expected {expect_len}"
            )
        # Scalar interpolation cost: one weighted sum per responder and
        # element.
        self.meter.add_field_ops(PHASE_RECOVERY, len(per_responder) * expect_len)
        return secret

    def recover(self) -> FieldVector:
        cfg = self.config
        if self.survivors is None or self._masked_sum is None:
            raise MissingShareError("survivor set was never announced")
        d, q = cfg.model_len, cfg.modulus
        result = self._masked_sum
        streams = 0
        # Survivors: strip their private streams.
        for i in self.survivors:
            seed = elements_to_seed(self._reconstruct(i, SEED_SHARE_LEN))
            result = result - expand_mask_stream(seed, self.round_id, d, q)
            streams += 1
        # Dropped users: replay both sides of each of their edges.
        for i in self.dropped:
            key = self._reconstruct(i, 1)[0]
            if derive_public_key(key) != self.key_table.get(i):
                raise RecoveryFailedError(
                    f"user {i}: reconstructed key does not match its "
                    f"announced public key"
                )
            for j in self.graph.neighbors[i]:
                shared = shared_group_element(self.key_table[j], key)
                pair = expand_mask_stream(
                    pairwise_seed(shared), self.round_id, d, q
                )
                result = result + pair if i < j else result - pair
                streams += 1
        self.meter.add_prg_elements(PHASE_RECOVERY, streams * d)
        self.meter.add_field_ops(PHASE_RECOVERY, streams * d)
        return result


# ---------------------------------------------------------------------------
# Variant wiring and a transportless round for tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairwiseVariant:
    """Graph plus share threshold: the whole difference between baselines."""

    name: str
    graph: MaskGraph
    share_threshold: int
    respond_all: bool


def complete_graph_variant(config: ProtocolConfig) -> PairwiseVariant:
    graph = MaskGraph.complete(config.num_users)
    return PairwiseVariant("SecAgg", graph, config.privacy_threshold, False)


def sparse_graph_variant(config: ProtocolConfig,
                         target_degree: int | None = None) -> PairwiseVariant:
    graph = MaskGraph.assortment(config.num_users, target_degree)
    degree = max((graph.degree(i) for i in range(1, config.num_users + 1)),
                 default=0)
    t_local = max(0, math.ceil(degree / 3)) if config.num_users > 1 else 0
    return PairwiseVariant("SecAggPlus", graph, t_local, True)


def recovery_feasible(variant: PairwiseVariant, survivors: set[int]) -> bool:
    """Whether every needed secret still has threshold+1 reachable shares."""
    needed = variant.share_threshold + 1
    for i in range(1, variant.graph.num_users + 1):
        holders = {i, *variant.graph.neighbors[i]}
        if len(holders & survivors) < needed:
            return False
    return True


def simulate_pairwise_round(
    config: ProtocolConfig,
    variant: PairwiseVariant,
    models: Mapping[int, FieldVector],
    victims: Iterable[int],
    root_stream: SeedStream,
    responders: Sequence[int] | None = None,
) -> FieldVector:
    """Minimal in-memory round without transports, for exhaustive tests."""
    victims = set(victims)
    users = {
        uid: PairwiseMaskUser(
            uid, config, variant.graph, variant.share_threshold,
            root_stream.derive(f"user/{uid}"),
        )
        for uid in range(1, config.num_users + 1)
    }
    server = PairwiseMaskServer(config, variant.graph, variant.share_threshold)
    for uid, user in users.items():
        server.receive_public_key(uid, user.public_key)
    for user in users.values():
        user.install_peer_keys(server.key_table)
    for uid, user in users.items():
        for holder, seed_share, key_share in user.secret_share_messages():
            users[holder].receive_secret_shares(uid, seed_share, key_share)
    for uid, user in users.items():
        server.receive_masked_model(uid, user.masked_model(models[uid]))
    survivors = server.announce_survivors(
        [u for u in users if u not in victims]
    )
    if responders is None:
        if variant.respond_all:
            responders = survivors
        else:
            responders = survivors[: variant.share_threshold + 1]
    for uid in responders:
        server.collect_share_response(
            uid, users[uid].share_response(survivors, server.dropped)
        )
    return server.recover()
