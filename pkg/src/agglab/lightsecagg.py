"""One-shot mask recovery protocol: user and server state machines.

Round shape:

1. Offline.  Every user draws one fresh additive mask for the whole
   model, splits it into ``recovery_quorum - privacy_threshold`` data
   segments, appends ``privacy_threshold`` uniform noise segments, and
   sends every other user one T-private MDS combination of those
   segments.  After this phase each user holds one combination of every
   other user's mask.
2. Upload.  Each user sends the server its model plus its own mask, all
   in one piece.
3. Recovery.  Once the survivor set is known, each survivor sums the
   stored combinations over exactly that set and sends the single short
   result to the server.  Any quorum of those sums decodes to the sum of
   survivors' masks in one shot; subtracting it from the summed masked
   models yields the aggregate.  No per-dropout work exists: the cost of
   recovery does not depend on who dropped.

Cost accounting: ``field_ops`` counts elements processed per primitive
(see :mod:`agglab.costs`); the decoder also tracks ``decode_calls``,
``decode_output_elements``, and the multiply-accumulate count
``decode_madds`` of the quadratic Lagrange implementation.  The server
tallies the summing of surviving masked models in the Upload phase, where
those models arrive; the Recovery phase then carries only quorum
collection, the one-shot decode, and the final subtraction.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

from .coding import (
    EncodedMaskShare,
    TPrivateMdsMatrix,
    concat_segments,
    decode_aggregate_shares,
    encode_mask_segments,
    partition_mask,
    segment_length,
)
from .config import ProtocolConfig
from .costs import (
    PHASE_OFFLINE,
    PHASE_RECOVERY,
    PHASE_UPLOAD,
    CostMeter,
)
from .errors import (
    DuplicateShareError,
    InsufficientSharesError,
    MissingShareError,
    ShapeMismatchError,
)
from .field import FieldVector, SeedStream, vector_sum


def build_matrix(config: ProtocolConfig) -> TPrivateMdsMatrix:
    return TPrivateMdsMatrix.build(
        config.num_users,
        config.recovery_quorum,
        config.privacy_threshold,
        config.modulus,
    )


class MaskingUser:
    """Client state machine for one round."""

    def __init__(
        self,
        user_id: int,
        config: ProtocolConfig,
        matrix: TPrivateMdsMatrix,
        stream: SeedStream,
        meter: CostMeter | None = None,
    ):
        if matrix.num_users != config.num_users:
            raise ShapeMismatchError("matrix sized for a different user count")
        self.user_id = user_id
        self.config = config
        self.matrix = matrix
        self.meter = meter or CostMeter(f"user:{user_id}")
        d, q = config.model_len, config.modulus
        seg_len = segment_length(d, config.data_dim)

        mask_stream = stream.derive("mask")
        noise_stream = stream.derive("noise")
        self.mask = mask_stream.draw_vector(d, q)
        data_segments = partition_mask(self.mask, config.data_dim)
        noise_segments = [
            noise_stream.draw_vector(seg_len, q)
            for _ in range(config.privacy_threshold)
        ]
        self.meter.add_prg_elements(
            PHASE_OFFLINE, d + config.privacy_threshold * seg_len
        )
        self._combinations = encode_mask_segments(
            data_segments + noise_segments, matrix
        )
        # Encoding produces one seg_len combination per user; the
        # multiply-accumulate detail of the quadratic path goes to extras.
        u = config.recovery_quorum
        self.meter.add_field_ops(PHASE_OFFLINE, config.num_users * seg_len)
        self.meter.bump(
            "encode_madds", (2 * u - 1) * config.num_users * seg_len
        )
        self._held: dict[int, FieldVector] = {}
        self.receive_combination(
            EncodedMaskShare(user_id, user_id, self._combinations[user_id - 1])
        )

    # -- offline -------------------------------------------------------------

    def outgoing_combinations(self) -> list[EncodedMaskShare]:
        """Shares destined for every other user (own share is kept)."""
        return [
            EncodedMaskShare(self.user_id, holder, self._combinations[holder - 1])
            for holder in range(1, self.config.num_users + 1)
            if holder != self.user_id
        ]

    def receive_combination(self, share: EncodedMaskShare) -> None:
        if share.holder != self.user_id:
            raise ShapeMismatchError(
                f"user {self.user_id} received a share for holder {share.holder}"
            )
        if share.origin in self._held:
            raise DuplicateShareError(
                f"user {self.user_id} already holds a share from {share.origin}"
            )
        self._held[share.origin] = share.payload

    def stored_elements(self) -> int:
        """Offline storage in field elements: own mask plus held shares."""
        return len(self.mask) + sum(len(v) for v in self._held.values())

    # -- upload --------------------------------------------------------------

    def masked_model(self, model: FieldVector) -> FieldVector:
        if len(model) != self.config.model_len:
            raise ShapeMismatchError(
                f"model length {len(model)} != configured {self.config.model_len}"
            )
        d = self.config.model_len
        weight = self.config.weight_of(self.user_id)
        if weight != 1:
            model = model.scale(weight)
            self.meter.add_field_ops(PHASE_UPLOAD, d)
        self.meter.add_field_ops(PHASE_UPLOAD, d)
        return model + self.mask

    # -- recovery ------------------------------------------------------------

    def aggregated_combination(self, survivors: Iterable[int]) -> FieldVector:
        """Sum of held combinations over the announced survivor set."""
        ids = list(survivors)
        missing = [j for j in ids if j not in self._held]
        if missing:
            raise MissingShareError(
                f"user {self.user_id} lacks shares from {missing}"
            )
        total = vector_sum([self._held[j] for j in ids])
        self.meter.add_field_ops(PHASE_RECOVERY, max(0, len(ids) - 1) * len(total))
        return total


class RecoveryServer:
    """Server state machine for one round."""

    def __init__(
        self,
        config: ProtocolConfig,
        matrix: TPrivateMdsMatrix,
        meter: CostMeter | None = None,
    ):
        self.config = config
        self.matrix = matrix
        self.meter = meter or CostMeter("server")
        self._masked: dict[int, FieldVector] = {}
        self._aggregated: dict[int, FieldVector] = {}
        self.survivors: list[int] | None = None
        self.quorum_ids: list[int] | None = None
        self._masked_sum: FieldVector | None = None

    def receive_masked_model(self, user_id: int, masked: FieldVector) -> None:
        if len(masked) != self.config.model_len:
            raise ShapeMismatchError(
                f"masked model length {len(masked)} != {self.config.model_len}"
            )
        if user_id in self._masked:
            raise DuplicateShareError(f"user {user_id} uploaded twice")
        self._masked[user_id] = masked

    def announce_survivors(self, survivors: Sequence[int]) -> list[int]:
        """Fix the survivor set and fold their masked models together.

        The summing is tallied in the Upload phase: it consumes the
        Upload-phase payloads and needs no recovery traffic.
        """
        ids = sorted(survivors)
        missing = [i for i in ids if i not in self._masked]
        if missing:
            raise MissingShareError(f"no masked model from survivors {missing}")
        self.survivors = ids
        self._masked_sum = vector_sum([self._masked[i] for i in ids])
        self.meter.add_field_ops(
            PHASE_UPLOAD, max(0, len(ids) - 1) * self.config.model_len
        )
        return ids

    def receive_aggregated_combination(self, user_id: int, vec: FieldVector) -> None:
        """Accept a survivor-summed combination, even from a late dropper.

        A user that dropped after uploading may still deliver its message;
        the combination is one valid evaluation either way, so it counts
        toward the quorum.
        """
        expected = segment_length(self.config.model_len, self.config.data_dim)
        if len(vec) != expected:
            raise ShapeMismatchError(
                f"aggregated combination length {len(vec)} != {expected}"
            )
        if user_id in self._aggregated:
            raise DuplicateShareError(
                f"aggregated combination from {user_id} already received"
            )
        self._aggregated[user_id] = vec

    def recover(self) -> FieldVector:
        """One-shot unmasking from any quorum of aggregated combinations."""
        cfg = self.config
        if self.survivors is None or self._masked_sum is None:
            raise MissingShareError("survivor set was never announced")
        if len(self._aggregated) < cfg.recovery_quorum:
            raise InsufficientSharesError(
                f"quorum is {cfg.recovery_quorum}, "
                f"only {len(self._aggregated)} combinations arrived"
            )
        consumed = dict(list(self._aggregated.items())[: cfg.recovery_quorum])
        self.quorum_ids = list(consumed.keys())
        segments = decode_aggregate_shares(consumed, self.matrix)
        mask_sum = concat_segments(segments, cfg.model_len)
        u, seg_len = cfg.recovery_quorum, len(segments[0])
        out_elems = cfg.data_dim * seg_len
        self.meter.add_field_ops(PHASE_RECOVERY, out_elems)
        self.meter.bump("decode_calls")
        self.meter.bump("decode_output_elements", out_elems)
        self.meter.bump("decode_madds", (2 * u - 1) * out_elems)
        result = self._masked_sum - mask_sum
        self.meter.add_field_ops(PHASE_RECOVERY, cfg.model_len)
        return result


def simulate_round(
    config: ProtocolConfig,
    models: Mapping[int, FieldVector],
    victims: Iterable[int],
    root_stream: SeedStream,
    matrix: TPrivateMdsMatrix | None = None,
    responders: Sequence[int] | None = None,
) -> FieldVector:
    """Minimal in-memory round without transports, for exhaustive tests.

    Victims drop after uploading their masked model; every survivor (or
    the explicit ``responders`` list) sends its aggregated combination.
    """
    matrix = matrix or build_matrix(config)
    victims = set(victims)
    users = {
        uid: MaskingUser(uid, config, matrix, root_stream.derive(f"user/{uid}"))
        for uid in range(1, config.num_users + 1)
    }
    server = RecoveryServer(config, matrix)
    for uid, user in users.items():
        for share in user.outgoing_combinations():
            users[share.holder].receive_combination(share)
    for uid, user in users.items():
        server.receive_masked_model(uid, user.masked_model(models[uid]))
    survivors = server.announce_survivors(
        [u for u in users if u not in victims]
    )
    senders = list(responders) if responders is not None else survivors
    for uid in senders:
        server.receive_aggregated_combination(
            uid, users[uid].aggregated_combination(survivors)
        )
    return server.recover()
