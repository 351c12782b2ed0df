"""Erasure coding for sub-mask distribution plus Shamir secret sharing.

Two constructions live here.  The first is the T-private MDS encoding used
for one-shot mask recovery: a mask is split into ``recovery_dim -
privacy_dim`` data segments, padded with ``privacy_dim`` uniform noise
segments, and every user receives one linear combination of all segments.
Any ``recovery_dim`` combinations reconstruct the data segments, while any
``privacy_dim`` of them are statistically independent of the mask.

The matrix is built on a Lagrange grid: segment k is the value of a
degree-(U-1) polynomial at point k, and user j's combination is that
polynomial evaluated at point U+j.  Any U evaluations determine the
polynomial (MDS), and the noise-row restriction to any T columns is a
generalized Cauchy block, hence invertible (T-privacy).  Decoding is plain
Lagrange interpolation, quadratic in U per decoded batch; no fast
transform is used.

The second construction is classic Shamir sharing over an arbitrary prime
modulus, used by the pairwise-mask baselines for seeds and keys.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InsufficientSharesError,
    ShapeMismatchError,
    TranscriptError,
)
from .field import DEFAULT_MODULUS, FieldVector, SeedStream, mod_inverse

# ---------------------------------------------------------------------------
# T-private MDS matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TPrivateMdsMatrix:
    """Encoding matrix with shape (recovery_dim, num_users).

    Row k holds the coefficients that segment k contributes to every
    user's combination.  When built on the Lagrange grid the evaluation
    points are kept so decoding can interpolate; matrices supplied row by
    row (golden-test fixtures) decode through explicit inversion instead.
    """

    modulus: int
    num_users: int
    recovery_dim: int
    privacy_dim: int
    matrix: np.ndarray
    data_points: tuple | None = None
    encode_points: tuple | None = None

    @property
    def data_dim(self) -> int:
        return self.recovery_dim - self.privacy_dim

    @classmethod
    def build(
        cls,
        num_users: int,
        recovery_dim: int,
        privacy_dim: int,
        modulus: int = DEFAULT_MODULUS,
    ) -> "TPrivateMdsMatrix":
        n, u, t = num_users, recovery_dim, privacy_dim
        if not 0 <= t < u:
            raise ConfigError("privacy_dim", f"need 0 <= T < U, got T={t} U={u}")
        if u > n:
            raise ConfigError("recovery_dim", f"need U <= N, got U={u} N={n}")
        if modulus <= n + u:
            raise ConfigError(
                "modulus", f"need q > N + U = {n + u} for distinct grid points"
            )
        data_points = tuple(range(1, u + 1))
        encode_points = tuple(range(u + 1, u + n + 1))
        weights = _interpolation_weights(data_points, encode_points, modulus)
        mat = np.array(weights, dtype=np.int64)  # (U, N)
        mat.setflags(write=False)
        return cls(modulus, n, u, t, mat, data_points, encode_points)

    @classmethod
    def from_rows(
        cls,
        rows: Sequence[Sequence[int]],
        privacy_dim: int,
        modulus: int = DEFAULT_MODULUS,
    ) -> "TPrivateMdsMatrix":
        mat = np.array(rows, dtype=np.int64) % modulus
        u, n = mat.shape
        if not 0 <= privacy_dim < u:
            raise ConfigError("privacy_dim", f"need 0 <= T < U={u}")
        mat.setflags(write=False)
        return cls(modulus, n, u, privacy_dim, mat)

    def column(self, user_id: int) -> np.ndarray:
        """Coefficients destined for ``user_id`` (ids are 1-based)."""
        return self.matrix[:, user_id - 1]


def _interpolation_weights(
    source_points: Sequence[int], target_points: Sequence[int], modulus: int
) -> list[list[int]]:
    """weights[j][k]: factor of sample j when evaluating at target k.

    Interpolates the unique degree-(len(source)-1) polynomial through the
    source points and evaluates it at each target.  Targets must avoid the
    source grid; both grids here are disjoint integer ranges.
    """
    q = modulus
    src = [p % q for p in source_points]
    # denom[j] = prod_{m != j} (src_j - src_m)
    denoms = []
    for j, sj in enumerate(src):
        d = 1
        for m, sm in enumerate(src):
            if m != j:
                d = d * (sj - sm) % q
        denoms.append(mod_inverse(d, q))
    out = []
    for j, sj in enumerate(src):
        row = []
        for t in target_points:
            t %= q
            full = 1
            for sm in src:
                full = full * (t - sm) % q
            # full includes (t - sj); divide it back out.
            row.append(full * mod_inverse(t - sj, q) % q * denoms[j] % q)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# Mask partitioning and encoding
# ---------------------------------------------------------------------------


def segment_length(model_len: int, data_dim: int) -> int:
    return -(-model_len // data_dim)


def partition_mask(mask: FieldVector, data_dim: int) -> list[FieldVector]:
    """Split a mask into ``data_dim`` equal segments, zero-padding the tail."""
    if data_dim < 1:
        raise ConfigError("data_dim", "need at least one data segment")
    seg_len = segment_length(len(mask), data_dim)
    padded = np.zeros(seg_len * data_dim, dtype=np.int64)
    padded[: len(mask)] = mask.values
    return [
        FieldVector(padded[k * seg_len : (k + 1) * seg_len], mask.modulus)
        for k in range(data_dim)
    ]


def concat_segments(segments: Sequence[FieldVector], model_len: int) -> FieldVector:
    joined = np.concatenate([s.values for s in segments])
    if joined.shape[0] < model_len:
        raise ShapeMismatchError(
            f"segments hold {joined.shape[0]} elements, need {model_len}"
        )
    return FieldVector(joined[:model_len], segments[0].modulus)


def encode_mask_segments(
    segments: Sequence[FieldVector], matrix: TPrivateMdsMatrix
) -> list[FieldVector]:
    """Produce one encoded combination per user (length N list).

    ``segments`` carries the data segments followed by the noise segments,
    ``recovery_dim`` vectors in total.
    """
    u = matrix.recovery_dim
    if len(segments) != u:
        raise ShapeMismatchError(
            f"expected {u} segments (data + noise), got {len(segments)}"
        )
    q = matrix.modulus
    seg_len = len(segments[0])
    acc = np.zeros((matrix.num_users, seg_len), dtype=np.int64)
    for k in range(u):
        if len(segments[k]) != seg_len:
            raise ShapeMismatchError("segments must share one length")
        # Row-by-row accumulation keeps every intermediate below 2^63.
        acc = (acc + matrix.matrix[k][:, None] * segments[k].values[None, :]) % q
    return [FieldVector(acc[j], q) for j in range(matrix.num_users)]


def decode_aggregate_shares(
    payload_sums: Mapping[int, FieldVector], matrix: TPrivateMdsMatrix
) -> list[FieldVector]:
    """Recover the data segments from any ``recovery_dim`` combinations.

    ``payload_sums`` maps user id to that user's (already aggregated)
    combination; the first ``recovery_dim`` entries in mapping order are
    consumed, so callers control the selection by insertion order.
    """
    u = matrix.recovery_dim
    if len(payload_sums) < u:
        raise InsufficientSharesError(
            f"decoding needs {u} messages, got {len(payload_sums)}"
        )
    chosen = list(payload_sums.items())[:u]
    ids = [uid for uid, _ in chosen]
    vecs = [vec for _, vec in chosen]
    q = matrix.modulus
    if matrix.encode_points is not None:
        points = [matrix.encode_points[uid - 1] for uid in ids]
        targets = matrix.data_points[: matrix.data_dim]
        weights = _interpolation_weights(points, targets, q)
    else:
        weights = _inverse_data_rows(matrix, ids)
    seg_len = len(vecs[0])
    acc = np.zeros((matrix.data_dim, seg_len), dtype=np.int64)
    for j in range(u):
        wcol = np.array(weights[j], dtype=np.int64)
        acc = (acc + wcol[:, None] * vecs[j].values[None, :]) % q
    return [FieldVector(acc[k], q) for k in range(matrix.data_dim)]


def _inverse_data_rows(
    matrix: TPrivateMdsMatrix, ids: Sequence[int]
) -> list[list[int]]:
    """weights[j][k] from explicit inversion of the selected columns.

    The selected columns stacked as rows form the map from segments to
    payloads; its inverse restricted to the data coordinates yields the
    decoding weights.  Used for matrices without a Lagrange grid.
    """
    q = matrix.modulus
    u = matrix.recovery_dim
    rows = [[int(matrix.matrix[k, uid - 1]) for k in range(u)] for uid in ids]
    inv = _invert_mod(rows, q)
    # inv maps payload vector back to segments; weights[j][k] multiplies
    # payload j when producing data segment k.
    return [[inv[k][j] for k in range(matrix.data_dim)] for j in range(u)]


def _invert_mod(rows: list[list[int]], q: int) -> list[list[int]]:
    n = len(rows)
    aug = [[rows[i][j] % q for j in range(n)] + [1 if i == j else 0 for j in range(n)]
           for i in range(n)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][col] % q != 0), None)
        if pivot is None:
            raise InsufficientSharesError("selected combinations are not decodable")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv_p = mod_inverse(aug[col][col], q)
        aug[col] = [v * inv_p % q for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col]:
                f = aug[r][col]
                aug[r] = [(a - f * b) % q for a, b in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


# ---------------------------------------------------------------------------
# Encoded share transport type and wire format
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodedMaskShare:
    """One encoded combination in flight from ``origin`` to ``holder``."""

    origin: int
    holder: int
    payload: FieldVector


_SHARE_HEADER = struct.Struct("<IIII")  # origin, holder, round, length


def encode_share_payload(
    origin: int, holder: int, round_id: int, vec: FieldVector
) -> bytes:
    body = vec.values.astype("<u4").tobytes()
    return _SHARE_HEADER.pack(origin, holder, round_id, len(vec)) + body


def decode_share_payload(
    data: bytes, modulus: int
) -> tuple[int, int, int, FieldVector]:
    if len(data) < _SHARE_HEADER.size:
        raise TranscriptError("share payload shorter than its header")
    origin, holder, round_id, length = _SHARE_HEADER.unpack_from(data)
    expected = _SHARE_HEADER.size + 4 * length
    if len(data) != expected:
        raise TranscriptError(
            f"share payload length {len(data)} != header-implied {expected}"
        )
    values = np.frombuffer(data, dtype="<u4", offset=_SHARE_HEADER.size).astype(
        np.int64
    )
    if values.size and int(values.max()) >= modulus:
        raise TranscriptError("share payload holds non-canonical elements")
    return origin, holder, round_id, FieldVector(values, modulus)


# ---------------------------------------------------------------------------
# Shamir secret sharing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShamirShares:
    """Shares of a short secret vector; ``threshold`` shares reconstruct."""

    secret_len: int
    threshold: int
    modulus: int
    shares: dict[int, tuple[int, ...]]


def evaluate_polynomial(coefficients: Sequence[int], x: int, modulus: int) -> int:
    """Horner evaluation; ``coefficients`` ordered constant-first."""
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % modulus
    return acc


def shamir_share(
    secret,
    num_holders: int,
    privacy_threshold: int,
    modulus: int,
    stream: SeedStream,
    holder_ids: Sequence[int] | None = None,
) -> ShamirShares:
    """Split a secret into shares, one per holder, at x = holder id.

    Holders default to ids 1..num_holders; ``holder_ids`` overrides them
    for sparse topologies where only some users hold shares.  Each secret
    element becomes the constant term of a fresh uniform polynomial of
    degree ``privacy_threshold``; any ``privacy_threshold`` shares are
    jointly independent of the secret, any one more determine it.
    """
    if isinstance(secret, FieldVector):
        values = secret.tolist()
    else:
        values = [int(v) % modulus for v in secret]
    holders = list(holder_ids) if holder_ids is not None else list(
        range(1, num_holders + 1)
    )
    if len(set(holders)) != len(holders) or any(h < 1 for h in holders):
        raise ConfigError("holder_ids", "holder ids must be distinct positive ints")
    if len(holders) < privacy_threshold + 1:
        raise ConfigError(
            "num_holders",
            f"{len(holders)} holders cannot meet threshold {privacy_threshold + 1}",
        )
    if modulus <= max(holders):
        raise ConfigError("modulus", "need q above every holder id for distinct points")
    per_holder: dict[int, list[int]] = {h: [] for h in holders}
    for s in values:
        coeffs = [s] + stream.draw_integers(privacy_threshold, modulus)
        for h in holders:
            per_holder[h].append(evaluate_polynomial(coeffs, h, modulus))
    return ShamirShares(
        secret_len=len(values),
        threshold=privacy_threshold + 1,
        modulus=modulus,
        shares={h: tuple(v) for h, v in per_holder.items()},
    )


def shamir_reconstruct(
    shares: Mapping[int, Sequence[int]], modulus: int, threshold: int
) -> tuple[int, ...]:
    """Interpolate the secret at x = 0 from at least ``threshold`` shares.

    All provided shares participate; extra consistent shares do not change
    the result because the interpolant through more points of the same
    polynomial is still that polynomial.
    """
    if len(shares) < threshold:
        raise InsufficientSharesError(
            f"reconstruction needs {threshold} shares, got {len(shares)}"
        )
    q = modulus
    xs = list(shares.keys())
    lams = []
    for j, xj in enumerate(xs):
        num, den = 1, 1
        for m, xm in enumerate(xs):
            if m != j:
                num = num * xm % q
                den = den * (xm - xj) % q
        lams.append(num * mod_inverse(den, q) % q)
    length = len(next(iter(shares.values())))
    secret = []
    for e in range(length):
        acc = 0
        for lam, xj in zip(lams, xs):
            acc = (acc + lam * shares[xj][e]) % q
        secret.append(acc)
    return tuple(secret)


# Seeds are byte strings; Shamir operates on field elements.  These helpers
# pack a seed into base-2^60 digits below the sharing modulus and back.

_SEED_DIGIT_BITS = 60


def seed_to_elements(seed: bytes) -> list[int]:
    n = int.from_bytes(seed, "little")
    # Digit count depends on the byte length only, so equal-sized seeds
    # always share to equal-length element vectors.
    digits = max(1, -(-(8 * len(seed)) // _SEED_DIGIT_BITS))
    mask = (1 << _SEED_DIGIT_BITS) - 1
    out = [(n >> (_SEED_DIGIT_BITS * i)) & mask for i in range(digits)]
    out.append(len(seed))  # keep the byte length so round-trips are exact
    return out


def elements_to_seed(elements: Sequence[int]) -> bytes:
    *digits, nbytes = elements
    n = 0
    for i, d in enumerate(digits):
        n |= int(d) << (_SEED_DIGIT_BITS * i)
    return n.to_bytes(int(nbytes), "little") if nbytes else b""
