"""Prime-field arithmetic, deterministic randomness, and fixed-point codecs.

This module is the substrate everything else builds on: canonical vectors
over F_q backed by int64 numpy arrays, a keyed counter-mode stream that
expands seeds into field elements with rejection sampling, and the
quantize/dequantize pair that maps real-valued models into the field and
back.

All vector values are canonical representatives in [0, q).  The default
modulus is the Mersenne prime 2^31 - 1; the small primes 7 and 257 are used
by brute-force tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import ClipOverflowError, ShapeMismatchError, ZeroInverseError

DEFAULT_MODULUS = 2**31 - 1
SMALL_TEST_MODULI = (7, 257)

# Largest modulus for which two canonical values multiply without int64
# overflow: (q-1)^2 must stay below 2^63.
MAX_VECTOR_MODULUS = 2**31

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_probable_prime(n: int, rounds: int = 32) -> bool:
    """Miller-Rabin primality check with fixed witnesses plus random rounds.

    Deterministic for n < 3.3e24 via the fixed witness set; the extra
    rounds only matter for larger moduli such as the key-agreement prime.
    """
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    witnesses = list(_SMALL_PRIMES)
    # Fixed auxiliary witnesses keep the check deterministic.
    witnesses += [41 + 2 * k for k in range(rounds - len(witnesses))]
    for a in witnesses:
        a %= n
        if a < 2:
            continue
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def mod_inverse(a: int, q: int) -> int:
    """Multiplicative inverse of a modulo prime q."""
    a %= q
    if a == 0:
        raise ZeroInverseError(f"0 has no inverse modulo {q}")
    # Fermat: q is prime throughout this library.
    return pow(a, q - 2, q)


# ---------------------------------------------------------------------------
# Field vectors
# ---------------------------------------------------------------------------

VectorLike = Union["FieldVector", Sequence[int], np.ndarray]


class FieldVector:
    """Immutable vector over F_q with elementwise modular arithmetic.

    Values are stored canonically in [0, q) as an int64 array flagged
    read-only.  Arithmetic returns new vectors; operands must share the
    modulus.
    """

    __slots__ = ("modulus", "values")

    def __init__(self, values: VectorLike, modulus: int = DEFAULT_MODULUS):
        if isinstance(values, FieldVector):
            modulus = values.modulus
            arr = values.values
        else:
            if not (2 <= modulus <= MAX_VECTOR_MODULUS):
                raise ShapeMismatchError(
                    f"vector modulus {modulus} outside supported range"
                )
            arr = np.asarray(values, dtype=np.int64) % modulus
        arr = np.ascontiguousarray(arr, dtype=np.int64)
        arr.setflags(write=False)
        self.modulus = modulus
        self.values = arr

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zeros(cls, length: int, modulus: int = DEFAULT_MODULUS) -> "FieldVector":
        return cls(np.zeros(length, dtype=np.int64), modulus)

    # -- container protocol --------------------------------------------------

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __getitem__(self, idx):
        picked = self.values[idx]
        if np.isscalar(picked) or picked.ndim == 0:
            return int(picked)
        return FieldVector(picked, self.modulus)

    def __iter__(self):
        return iter(int(v) for v in self.values)

    def tolist(self) -> list:
        return [int(v) for v in self.values]

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other: VectorLike) -> np.ndarray:
        if isinstance(other, FieldVector):
            if other.modulus != self.modulus:
                raise ShapeMismatchError(
                    f"moduli differ: {self.modulus} vs {other.modulus}"
                )
            arr = other.values
        else:
            arr = np.asarray(other, dtype=np.int64) % self.modulus
        if arr.shape != self.values.shape:
            raise ShapeMismatchError(
                f"lengths differ: {self.values.shape[0]} vs {arr.shape[0]}"
            )
        return arr

    def __add__(self, other: VectorLike) -> "FieldVector":
        return FieldVector(
            (self.values + self._coerce(other)) % self.modulus, self.modulus
        )

    def __sub__(self, other: VectorLike) -> "FieldVector":
        return FieldVector(
            (self.values - self._coerce(other)) % self.modulus, self.modulus
        )

    def __mul__(self, other) -> "FieldVector":
        if isinstance(other, int):
            return self.scale(other)
        return FieldVector(
            (self.values * self._coerce(other)) % self.modulus, self.modulus
        )

    __rmul__ = __mul__

    def __neg__(self) -> "FieldVector":
        return FieldVector((-self.values) % self.modulus, self.modulus)

    def scale(self, scalar: int) -> "FieldVector":
        return FieldVector(
            (self.values * (scalar % self.modulus)) % self.modulus, self.modulus
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, FieldVector):
            return NotImplemented
        return self.modulus == other.modulus and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.modulus, self.values.tobytes()))

    def __repr__(self) -> str:
        body = ", ".join(str(v) for v in self.values[:8])
        tail = ", ..." if len(self) > 8 else ""
        return f"FieldVector([{body}{tail}], q={self.modulus})"

    def concat(self, other: "FieldVector") -> "FieldVector":
        if other.modulus != self.modulus:
            raise ShapeMismatchError("cannot concat across moduli")
        return FieldVector(
            np.concatenate([self.values, other.values]), self.modulus
        )


def vector_sum(vectors: Iterable[FieldVector]) -> FieldVector:
    """Sum a non-empty iterable of same-length vectors over one modulus."""
    total = None
    for vec in vectors:
        total = vec if total is None else total + vec
    if total is None:
        raise ShapeMismatchError("cannot sum an empty collection of vectors")
    return total


# ---------------------------------------------------------------------------
# Deterministic seed expansion
# ---------------------------------------------------------------------------

_ZERO_BLOCK = bytes(16)


def _keystream(seed: bytes, start_block: int, num_blocks: int) -> bytes:
    """AES-256-CTR keystream for ``num_blocks`` 16-byte blocks.

    The key is derived from the seed by SHA-256 so seeds of any length are
    accepted; the 128-bit counter starts at ``start_block`` so callers can
    address disjoint windows of one stream.
    """
    key = hashlib.sha256(seed).digest()
    nonce = (start_block % (1 << 128)).to_bytes(16, "big")
    enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
    return enc.update(_ZERO_BLOCK * num_blocks)


def expand_field_elements(
    seed: bytes, counter: int, length: int, modulus: int
) -> tuple[np.ndarray, int]:
    """Expand ``length`` uniform elements of F_q from (seed, counter).

    Draws 32-bit words from the keystream and rejection-samples against the
    largest multiple of q below 2^32; plain reduction would bias the low
    residues.  Returns the elements and the next free block counter, so
    successive calls on one seed consume disjoint keystream windows.
    """
    if not (2 <= modulus <= MAX_VECTOR_MODULUS):
        raise ShapeMismatchError(f"modulus {modulus} outside vector range")
    limit = (2**32 // modulus) * modulus
    out = np.empty(length, dtype=np.int64)
    filled = 0
    block = counter
    while filled < length:
        need = length - filled
        # Acceptance odds are at least 1/2; 9/8 oversampling rarely loops.
        nblocks = max(1, (need * 9 // 8 + 3) // 4)
        raw = _keystream(seed, block, nblocks)
        words = np.frombuffer(raw, dtype=">u4")
        good = words[words < limit]
        if good.shape[0] >= need:
            # Find how many raw words were scanned to collect `need` keepers
            # so the consumed block count is well defined.
            accept_positions = np.flatnonzero(words < limit)
            scanned = int(accept_positions[need - 1]) + 1
            out[filled:] = good[:need].astype(np.int64) % modulus
            filled = length
            block += (scanned + 3) // 4
        else:
            take = good.shape[0]
            out[filled : filled + take] = good.astype(np.int64) % modulus
            filled += take
            block += nblocks
    return out, block


def expand_integers(
    seed: bytes, counter: int, length: int, modulus: int
) -> tuple[list[int], int]:
    """Expand uniform integers in [0, modulus) for moduli up to 2^64.

    Same counter discipline as :func:`expand_field_elements` but draws
    64-bit words, for key material wider than the vector range.
    """
    if not (2 <= modulus <= 2**64):
        raise ShapeMismatchError(f"modulus {modulus} outside integer range")
    limit = (2**64 // modulus) * modulus
    out: list[int] = []
    block = counter
    while len(out) < length:
        need = length - len(out)
        nblocks = max(1, (need * 9 // 8 + 1) // 2)
        raw = _keystream(seed, block, nblocks)
        words = np.frombuffer(raw, dtype=">u8")
        keep = words[words < limit]
        if keep.shape[0] >= need:
            accept_positions = np.flatnonzero(words < limit)
            scanned = int(accept_positions[need - 1]) + 1
            out.extend(int(w) % modulus for w in keep[:need])
            block += (scanned + 1) // 2
        else:
            out.extend(int(w) % modulus for w in keep)
            block += nblocks
    return out, block


class SeedStream:
    """Stateful cursor over the deterministic expansion of one seed.

    The expansion itself is the pure function of (seed, counter, length,
    modulus) above; this wrapper only tracks the next free counter block so
    repeated draws never overlap.  ``derive`` builds an independent child
    stream by hashing the seed with a label, which is how per-user and
    per-purpose randomness branches off one master seed.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: bytes, counter: int = 0):
        if isinstance(seed, str):
            seed = seed.encode()
        self.seed = bytes(seed)
        self.counter = counter

    def derive(self, label: str) -> "SeedStream":
        child = hashlib.sha256(self.seed + b"/" + label.encode()).digest()
        return SeedStream(child)

    def draw_vector(self, length: int, modulus: int = DEFAULT_MODULUS) -> FieldVector:
        values, self.counter = expand_field_elements(
            self.seed, self.counter, length, modulus
        )
        return FieldVector(values, modulus)

    def draw_integers(self, length: int, modulus: int) -> list[int]:
        values, self.counter = expand_integers(
            self.seed, self.counter, length, modulus
        )
        return values

    def draw_bytes(self, length: int) -> bytes:
        nblocks = (length + 15) // 16
        raw = _keystream(self.seed, self.counter, nblocks)
        self.counter += nblocks
        return raw[:length]


# ---------------------------------------------------------------------------
# Fixed-point quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizationScheme:
    """Fixed-point codec: reals in [-clip_range, clip_range] to F_q.

    A real x maps to round(x * 2^fractional_bits) mod q, so negatives land
    in the upper half of the field, mirroring two's-complement layout.
    """

    fractional_bits: int
    clip_range: float

    @property
    def scale(self) -> int:
        return 1 << self.fractional_bits

    def headroom_ok(self, modulus: int, terms_summed: int) -> bool:
        """True when ``terms_summed`` quantized values can sum without wrap."""
        return modulus > 2 * terms_summed * self.clip_range * self.scale


def quantize(
    values, scheme: QuantizationScheme, modulus: int = DEFAULT_MODULUS
) -> FieldVector:
    x = np.asarray(values, dtype=np.float64)
    if np.any(np.abs(x) > scheme.clip_range):
        worst = float(np.max(np.abs(x)))
        raise ClipOverflowError(
            f"|value| {worst} exceeds clip range {scheme.clip_range}"
        )
    scaled = np.rint(x * scheme.scale).astype(np.int64)
    return FieldVector(scaled % modulus, modulus)


def dequantize(
    vec: FieldVector, scheme: QuantizationScheme, terms_summed: int = 1
) -> np.ndarray:
    """Map a (possibly summed) quantized vector back to reals.

    ``terms_summed`` is how many quantized vectors were added into ``vec``;
    it bounds the signed magnitude so the centered lift is unambiguous.
    """
    if not scheme.headroom_ok(vec.modulus, terms_summed):
        raise ClipOverflowError(
            f"modulus {vec.modulus} lacks headroom for {terms_summed} summed "
            f"terms at clip {scheme.clip_range} and {scheme.fractional_bits} bits"
        )
    q = vec.modulus
    half = (q - 1) // 2
    signed = vec.values.astype(np.int64).copy()
    signed[signed > half] -= q
    return signed / float(scheme.scale)
