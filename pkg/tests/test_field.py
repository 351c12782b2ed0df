"""Field substrate: arithmetic axioms, stream statistics, quantizer bounds."""

import math
import random

import numpy as np
import pytest

from agglab.errors import ClipOverflowError, ShapeMismatchError, ZeroInverseError
from agglab.field import (
    DEFAULT_MODULUS,
    FieldVector,
    QuantizationScheme,
    SeedStream,
    dequantize,
    expand_field_elements,
    is_probable_prime,
    mod_inverse,
    quantize,
    vector_sum,
)

MODULI = [7, 257, DEFAULT_MODULUS]


# ---- scalar arithmetic ----------------------------------------------------


def test_default_modulus_is_prime():
    assert is_probable_prime(DEFAULT_MODULUS)
    assert DEFAULT_MODULUS == 2**31 - 1


@pytest.mark.parametrize("q", MODULI)
def test_ring_axioms_on_random_triples(q):
    rng = random.Random(1000 + q)
    for _ in range(200):
        a, b, c = (rng.randrange(q) for _ in range(3))
        assert (a + b) % q == (b + a) % q
        assert ((a + b) + c) % q == (a + (b + c)) % q
        assert (a * b) % q == (b * a) % q
        assert ((a * b) * c) % q == (a * (b * c)) % q
        assert (a * ((b + c) % q)) % q == (a * b + a * c) % q
        assert (a + 0) % q == a and (a * 1) % q == a


def test_inverse_exhaustive_mod_257():
    for a in range(1, 257):
        assert a * mod_inverse(a, 257) % 257 == 1


def test_inverse_of_zero_raises():
    with pytest.raises(ZeroInverseError):
        mod_inverse(0, 257)


# ---- vectors --------------------------------------------------------------


def test_vector_ops_match_scalar_loop():
    rng = random.Random(7)
    q = 257
    a = [rng.randrange(q) for _ in range(50)]
    b = [rng.randrange(q) for _ in range(50)]
    va, vb = FieldVector(a, q), FieldVector(b, q)
    assert (va + vb).tolist() == [(x + y) % q for x, y in zip(a, b)]
    assert (va - vb).tolist() == [(x - y) % q for x, y in zip(a, b)]
    assert (va * vb).tolist() == [(x * y) % q for x, y in zip(a, b)]
    assert (va.scale(3)).tolist() == [3 * x % q for x in a]
    assert (-va).tolist() == [(-x) % q for x in a]


def test_vector_canonicalizes_negatives():
    v = FieldVector([-1, -7, 8], 7)
    assert v.tolist() == [6, 0, 1]


def test_vector_modulus_mismatch_rejected():
    with pytest.raises(ShapeMismatchError):
        FieldVector([1], 7) + FieldVector([1], 257)


def test_vector_length_mismatch_rejected():
    with pytest.raises(ShapeMismatchError):
        FieldVector([1, 2], 7) + FieldVector([1], 7)


def test_vector_immutable():
    v = FieldVector([1, 2, 3], 7)
    with pytest.raises(ValueError):
        v.values[0] = 5


def test_vector_sum_requires_nonempty():
    with pytest.raises(ShapeMismatchError):
        vector_sum([])


def test_large_modulus_products_do_not_overflow():
    q = DEFAULT_MODULUS
    big = FieldVector([q - 1] * 4, q)
    assert (big * big).tolist() == [pow(q - 1, 2, q)] * 4


# ---- seed streams ---------------------------------------------------------


def test_expansion_is_pure_in_seed_counter_length_modulus():
    a, next_a = expand_field_elements(b"seed", 5, 300, 7)
    b, next_b = expand_field_elements(b"seed", 5, 300, 7)
    assert np.array_equal(a, b) and next_a == next_b


def test_successive_draws_use_disjoint_windows():
    s = SeedStream(b"windows")
    first = s.draw_vector(100, 257)
    c1 = s.counter
    second = s.draw_vector(100, 257)
    assert s.counter > c1 > 0
    assert first != second


def test_uniformity_mod_7_within_five_sigma():
    # Binomial per-residue count: mean n/7, sigma = sqrt(n * p * (1-p)).
    n = 100_000
    v = SeedStream(b"uniformity").draw_vector(n, 7)
    counts = np.bincount(v.values, minlength=7)
    sigma = math.sqrt(n * (1 / 7) * (6 / 7))
    assert all(abs(c - n / 7) <= 5 * sigma for c in counts)


def test_distinct_seeds_give_unrelated_streams():
    n = 10_000
    a = SeedStream(b"seed-a").draw_vector(n, DEFAULT_MODULUS)
    b = SeedStream(b"seed-b").draw_vector(n, DEFAULT_MODULUS)
    differing = int(np.count_nonzero(a.values != b.values))
    assert differing >= 9_900


def test_derive_builds_independent_children():
    root = SeedStream(b"root")
    u1 = root.derive("user/1").draw_vector(64, 257)
    u2 = root.derive("user/2").draw_vector(64, 257)
    u1_again = SeedStream(b"root").derive("user/1").draw_vector(64, 257)
    assert u1 == u1_again
    assert u1 != u2


def test_rejection_sampling_small_modulus_exact_range():
    v = SeedStream(b"range").draw_vector(5_000, 7)
    assert int(v.values.min()) >= 0 and int(v.values.max()) <= 6


# ---- quantization ---------------------------------------------------------


def test_quantize_known_values():
    scheme = QuantizationScheme(fractional_bits=8, clip_range=4.0)
    q = DEFAULT_MODULUS
    assert quantize([1.0], scheme, q).tolist() == [256]
    assert quantize([-1.0], scheme, q).tolist() == [q - 256]
    assert quantize([0.0], scheme, q).tolist() == [0]


def test_quantize_clip_overflow_raises():
    scheme = QuantizationScheme(fractional_bits=8, clip_range=1.0)
    with pytest.raises(ClipOverflowError):
        quantize([1.5], scheme, DEFAULT_MODULUS)


def test_sum_of_three_quarters_dequantizes_exactly():
    scheme = QuantizationScheme(fractional_bits=8, clip_range=1.0)
    parts = [quantize([0.25], scheme) for _ in range(3)]
    total = vector_sum(parts)
    assert dequantize(total, scheme, terms_summed=3).tolist() == [0.75]


def test_round_trip_error_within_half_step():
    scheme = QuantizationScheme(fractional_bits=10, clip_range=2.0)
    rng = np.random.default_rng(42)
    x = rng.uniform(-2.0, 2.0, size=10_000)
    back = dequantize(quantize(x, scheme), scheme)
    assert np.max(np.abs(back - x)) <= 2.0**-10


def test_summed_homomorphism_error_bound():
    # n rounded terms each off by at most half a step.
    scheme = QuantizationScheme(fractional_bits=8, clip_range=1.0)
    rng = np.random.default_rng(7)
    for n in (2, 16, 64):
        xs = [rng.uniform(-1.0, 1.0, size=32) for _ in range(n)]
        total = vector_sum([quantize(x, scheme) for x in xs])
        back = dequantize(total, scheme, terms_summed=n)
        true = np.sum(xs, axis=0)
        assert np.max(np.abs(back - true)) <= n * 2.0**-9 + 1e-12


def test_dequantize_headroom_guard():
    scheme = QuantizationScheme(fractional_bits=8, clip_range=1.0)
    vec = quantize([0.5], scheme, 257)
    # 257 cannot hold even a 1-term signed range at 8 fractional bits.
    with pytest.raises(ClipOverflowError):
        dequantize(vec, scheme, terms_summed=1)
