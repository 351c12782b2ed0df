"""Pairwise-mask baselines: key agreement, masking identity, recovery."""

import itertools

import pytest

from agglab.baselines import (
    KEY_AGREEMENT_PRIME,
    SEED_SHARE_LEN,
    KIND_KEY,
    KIND_SEED,
    MaskGraph,
    PairwiseMaskServer,
    PairwiseMaskUser,
    complete_graph_variant,
    decode_secret_share_message,
    decode_share_response,
    default_assortment_degree,
    derive_public_key,
    encode_secret_share_message,
    encode_share_response,
    expand_mask_stream,
    pairwise_seed,
    recovery_feasible,
    shared_group_element,
    simulate_pairwise_round,
    sparse_graph_variant,
)
from agglab.config import ProtocolConfig
from agglab.costs import PHASE_RECOVERY
from agglab.errors import (
    DuplicateShareError,
    MissingShareError,
    RecoveryFailedError,
    ShareConflictError,
)
from agglab.field import FieldVector, SeedStream, is_probable_prime, vector_sum


# ---- key agreement --------------------------------------------------------


def test_toy_group_agreement_both_directions():
    # g=3, p=23, secrets 6 and 5: both sides land on 3^30 mod 23.
    pk1 = pow(3, 6, 23)
    pk2 = pow(3, 5, 23)
    a = shared_group_element(pk2, 6, 23)
    b = shared_group_element(pk1, 5, 23)
    assert a == b == pow(3, 30, 23) == 6


def test_fixed_group_parameters():
    p = KEY_AGREEMENT_PRIME
    assert p.bit_length() == 61
    assert is_probable_prime(p) and is_probable_prime((p - 1) // 2)
    assert p < 2**61 - 1  # secrets stay below the sharing modulus


def test_production_agreement_symmetry():
    s1 = SeedStream(b"alice").draw_integers(1, KEY_AGREEMENT_PRIME - 2)[0] + 1
    s2 = SeedStream(b"bob").draw_integers(1, KEY_AGREEMENT_PRIME - 2)[0] + 1
    shared_a = shared_group_element(derive_public_key(s2), s1)
    shared_b = shared_group_element(derive_public_key(s1), s2)
    assert shared_a == shared_b
    assert pairwise_seed(shared_a) == pairwise_seed(shared_b)


# ---- graphs ---------------------------------------------------------------


def test_default_degree_examples():
    assert default_assortment_degree(16) == 12
    assert default_assortment_degree(40) == 16
    assert default_assortment_degree(80) == 19
    assert default_assortment_degree(2) == 1


def test_assortment_graph_regular_and_connected():
    for n, k in ((16, 8), (20, 9), (40, 11)):
        g = MaskGraph.assortment(n, k)
        assert all(g.degree(i) == k for i in range(1, n + 1)), (n, k)
        # Symmetric adjacency.
        for i in range(1, n + 1):
            assert all(i in g.neighbors[j] for j in g.neighbors[i])


def test_small_populations_fall_back_to_complete():
    g = MaskGraph.assortment(4)
    assert all(g.degree(i) == 3 for i in range(1, 5))


# ---- golden three-user round ---------------------------------------------


def golden_round():
    config = ProtocolConfig(3, 1, 1, 2, 4, 257)
    variant = complete_graph_variant(config)
    stream = SeedStream(b"golden-pairwise")
    users = {
        uid: PairwiseMaskUser(uid, config, variant.graph, 1,
                              stream.derive(f"user/{uid}"))
        for uid in (1, 2, 3)
    }
    server = PairwiseMaskServer(config, variant.graph, 1)
    for uid, u in users.items():
        server.receive_public_key(uid, u.public_key)
    for u in users.values():
        u.install_peer_keys(server.key_table)
    for uid, u in users.items():
        for holder, seed_share, key_share in u.secret_share_messages():
            users[holder].receive_secret_shares(uid, seed_share, key_share)
    models = {
        uid: SeedStream(f"model/{uid}".encode()).draw_vector(4, 257)
        for uid in (1, 2, 3)
    }
    for uid, u in users.items():
        server.receive_masked_model(uid, u.masked_model(models[uid]))
    return config, users, server, models


def test_golden_dropout_recovery_expands_four_streams():
    config, users, server, models = golden_round()
    survivors = server.announce_survivors([2, 3])
    for uid in (2, 3):
        server.collect_share_response(
            uid, users[uid].share_response(survivors, server.dropped)
        )
    result = server.recover()
    assert result == models[2] + models[3]
    # Two survivor private streams plus both edges of the dropped user.
    assert server.meter.phases[PHASE_RECOVERY].prg_elements == 4 * config.model_len


def test_golden_correction_term_identity():
    # The sum of survivor uploads differs from the true sum by exactly the
    # dropped user's pairwise streams minus the survivors' private streams.
    config, users, server, models = golden_round()
    d, q = config.model_len, config.modulus
    up2 = server._masked[2]
    up3 = server._masked[3]
    z12 = expand_mask_stream(users[1]._pair_seeds[2], 0, d, q)
    z13 = expand_mask_stream(users[1]._pair_seeds[3], 0, d, q)
    n2 = expand_mask_stream(users[2].private_seed, 0, d, q)
    n3 = expand_mask_stream(users[3].private_seed, 0, d, q)
    assert up2 + up3 + z12 + z13 - n2 - n3 == models[2] + models[3]


def test_no_dropout_masks_cancel():
    config = ProtocolConfig(5, 2, 0, 3, 8, 257)
    variant = complete_graph_variant(config)
    stream = SeedStream(b"cancel")
    models = {
        uid: stream.derive(f"m/{uid}").draw_vector(8, 257) for uid in range(1, 6)
    }
    got = simulate_pairwise_round(config, variant, models, set(),
                                  stream.derive("proto"))
    assert got == vector_sum(list(models.values()))


def test_exhaustive_dropout_sets_complete_graph():
    # All victim sets up to the tolerance at N=8: exact aggregates.
    n, t, d_tol, u, d = 8, 3, 4, 4, 3
    config = ProtocolConfig(n, t, d_tol, u, d, 257)
    variant = complete_graph_variant(config)
    stream = SeedStream(b"exhaustive-pairwise")
    models = {
        uid: stream.derive(f"m/{uid}").draw_vector(d, 257)
        for uid in range(1, n + 1)
    }
    checked = 0
    for size in range(d_tol + 1):
        for victims in itertools.combinations(range(1, n + 1), size):
            got = simulate_pairwise_round(
                config, variant, models, set(victims),
                stream.derive(f"r/{victims}"),
            )
            want = vector_sum(
                [models[i] for i in range(1, n + 1) if i not in victims]
            )
            assert got == want, victims
            checked += 1
    assert checked == sum(
        len(list(itertools.combinations(range(n), s))) for s in range(d_tol + 1)
    )


def test_single_user_round():
    config = ProtocolConfig(1, 0, 0, 1, 5, 257)
    variant = complete_graph_variant(config)
    models = {1: SeedStream(b"solo").draw_vector(5, 257)}
    got = simulate_pairwise_round(config, variant, models, set(),
                                  SeedStream(b"proto"))
    assert got == models[1]


# ---- sparse variant -------------------------------------------------------


def test_sparse_matches_complete_when_degree_saturates():
    config = ProtocolConfig(5, 2, 1, 3, 6, 257)
    stream_models = SeedStream(b"models")
    models = {
        uid: stream_models.derive(str(uid)).draw_vector(6, 257)
        for uid in range(1, 6)
    }
    complete = complete_graph_variant(config)
    sparse = sparse_graph_variant(config, target_degree=4)
    assert sparse.graph == complete.graph
    assert sparse.share_threshold == complete.share_threshold == 2
    a = simulate_pairwise_round(config, complete, models, {4},
                                SeedStream(b"same"))
    b = simulate_pairwise_round(config, sparse, models, {4},
                                SeedStream(b"same"))
    assert a == b == vector_sum([models[i] for i in (1, 2, 3, 5)])


def test_sparse_trials_succeed_exactly_when_neighborhoods_hold():
    # Seeded trials over several sizes: recovery either returns the exact
    # survivor sum or raises a detected failure, and which one happens is
    # fully predicted by per-vertex share coverage.
    rng_stream = SeedStream(b"sparse-trials")
    outcomes = {"ok": 0, "fail": 0}
    trial = 0
    for n in (8, 16, 24, 32):
        config = ProtocolConfig(n, 0, n - 1, 1, 2, 257)
        variant = sparse_graph_variant(config)
        for rep in range(75):
            trial += 1
            pick = SeedStream(f"pick/{n}/{rep}".encode())
            rate = 0.1 if rep % 2 == 0 else 0.3
            n_victims = int(rate * n)
            order = sorted(
                range(1, n + 1),
                key=lambda uid: pick.derive(str(uid)).draw_integers(1, 10**9)[0],
            )
            victims = set(order[:n_victims])
            models = {
                uid: pick.derive(f"m/{uid}").draw_vector(2, 257)
                for uid in range(1, n + 1)
            }
            survivors = set(range(1, n + 1)) - victims
            feasible = recovery_feasible(variant, survivors)
            try:
                got = simulate_pairwise_round(
                    config, variant, models, victims,
                    SeedStream(f"trial/{n}/{rep}".encode()),
                )
            except RecoveryFailedError:
                outcomes["fail"] += 1
                assert not feasible, (n, rep, sorted(victims))
            else:
                outcomes["ok"] += 1
                assert feasible, (n, rep, sorted(victims))
                assert got == vector_sum([models[i] for i in sorted(survivors)])
    assert trial == 300 and outcomes["ok"] > 0


# ---- share collection discipline ------------------------------------------


def test_wrong_kind_share_is_refused():
    config, users, server, models = golden_round()
    survivors = server.announce_survivors([2, 3])
    bad = users[2].share_response(survivors, server.dropped)
    # Claim key-kind material for a survivor.
    origin = 3
    bad[origin] = (KIND_KEY, (12345,))
    with pytest.raises(ShareConflictError):
        server.collect_share_response(2, bad)


def test_mixed_kinds_for_one_user_are_refused():
    config, users, server, models = golden_round()
    server.announce_survivors([2, 3])
    server.collect_share_response(2, {3: (KIND_SEED, users[2]._held[3][0])})
    with pytest.raises(ShareConflictError):
        server.collect_share_response(3, {3: (KIND_KEY, (users[3]._held[3][1],))})


def test_tampered_key_share_is_detected_not_silent():
    config, users, server, models = golden_round()
    survivors = server.announce_survivors([2, 3])
    for uid in (2, 3):
        records = users[uid].share_response(survivors, server.dropped)
        if uid == 3:
            kind, elems = records[1]
            records[1] = (kind, (elems[0] ^ 1,))
        server.collect_share_response(uid, records)
    with pytest.raises(RecoveryFailedError):
        server.recover()


def test_insufficient_responders_fail_deterministically():
    config, users, server, models = golden_round()
    survivors = server.announce_survivors([2, 3])
    server.collect_share_response(2, users[2].share_response(survivors,
                                                             server.dropped))
    with pytest.raises(RecoveryFailedError):
        server.recover()


def test_duplicate_uploads_and_keys_rejected():
    config = ProtocolConfig(2, 0, 0, 1, 2, 257)
    variant = complete_graph_variant(config)
    server = PairwiseMaskServer(config, variant.graph, 0)
    server.receive_public_key(1, 5)
    with pytest.raises(DuplicateShareError):
        server.receive_public_key(1, 5)
    server.receive_masked_model(1, FieldVector([1, 2], 257))
    with pytest.raises(DuplicateShareError):
        server.receive_masked_model(1, FieldVector([1, 2], 257))
    with pytest.raises(MissingShareError):
        server.announce_survivors([2])


# ---- wire formats ---------------------------------------------------------


def test_secret_share_message_round_trip():
    seed_share = tuple(range(100, 100 + SEED_SHARE_LEN))
    blob = encode_secret_share_message(3, 7, 1, seed_share, 2**60 - 3)
    assert decode_secret_share_message(blob) == (3, 7, 1, seed_share, 2**60 - 3)


def test_share_response_round_trip():
    records = {
        2: (KIND_SEED, tuple(range(SEED_SHARE_LEN))),
        5: (KIND_KEY, (987654321,)),
    }
    blob = encode_share_response(9, 4, records)
    responder, round_id, got = decode_share_response(blob)
    assert (responder, round_id) == (9, 4)
    assert got == records
