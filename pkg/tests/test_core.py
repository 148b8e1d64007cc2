from __future__ import annotations

import hashlib
import struct

import pytest
from hypothesis import given, strategies as st

from lightchain.core import (RNG_ALGORITHM, EncodingError, Keyring, canonical_decode,
                             canonical_encode, derive_seed, digest, id_bytes, identifier_of,
                             int_bytes, make_scheme, seeded_rng, truncate)


def test_sha256_reference_vectors():
    assert digest(b"abc").hex() == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert digest(b"").hex() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_digest_deterministic_and_distinct_over_random_pairs():
    rng = seeded_rng(3)
    inputs = {rng.getrandbits(128).to_bytes(16, "big") for _ in range(100_000)}
    assert len({digest(b) for b in inputs}) == len(inputs)
    b = b"lightchain"
    assert digest(b) == digest(b)


def test_truncate_takes_top_bits():
    d = bytes([0b10110000]) + bytes(31)
    assert truncate(d, 1) == 1
    assert truncate(d, 4) == 0b1011
    assert truncate(d, 256) == int.from_bytes(d, "big")
    with pytest.raises(ValueError):
        truncate(d, 0)


def test_identifier_recomputes():
    pk = bytes(range(32))
    assert identifier_of(pk, 32) == identifier_of(pk, 32) == truncate(hashlib.sha256(pk).digest(), 32)


@given(st.lists(st.binary(max_size=40), max_size=8))
def test_canonical_encode_round_trip(fields):
    assert canonical_decode(canonical_encode(fields)) == fields


@given(st.lists(st.binary(max_size=8), max_size=4), st.lists(st.binary(max_size=8), max_size=4))
def test_canonical_encode_injective(a, b):
    if a != b:
        assert canonical_encode(a) != canonical_encode(b)


def test_canonical_encode_layout():
    assert canonical_encode([b"ab", b""]) == struct.pack(">I", 2) + b"ab" + struct.pack(">I", 0)
    with pytest.raises(EncodingError):
        canonical_decode(b"\x00\x00\x00\x05ab")


def test_int_and_id_bytes():
    assert int_bytes(-1) == b"\xff" * 8
    assert id_bytes(5, 12) == b"\x00\x05"


@pytest.mark.parametrize("scheme", ["simulated", "ed25519"])
def test_signature_round_trip_and_rejections(scheme):
    rng = seeded_rng(1)
    ring = Keyring(make_scheme(scheme, b"secret"), 32)
    ids = [ring.new_identity(rng) for _ in range(5)]
    msg = digest(b"message")
    flipped = bytes([msg[0] ^ 1]) + msg[1:]
    for signer in ids:
        sig = ring.sign(signer, msg)
        assert ring.verify(signer, msg, sig)
        assert not ring.verify(signer, flipped, sig)
        for other in ids:
            if other != signer:
                assert not ring.verify(other, msg, sig)
        assert not ring.verify(signer, msg, b"")
        assert not ring.verify(signer, msg, b"\x00" * 3)
        assert not ring.verify(signer, msg, sig[:-1] + bytes([sig[-1] ^ 0xFF]))


def test_unknown_identifier_does_not_verify():
    ring = Keyring(make_scheme("simulated", b"k"), 32)
    assert not ring.verify(12345, digest(b"x"), b"\x00" * 16)


def test_simulated_signatures_depend_on_run_secret():
    rng_a, rng_b = seeded_rng(9), seeded_rng(9)
    a = Keyring(make_scheme("simulated", b"one"), 32)
    b = Keyring(make_scheme("simulated", b"two"), 32)
    ia, ib = a.new_identity(rng_a), b.new_identity(rng_b)
    assert ia == ib
    msg = digest(b"m")
    assert not b.verify(ib, msg, a.sign(ia, msg))


def test_seeded_rng_streams():
    assert "MT19937" in RNG_ALGORITHM
    a, b = seeded_rng(42), seeded_rng(42)
    assert [a.random() for _ in range(1000)] == [b.random() for _ in range(1000)]
    x, y = seeded_rng(1), seeded_rng(2)
    assert [x.random() for _ in range(10)] != [y.random() for _ in range(10)]


def test_seeded_rng_uniform_mean():
    r = seeded_rng(5)
    n = 10 ** 6
    mean = sum(r.random() for _ in range(n)) / n
    # 3 sigma with sigma = sqrt(1/12/n) is about 0.00087
    assert abs(mean - 0.5) <= 0.002


def test_derive_seed_labels_are_independent():
    assert derive_seed(1, "churn") == derive_seed(1, "churn")
    assert derive_seed(1, "churn") != derive_seed(1, "workload")
    assert derive_seed(1, "churn") != derive_seed(2, "churn")
