"""Identifiers, digests, signatures, canonical encoding and the seeded RNG.

Everything here is pure.  Identifiers are plain ``int`` values of a fixed
bit width ``s``; digests are 32-byte ``bytes`` (SHA-256).
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
DEFAULT_ID_BITS = 32
MAX_ID_BITS = 256

_LEN = struct.Struct(">I")

#: Pinned description of the random source used by :func:`seeded_rng`.
RNG_ALGORITHM = "MT19937 (CPython random.Random, integer seed), version 1"


class EncodingError(ValueError):
    pass


def canonical_encode(fields: Iterable[bytes]) -> bytes:
    """Length-prefix every field (4-byte big-endian) and concatenate.

    Field roles are positional: callers always pass fields in their declared
    order, so the framing alone makes the encoding injective.
    """
    out = bytearray()
    for f in fields:
        out += _LEN.pack(len(f))
        out += f
    return bytes(out)


def canonical_decode(data: bytes) -> list[bytes]:
    fields = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise EncodingError("truncated length prefix")
        (ln,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + ln > n:
            raise EncodingError("field overruns buffer")
        fields.append(bytes(data[pos:pos + ln]))
        pos += ln
    return fields


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def truncate(d: bytes, s: int) -> int:
    """Top ``s`` bits of a digest as an unsigned identifier."""
    if not 1 <= s <= MAX_ID_BITS:
        raise ValueError(f"identifier width must be in [1, {MAX_ID_BITS}], got {s}")
    return int.from_bytes(d, "big") >> (DIGEST_SIZE * 8 - s)


def id_bytes(ident: int, s: int) -> bytes:
    return ident.to_bytes((s + 7) // 8, "big")


def int_bytes(value: int) -> bytes:
    """Signed integer as 8 big-endian bytes (amounts, indices)."""
    return value.to_bytes(8, "big", signed=True)


def identifier_of(public_key: bytes, s: int) -> int:
    return truncate(digest(public_key), s)


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    signing_handle: object = field(repr=False, compare=False)


class SignatureScheme(Protocol):
    name: str

    def generate(self, rng: random.Random) -> KeyPair: ...

    def sign(self, keypair: KeyPair, message_digest: bytes) -> bytes: ...

    def verify(self, public_key: bytes, message_digest: bytes, signature: bytes) -> bool: ...


class SimulatedSignatures:
    """Keyed-MAC signatures: fast, unforgeable without the per-run secret.

    The tag for a peer is a BLAKE2b MAC whose key is derived from the run
    secret and the peer's public key.  Verification recomputes the tag, so it
    only works inside the run that owns the secret.
    """

    name = "simulated"

    def __init__(self, run_secret: bytes):
        self._secret = run_secret
        self._keys: dict[bytes, bytes] = {}

    def _key(self, public_key: bytes) -> bytes:
        k = self._keys.get(public_key)
        if k is None:
            k = hashlib.blake2b(public_key, key=self._secret, digest_size=32,
                                person=b"lc-sig-key").digest()
            self._keys[public_key] = k
        return k

    def generate(self, rng: random.Random) -> KeyPair:
        pk = rng.getrandbits(256).to_bytes(32, "big")
        return KeyPair(pk, self._key(pk))

    def sign(self, keypair: KeyPair, message_digest: bytes) -> bytes:
        return hashlib.blake2b(message_digest, key=keypair.signing_handle,
                               digest_size=16).digest()

    def verify(self, public_key: bytes, message_digest: bytes, signature: bytes) -> bool:
        if len(signature) != 16:
            return False
        tag = hashlib.blake2b(message_digest, key=self._key(public_key),
                              digest_size=16).digest()
        return hmac.compare_digest(tag, signature)


class Ed25519Signatures:
    """Real Ed25519 signatures (``cryptography``); seeded key generation."""

    name = "ed25519"

    def generate(self, rng: random.Random) -> KeyPair:
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
        from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

        sk = Ed25519PrivateKey.from_private_bytes(rng.getrandbits(256).to_bytes(32, "big"))
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(pk, sk)

    def sign(self, keypair: KeyPair, message_digest: bytes) -> bytes:
        return keypair.signing_handle.sign(message_digest)

    def verify(self, public_key: bytes, message_digest: bytes, signature: bytes) -> bool:
        from cryptography.exceptions import InvalidSignature
        from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message_digest)
        except (InvalidSignature, ValueError):
            return False
        return True


def make_scheme(name: str, run_secret: bytes = b"") -> SignatureScheme:
    if name == "simulated":
        return SimulatedSignatures(run_secret)
    if name == "ed25519":
        return Ed25519Signatures()
    raise ValueError(f"unknown signature scheme {name!r}")


class Keyring:
    """Directory of peer keys by identifier.

    Stands in for key distribution: verifiers look up a signer's public key by
    its identifier.  Signing goes through the keyring because the simulation
    owns every peer's signing handle.
    """

    def __init__(self, scheme: SignatureScheme, s: int):
        self.scheme = scheme
        self.s = s
        self._pairs: dict[int, KeyPair] = {}

    def register(self, keypair: KeyPair) -> int:
        ident = identifier_of(keypair.public_key, self.s)
        if ident in self._pairs:
            raise ValueError(f"identifier collision for {ident:#x}")
        self._pairs[ident] = keypair
        return ident

    def new_identity(self, rng: random.Random) -> int:
        while True:
            kp = self.scheme.generate(rng)
            if identifier_of(kp.public_key, self.s) not in self._pairs:
                return self.register(kp)

    def public_key(self, ident: int) -> bytes | None:
        kp = self._pairs.get(ident)
        return kp.public_key if kp is not None else None

    def sign(self, ident: int, message_digest: bytes) -> bytes:
        return self.scheme.sign(self._pairs[ident], message_digest)

    def verify(self, ident: int, message_digest: bytes, signature: bytes) -> bool:
        kp = self._pairs.get(ident)
        if kp is None:
            return False
        return self.scheme.verify(kp.public_key, message_digest, signature)

    def __contains__(self, ident: int) -> bool:
        return ident in self._pairs

    def __len__(self) -> int:
        return len(self._pairs)


def seeded_rng(seed: int) -> random.Random:
    """Deterministic random stream; see :data:`RNG_ALGORITHM`."""
    return random.Random(seed & 0xFFFFFFFFFFFFFFFF)


def derive_seed(seed: int, *labels: str | int) -> int:
    """Independent sub-stream seed, e.g. one per peer or per sweep cell."""
    parts: Sequence[bytes] = [int_bytes(seed & 0x7FFFFFFFFFFFFFFF)] + [str(x).encode() for x in labels]
    return int.from_bytes(digest(canonical_encode(parts))[:8], "big")
