"""Transactions, blocks, transaction pointers and the local chain index."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

from .core import (ZERO_DIGEST, canonical_decode, canonical_encode, digest, id_bytes,
                   int_bytes, truncate)
from .skipgraph import SearchProof


class LedgerError(Exception):
    pass


class IndexOutOfRange(LedgerError):
    pass


class UnresolvableDigest(LedgerError):
    pass


class NotMember(LedgerError):
    pass


@dataclass(frozen=True)
class Sigma:
    owner: bytes = b""
    validators: tuple[tuple[int, bytes], ...] = ()

    def encode(self, s: int) -> bytes:
        return canonical_encode([
            self.owner,
            canonical_encode([canonical_encode([id_bytes(v, s), sig]) for v, sig in self.validators]),
        ])

    def with_validators(self, sigs: Sequence[tuple[int, bytes]]) -> "Sigma":
        return Sigma(self.owner, tuple(sigs))


def encode_proofs(proofs: Sequence[SearchProof]) -> bytes:
    return canonical_encode([p.to_bytes() for p in proofs])


@dataclass(frozen=True, eq=False)
class Transaction:
    prev: bytes
    owner: int
    cont: bytes
    search_proof: tuple[SearchProof, ...]
    h: bytes
    sigma: Sigma
    s: int

    is_block = False

    @property
    def payload(self) -> bytes:
        return self.cont

    @cached_property
    def encoded(self) -> bytes:
        return canonical_encode([self.prev, id_bytes(self.owner, self.s), self.cont,
                                 encode_proofs(self.search_proof), self.h, self.sigma.encode(self.s)])

    def recompute_hash(self) -> bytes:
        return tx_hash(self.prev, self.owner, self.cont, self.search_proof, self.s)

    def with_sigma(self, sigma: Sigma) -> "Transaction":
        return Transaction(self.prev, self.owner, self.cont, self.search_proof, self.h, sigma, self.s)


def encode_set(txs: Sequence[Transaction], mode: str = "full") -> bytes:
    if mode == "digest":
        return canonical_encode([tx.h for tx in txs])
    return canonical_encode([tx.encoded for tx in txs])


@dataclass(frozen=True, eq=False)
class Block:
    prev: bytes
    owner: int
    S: tuple[Transaction, ...]
    search_proof: tuple[SearchProof, ...]
    h: bytes
    sigma: Sigma
    s: int
    set_encoding: str = "full"

    is_block = True

    @cached_property
    def payload(self) -> bytes:
        return encode_set(self.S, self.set_encoding)

    def recompute_hash(self) -> bytes:
        return blk_hash(self.prev, self.owner, self.S, self.search_proof, self.s, self.set_encoding)

    def with_sigma(self, sigma: Sigma) -> "Block":
        b = Block(self.prev, self.owner, self.S, self.search_proof, self.h, sigma, self.s,
                  self.set_encoding)
        if "payload" in self.__dict__:
            b.__dict__["payload"] = self.payload
        return b


def _record_hash(prev: bytes, owner: int, payload: bytes, proofs: Sequence[SearchProof], s: int) -> bytes:
    return digest(canonical_encode([prev, id_bytes(owner, s), payload, encode_proofs(proofs)]))


def tx_hash(prev: bytes, owner: int, cont: bytes, search_proof: Sequence[SearchProof], s: int) -> bytes:
    return _record_hash(prev, owner, cont, search_proof, s)


def blk_hash(prev: bytes, owner: int, S: Sequence[Transaction], search_proof: Sequence[SearchProof],
             s: int, set_encoding: str = "full") -> bytes:
    return _record_hash(prev, owner, encode_set(S, set_encoding), search_proof, s)


def sort_set(txs: Sequence[Transaction]) -> tuple[Transaction, ...]:
    return tuple(sorted(txs, key=lambda tx: tx.h))


def validator_id(prev: bytes, owner: int, payload: bytes, i: int, s: int,
                 alpha: int | None = None) -> int:
    """Numerical ID of the ``i``-th validator.  The search proof is not an
    input, so it can be computed before any search happens."""
    if i < 1 or (alpha is not None and i > alpha):
        raise IndexOutOfRange(f"validator index {i} outside [1, {alpha}]")
    return truncate(digest(canonical_encode([prev, id_bytes(owner, s), payload, int_bytes(i)])), s)


def validator_id_range(prev: bytes, owner: int, payload: bytes, s: int, start: int, stop: int) -> list[int]:
    """``validator_id`` for ``i = start..stop`` inclusive, hashing the shared
    prefix once."""
    if start < 1:
        raise IndexOutOfRange(f"validator index {start} below 1")
    base = hashlib.sha256(canonical_encode([prev, id_bytes(owner, s), payload]))
    out = []
    for i in range(start, stop + 1):
        h = base.copy()
        h.update(canonical_encode([int_bytes(i)]))
        out.append(truncate(h.digest(), s))
    return out


def validator_ids(record: Transaction | Block, alpha: int) -> list[int]:
    return validator_id_range(record.prev, record.owner, record.payload, record.s, 1, alpha)


# --------------------------------------------------------------------- payloads

TRANSFER = b"transfer"
MISBEHAVIOR = b"misbehavior"
ALLOCATION = b"allocation"


@dataclass(frozen=True)
class Transfer:
    receiver: int
    amount: int


@dataclass(frozen=True)
class Evidence:
    guilty: tuple[int, ...]
    kind: str
    evidence_hex: str
    reporter: int

    def to_json(self) -> dict:
        return {"guilty": list(self.guilty), "kind": self.kind,
                "evidence_hex": self.evidence_hex, "reporter": self.reporter}

    @classmethod
    def from_json(cls, obj: dict) -> "Evidence":
        g = obj["guilty"]
        return cls(tuple(g) if isinstance(g, list) else (g,), obj["kind"], obj["evidence_hex"],
                   obj["reporter"])


def encode_transfer(receiver: int, amount: int, s: int) -> bytes:
    return canonical_encode([TRANSFER, id_bytes(receiver, s), int_bytes(amount)])


def encode_allocation(receiver: int, amount: int, s: int) -> bytes:
    return canonical_encode([ALLOCATION, id_bytes(receiver, s), int_bytes(amount)])


def encode_evidence(ev: Evidence) -> bytes:
    return canonical_encode([MISBEHAVIOR, json.dumps(ev.to_json(), sort_keys=True).encode()])


def decode_cont(cont: bytes) -> Transfer | Evidence | None:
    """Parse a ``cont`` field; ``None`` when it is not a known payload."""
    try:
        parts = canonical_decode(cont)
    except ValueError:
        return None
    if len(parts) == 3 and parts[0] in (TRANSFER, ALLOCATION) and len(parts[2]) == 8:
        return Transfer(int.from_bytes(parts[1], "big"), int.from_bytes(parts[2], "big", signed=True))
    if len(parts) == 2 and parts[0] == MISBEHAVIOR:
        try:
            return Evidence.from_json(json.loads(parts[1]))
        except (ValueError, KeyError, TypeError):
            return None
    return None


_ALLOCATION_PREFIX = canonical_encode([ALLOCATION])


def is_allocation(tx: Transaction) -> bool:
    return tx.cont.startswith(_ALLOCATION_PREFIX)


# ------------------------------------------------------------------- pointers

@dataclass(frozen=True)
class TxPointer:
    owner: int
    block_h: bytes
    s: int

    @property
    def name_id(self) -> int:
        return self.owner

    @property
    def num_id(self) -> int:
        return truncate(self.block_h, self.s)


def make_pointer(tx: Transaction, blk: Block) -> TxPointer:
    if not any(t.h == tx.h for t in blk.S):
        raise NotMember("transaction is not in the block")
    return TxPointer(tx.owner, blk.h, blk.s)


# ---------------------------------------------------------------- chain index

def make_genesis(allocations: Sequence[tuple[int, int]], s: int, set_encoding: str = "full") -> Block:
    txs = []
    for receiver, amount in allocations:
        cont = encode_allocation(receiver, amount, s)
        h = tx_hash(ZERO_DIGEST, 0, cont, (), s)
        txs.append(Transaction(ZERO_DIGEST, 0, cont, (), h, Sigma(), s))
    S = sort_set(txs)
    h = blk_hash(ZERO_DIGEST, 0, S, (), s, set_encoding)
    return Block(ZERO_DIGEST, 0, S, (), h, Sigma(), s, set_encoding)


@dataclass
class ChainIndex:
    """Known validated blocks keyed by digest, with depths and children.

    ``main`` lists the followed branch by depth; ancestor queries on it are
    O(1), everything else walks ``prev`` links until it meets the branch.
    """

    genesis: Block
    blocks: dict[bytes, Block] = field(default_factory=dict)
    depth: dict[bytes, int] = field(default_factory=dict)
    children: dict[bytes, list[bytes]] = field(default_factory=dict)
    main: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        g = self.genesis
        self.blocks[g.h] = g
        self.depth[g.h] = 0
        self.children.setdefault(g.h, [])
        self.main = [g.h]
        self._on_main = {g.h}

    def __contains__(self, h: bytes) -> bool:
        return h in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def tail(self) -> bytes:
        return self.main[-1]

    def add(self, blk: Block) -> None:
        if blk.h in self.blocks:
            return
        if blk.prev not in self.blocks:
            raise UnresolvableDigest(blk.prev.hex())
        self.blocks[blk.h] = blk
        self.depth[blk.h] = self.depth[blk.prev] + 1
        self.children.setdefault(blk.prev, []).append(blk.h)
        self.children.setdefault(blk.h, [])

    def set_tail(self, h: bytes) -> None:
        """Make ``h`` the end of the followed branch."""
        if h not in self.blocks:
            raise UnresolvableDigest(h.hex())
        branch = []
        cur = h
        while cur not in self._on_main:
            branch.append(cur)
            cur = self.blocks[cur].prev
        keep = self.depth[cur] + 1
        for old in self.main[keep:]:
            self._on_main.discard(old)
        del self.main[keep:]
        for b in reversed(branch):
            self.main.append(b)
            self._on_main.add(b)

    def on_main(self, h: bytes) -> bool:
        return h in self._on_main

    def parent(self, h: bytes) -> bytes | None:
        if h == self.genesis.h:
            return None
        return self.blocks[h].prev

    def ancestor_at(self, h: bytes, d: int) -> bytes:
        if h not in self.depth:
            raise UnresolvableDigest(h.hex())
        cur = h
        while self.depth[cur] > d:
            if cur in self._on_main:
                return self.main[d]
            cur = self.blocks[cur].prev
        return cur

    def precedes(self, a: bytes, b: bytes) -> bool:
        """``a`` is a strict ancestor of ``b`` on the prev-chain."""
        if a not in self.depth:
            raise UnresolvableDigest(a.hex())
        if b not in self.depth:
            raise UnresolvableDigest(b.hex())
        da, db = self.depth[a], self.depth[b]
        if da >= db:
            return False
        return self.ancestor_at(b, da) == a

    def path(self, h: bytes) -> list[bytes]:
        """Digests from genesis to ``h`` inclusive."""
        out = []
        cur: bytes | None = h
        while cur is not None:
            out.append(cur)
            cur = self.parent(cur)
        return out[::-1]
