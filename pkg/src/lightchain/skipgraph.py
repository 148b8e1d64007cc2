"""Skip Graph overlay over a simulated transport.

Peers are linked into per-level circular lists ordered by numerical ID.  A
peer's membership vector is its name ID read from the least significant bit
upward (``s`` bits), followed by ``TIE_BITS`` random tie-break bits, so
level ``l`` groups peers sharing an ``l``-bit prefix of that vector.  Peer
name IDs equal their numerical IDs, and reading the high bits first would
make every level a contiguous key range with no long links.  Offline peers
are unlinked from every level and relinked when they come back, so routing
only ever traverses online peers.

Transactions, blocks and transaction pointers are overlay nodes hosted by
peers (the owner plus any replicas).  They are indexed by the simulation
registry; searching for them routes through the peer graph and is charged
the routed path plus the hand-off to the matches.
"""

from __future__ import annotations

import bisect
import enum
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Container, Iterable, NamedTuple

from .core import EncodingError, Keyring, canonical_decode, canonical_encode, id_bytes

TIE_BITS = 32


def membership_bits(name_id: int, s: int) -> int:
    """``name_id`` with its ``s`` bits reversed."""
    return int(format(name_id, f"0{s}b")[::-1], 2)


class OverlayError(Exception):
    pass


class DuplicateNumId(OverlayError):
    pass


class IntroducerOffline(OverlayError):
    pass


class NotFound(OverlayError):
    pass


class EmptyOverlay(OverlayError):
    pass


class Kind(enum.Enum):
    PEER = "peer"
    TRANSACTION = "transaction"
    BLOCK = "block"
    POINTER = "pointer"


@dataclass(eq=False)
class OverlayNode:
    num_id: int
    name_id: int
    kind: Kind
    host: int
    address: bytes = b""
    payload: object = None
    holders: set[int] = field(default_factory=set)
    # routing state, peers only
    mvec: int = 0
    left: list["OverlayNode"] = field(default_factory=list, repr=False)
    right: list["OverlayNode"] = field(default_factory=list, repr=False)

    @property
    def linked(self) -> bool:
        return bool(self.right)


@dataclass(frozen=True)
class Hop:
    ident: int
    address: bytes
    signature: bytes


@dataclass(frozen=True, eq=False)
class SearchProof:
    """Signed hop chain.  Each hop signs the query, its position, its own
    identity and the previous hop's signature."""

    kind: str  # "num" or "name"
    s: int
    target: int
    hops: tuple[Hop, ...]
    result: int

    def to_bytes(self) -> bytes:
        return self._encoded

    @cached_property
    def _encoded(self) -> bytes:
        hop_fields = [canonical_encode([id_bytes(h.ident, self.s), h.address, h.signature])
                      for h in self.hops]
        return canonical_encode([
            self.kind.encode(),
            struct.pack(">H", self.s),
            id_bytes(self.target, self.s),
            id_bytes(self.result, self.s),
            canonical_encode(hop_fields),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SearchProof":
        parts = canonical_decode(data)
        if len(parts) != 5 or len(parts[1]) != 2:
            raise EncodingError("malformed search proof")
        (s,) = struct.unpack(">H", parts[1])
        hops = []
        for raw in canonical_decode(parts[4]):
            f = canonical_decode(raw)
            if len(f) != 3:
                raise EncodingError("malformed hop")
            hops.append(Hop(int.from_bytes(f[0], "big"), f[1], f[2]))
        return cls(parts[0].decode("ascii", "replace"), s, int.from_bytes(parts[2], "big"),
                   tuple(hops), int.from_bytes(parts[3], "big"))

    @property
    def length(self) -> int:
        """Messages forwarded along the path (hops beyond the origin)."""
        return len(self.hops) - 1


_HOP_HEAD = struct.Struct(">cHH")


def hop_message(kind: str, s: int, target: int, position: int, ident: int,
                address: bytes, prev_sig: bytes) -> bytes:
    w = (s + 7) // 8
    return b"".join((
        _HOP_HEAD.pack(b"N" if kind == "num" else b"M", s, position),
        target.to_bytes(w, "big"), ident.to_bytes(w, "big"),
        bytes((len(prev_sig),)), prev_sig, address,
    ))


class Verdict(NamedTuple):
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


BAD_SIGNATURE = "BadSignature"
BLACKLISTED_HOP = "BlacklistedHop"
NON_MONOTONE = "NonMonotone"


def verify_search_proof(proof: SearchProof, keyring: Keyring,
                        blacklist: Container[int] = frozenset()) -> Verdict:
    """Check every hop signature, ring-distance monotonicity and the
    blacklist.  Never raises."""
    if proof.kind not in ("num", "name") or not proof.hops or proof.s != keyring.s:
        return Verdict(False, BAD_SIGNATURE)
    if proof.hops[-1].ident != proof.result:
        return Verdict(False, BAD_SIGNATURE)
    modulus = 1 << proof.s
    prev_sig = b""
    prev_dist = None
    for pos, hop in enumerate(proof.hops):
        if hop.ident in blacklist:
            return Verdict(False, BLACKLISTED_HOP)
        msg = hop_message(proof.kind, proof.s, proof.target, pos, hop.ident, hop.address, prev_sig)
        if not keyring.verify(hop.ident, msg, hop.signature):
            return Verdict(False, BAD_SIGNATURE)
        dist = (proof.target - hop.ident) % modulus
        if prev_dist is not None and dist >= prev_dist:
            return Verdict(False, NON_MONOTONE)
        prev_dist = dist
        prev_sig = hop.signature
    return Verdict(True)


def _identity(payload: object) -> object:
    """Records are the same when their digests match."""
    return getattr(payload, "h", payload)


class SkipGraph:
    """Peer routing structure plus the registry of hosted record nodes."""

    def __init__(self, keyring: Keyring, tie_source: Callable[[], int] | None = None):
        self.keyring = keyring
        self.s = keyring.s
        self.modulus = 1 << self.s
        self._tie = tie_source or (lambda: 0)
        self.peers: dict[int, OverlayNode] = {}
        self._online: list[int] = []  # sorted num_ids of linked peers
        self.records: dict[tuple[Kind, int, int], OverlayNode] = {}
        self._by_name: dict[int, list[OverlayNode]] = defaultdict(list)
        self._by_num: dict[int, list[OverlayNode]] = defaultdict(list)
        self.messages: Counter[str] = Counter()

    # ------------------------------------------------------------------ peers

    def __len__(self) -> int:
        return len(self._online)

    def is_online(self, peer_id: int) -> bool:
        node = self.peers.get(peer_id)
        return node is not None and node.linked

    def online_ids(self) -> list[int]:
        return list(self._online)

    def level0(self) -> list[int]:
        """In-order traversal of the level-0 ring starting from the minimum."""
        if not self._online:
            return []
        start = self.peers[self._online[0]]
        out = [start.num_id]
        cur = start.right[0]
        while cur is not start:
            out.append(cur.num_id)
            cur = cur.right[0]
        return out

    def _prefix(self, node: OverlayNode, level: int) -> int:
        return node.mvec >> (self.s + TIE_BITS - level)

    def new_peer(self, peer_id: int, address: bytes = b"") -> OverlayNode:
        node = OverlayNode(peer_id, peer_id, Kind.PEER, peer_id, address or b"sim:%x" % peer_id)
        node.holders.add(peer_id)
        return node

    def join(self, node: OverlayNode, introducer: int | None) -> int:
        """Link ``node`` into every level; returns messages spent."""
        if node.kind is not Kind.PEER:
            raise ValueError("only peers join the routing structure; use insert_record")
        existing = self.peers.get(node.num_id)
        if (existing is not None and existing is not node) or node.linked:
            raise DuplicateNumId(f"{node.num_id:#x}")
        if self._online:
            if introducer is None or not self.is_online(introducer):
                raise IntroducerOffline(f"introducer {introducer!r} is not online")
        if not node.mvec:
            node.mvec = (membership_bits(node.name_id, self.s) << TIE_BITS) \
                | (self._tie() & ((1 << TIE_BITS) - 1))
        self.peers[node.num_id] = node
        cost = self._link(node, introducer)
        self.messages["join"] += cost
        return cost

    def _link(self, node: OverlayNode, introducer: int | None) -> int:
        if not self._online:
            node.left = [node]
            node.right = [node]
            self._online.append(node.num_id)
            return 0
        pred, hops = self._route(self.peers[introducer], node.num_id)
        cost = len(hops) - 1
        succ = pred.right[0]
        node.left = [pred]
        node.right = [succ]
        pred.right[0] = node
        succ.left[0] = node
        cost += 1
        level = 1
        max_level = self.s + TIE_BITS
        while level <= max_level:
            want = self._prefix(node, level)
            cur = node.right[level - 1]
            match = None
            while cur is not node:
                cost += 1
                if self._prefix(cur, level) == want:
                    match = cur
                    break
                cur = cur.right[level - 1]
            if match is None:
                break
            if len(match.right) <= level:
                # match was alone in its prefix group: open the ring
                match.right.append(node)
                match.left.append(node)
                node.right.append(match)
                node.left.append(match)
                level += 1
                continue
            before = match.left[level]
            node.right.append(match)
            node.left.append(before)
            before.right[level] = node
            match.left[level] = node
            level += 1
        bisect.insort(self._online, node.num_id)
        return cost

    def _unlink(self, node: OverlayNode) -> int:
        cost = 0
        for level in range(len(node.right)):
            l, r = node.left[level], node.right[level]
            if l is not node:
                l.right[level] = r
                r.left[level] = l
                cost += 1
        node.left = []
        node.right = []
        i = bisect.bisect_left(self._online, node.num_id)
        del self._online[i]
        return cost

    def delete(self, node: OverlayNode) -> int:
        if node.kind is not Kind.PEER:
            return self.remove_record(node)
        if self.peers.get(node.num_id) is not node:
            raise NotFound(f"{node.num_id:#x}")
        cost = self._unlink(node) if node.linked else 0
        del self.peers[node.num_id]
        self.messages["delete"] += cost
        return cost

    def set_online(self, peer_id: int, online: bool) -> int:
        node = self.peers[peer_id]
        if online == node.linked:
            return 0
        if not online:
            cost = self._unlink(node)
            self.messages["leave"] += cost
            return cost
        intro = None
        if self._online:
            i = bisect.bisect_left(self._online, peer_id) % len(self._online)
            intro = self._online[i]
        cost = self._link(node, intro)
        self.messages["rejoin"] += cost
        return cost

    # ---------------------------------------------------------------- routing

    def _route(self, origin: OverlayNode, target: int) -> tuple[OverlayNode, list[OverlayNode]]:
        m = self.modulus
        cur = origin
        d = (target - cur.num_id) % m
        hops = [cur]
        level = len(cur.right) - 1
        while level >= 0:
            r = cur.right[level]
            dr = (target - r.num_id) % m
            if dr < d:
                cur, d = r, dr
                hops.append(cur)
            else:
                level -= 1
        return cur, hops

    def _sign_path(self, kind: str, target: int, path: list[OverlayNode]) -> SearchProof:
        hops = []
        prev = b""
        s = self.s
        sign = self.keyring.sign
        for pos, node in enumerate(path):
            sig = sign(node.num_id, hop_message(kind, s, target, pos, node.num_id, node.address, prev))
            hops.append(Hop(node.num_id, node.address, sig))
            prev = sig
        return SearchProof(kind, s, target, tuple(hops), path[-1].num_id)

    def _origin(self, origin: int) -> OverlayNode:
        if not self._online:
            raise EmptyOverlay("no online peers")
        node = self.peers.get(origin)
        if node is None or not node.linked:
            raise IntroducerOffline(f"origin {origin:#x} is not online")
        return node

    def search_num_id(self, origin: int, target: int) -> tuple[OverlayNode, SearchProof]:
        """Peer with ``num_id == target`` if online, else the online peer with
        the greatest ``num_id`` below it, wrapping to the global maximum."""
        result, path = self._route(self._origin(origin), target)
        self.messages["search_num"] += len(path) - 1
        return result, self._sign_path("num", target, path)

    def resolve(self, target: int) -> int:
        """Oracle for :meth:`search_num_id`'s result (no messages)."""
        if not self._online:
            raise EmptyOverlay("no online peers")
        i = bisect.bisect_right(self._online, target) - 1
        return self._online[i]  # i == -1 wraps to the maximum

    def search_name_id(self, origin: int, target: int, kinds: Iterable[Kind] | None = None,
                       prove: bool = True) -> tuple[list[OverlayNode], SearchProof | None]:
        """All online nodes whose name ID equals ``target``.  With
        ``prove=False`` the path is charged but no proof is assembled."""
        start = self._origin(origin)
        _, path = self._route(start, target)
        wanted = set(kinds) if kinds is not None else None
        matches = [n for n in self._by_name.get(target, ())
                   if (wanted is None or n.kind in wanted) and self.node_online(n)]
        if wanted is None or Kind.PEER in wanted:
            p = self.peers.get(target)
            if p is not None and p.linked:
                matches.insert(0, p)
        self.messages["search_name"] += len(path) - 1 + len(matches)
        return matches, (self._sign_path("name", target, path) if prove else None)

    def lookup(self, origin: int, kind: Kind, num_id: int) -> tuple[list[OverlayNode], SearchProof]:
        """Online record nodes of ``kind`` with numerical ID ``num_id``."""
        start = self._origin(origin)
        _, path = self._route(start, num_id)
        matches = [n for n in self._by_num.get(num_id, ())
                   if n.kind is kind and self.node_online(n)]
        self.messages["search_num"] += len(path) - 1 + (1 if matches else 0)
        return matches, self._sign_path("num", num_id, path)

    # ---------------------------------------------------------------- records

    def node_online(self, node: OverlayNode) -> bool:
        peers = self.peers
        for h in node.holders:
            p = peers.get(h)
            if p is not None and p.linked:
                return True
        return False

    def insert_record(self, kind: Kind, num_id: int, name_id: int, holder: int,
                      payload: object = None) -> OverlayNode:
        """Insert a record node, or add ``holder`` as a replica of an existing
        identical one."""
        key = (kind, num_id, name_id)
        node = self.records.get(key)
        if node is None:
            node = OverlayNode(num_id, name_id, kind, holder, payload=payload)
            self.records[key] = node
            self._by_name[name_id].append(node)
            self._by_num[num_id].append(node)
        elif payload is not None and node.payload is not None and node.payload is not payload \
                and _identity(node.payload) != _identity(payload):
            raise DuplicateNumId(f"{kind.value} {num_id:#x} already holds a different record")
        node.holders.add(holder)
        return node

    def drop_holder(self, kind: Kind, num_id: int, name_id: int, holder: int) -> OverlayNode | None:
        """``holder`` takes down its copy; the node disappears with its last holder."""
        node = self.records.get((kind, num_id, name_id))
        if node is None:
            return None
        node.holders.discard(holder)
        if not node.holders:
            self.remove_record(node)
        return node

    def remove_record(self, node: OverlayNode) -> int:
        key = (node.kind, node.num_id, node.name_id)
        if self.records.get(key) is not node:
            raise NotFound(f"{node.kind.value} {node.num_id:#x}")
        del self.records[key]
        lst = self._by_name[node.name_id]
        lst.remove(node)
        if not lst:
            del self._by_name[node.name_id]
        lst = self._by_num[node.num_id]
        lst.remove(node)
        if not lst:
            del self._by_num[node.num_id]
        node.holders.clear()
        return 1

    def record(self, kind: Kind, num_id: int, name_id: int) -> OverlayNode | None:
        return self.records.get((kind, num_id, name_id))

    def records_named(self, name_id: int) -> list[OverlayNode]:
        return list(self._by_name.get(name_id, ()))

    # ------------------------------------------------------------------- dump

    def dump(self) -> list[dict]:
        rows = []
        for pid in sorted(self.peers):
            p = self.peers[pid]
            rows.append({"num_id": p.num_id, "name_id": p.name_id, "kind": p.kind.value,
                         "host_peer": p.host, "online": p.linked})
        for node in sorted(self.records.values(),
                           key=lambda n: (n.kind.value, n.num_id, n.name_id)):
            rows.append({"num_id": node.num_id, "name_id": node.name_id, "kind": node.kind.value,
                         "host_peer": node.host, "online": self.node_online(node)})
        return rows
