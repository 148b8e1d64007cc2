"""Proof-of-Validation: record generation and validation, fork resolution,
views and bootstrapping, incentives, auditing and blacklisting.

The :class:`Network` object is the simulated world that peers act in: it
owns the overlay, the registry of validated blocks every peer can fetch,
and the per-peer views.  Honest views are immutable :class:`View`
snapshots shared between peers that sit at the same tail, so a thousand
synchronized peers cost one table.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

from .core import Keyring, canonical_encode, digest, id_bytes, int_bytes, truncate
from .ledger import (Block, ChainIndex, Evidence, Sigma, Transaction, Transfer, TxPointer,
                     blk_hash, decode_cont, encode_evidence, encode_transfer, is_allocation,
                     make_genesis, sort_set, tx_hash, validator_id_range)
from .skipgraph import (TIE_BITS, Kind, SearchProof, SkipGraph, Verdict,
                        verify_search_proof)


class ConsensusError(Exception):
    pass


class UnknownOwner(ConsensusError):
    pass


class InsufficientValidators(ConsensusError):
    def __init__(self, msg: str, result: "GenerationResult | None" = None):
        super().__init__(msg)
        self.result = result


class ProofVerificationFailed(ConsensusError):
    pass


class BootstrapFailed(ConsensusError):
    pass


class EmptySet(ConsensusError):
    pass


class NoPointerFound(ConsensusError):
    pass


# rejection reasons
UNSOUND = "Unsound"
INCORRECT = "Incorrect"
UNAUTHENTICATED = "Unauthenticated"
INSUFFICIENT_BALANCE = "InsufficientBalance"
INCONSISTENT = "Inconsistent"
POTENTIAL_FORK = "PotentialFork"
DUPLICATE_OWNER = "DuplicateOwnerInS"
TOO_FEW_TX = "TooFewTransactions"
REFUSED = "Refused"
STALE_PARTICIPANT = "BlacklistedParticipant"

# adversarial behavior flags
SIGN_ANYTHING = "sign-anything"
REFUSE_TO_SIGN = "refuse-to-sign"
EQUIVOCATE = "equivocate"
CORRUPT_VIEW = "corrupt-view"
INJECT_INVALID = "inject-invalid"
VALIDATION_CAPTURE = "validation-capture"
ADVERSARY_MODES = frozenset({SIGN_ANYTHING, REFUSE_TO_SIGN, EQUIVOCATE, CORRUPT_VIEW,
                             INJECT_INVALID, VALIDATION_CAPTURE})


@dataclass(frozen=True)
class Reject:
    reason: str
    detail: str = ""

    def __bool__(self) -> bool:
        return False


@dataclass
class PoVParams:
    t: int = 10
    alpha: int = 12
    min_tx: int = 1
    validation_fee: int = 2
    routing_fee: int = 1
    misbehavior_penalty: int = 20
    block_reward: int = 50
    audition_reward: int = 10
    pointer_grace: int = 2
    initial_balance: int = 1000
    set_encoding: str = "full"

    def validate(self) -> "PoVParams":
        if not 1 <= self.t <= self.alpha:
            raise ValueError(f"need 1 <= t <= alpha, got t={self.t}, alpha={self.alpha}")
        if self.min_tx < 1:
            raise ValueError("min_tx must be at least 1")
        if self.block_reward <= self.validation_fee + self.routing_fee:
            raise ValueError("block reward must exceed validation fee + routing fee")
        if min(self.validation_fee, self.routing_fee, self.misbehavior_penalty,
               self.audition_reward, self.pointer_grace, self.initial_balance) < 0:
            raise ValueError("fees, rewards, balances and grace must be nonnegative")
        if self.set_encoding not in ("full", "digest"):
            raise ValueError(f"unknown set encoding {self.set_encoding!r}")
        return self


# ----------------------------------------------------------------------- views

class ViewEntry(NamedTuple):
    num_id: int
    lastblk: bytes
    state: bytes
    balance: int


class Supply(NamedTuple):
    minted_rewards: int = 0
    minted_audition: int = 0
    burned: int = 0


class View:
    """Immutable (numID, lastblk, state, balance) table at one tail.

    ``committed`` is the newest committed block (the tail's parent, or
    genesis).  Inclusion of a transaction moves its owner's ``lastblk`` at
    once; balance effects of a block land when it gets a successor.
    ``base`` points at the view one block earlier while the tail is still
    pending, so a peer can switch to a lower-hash sibling.
    """

    __slots__ = ("tail", "committed", "entries", "blacklist", "supply", "base", "canonical",
                 "_digest")

    def __init__(self, tail: bytes, committed: bytes, entries: dict[int, ViewEntry],
                 blacklist: dict[int, bytes], supply: Supply, base: "View | None" = None,
                 canonical: bool = True):
        self.tail = tail
        self.committed = committed
        self.entries = entries
        self.blacklist = blacklist
        self.supply = supply
        self.base = base
        self.canonical = canonical
        self._digest: bytes | None = None

    def get(self, ident: int) -> ViewEntry:
        e = self.entries.get(ident)
        if e is None:
            raise UnknownOwner(f"{ident:#x} not in view")
        return e

    def total_balance(self) -> int:
        return sum(e.balance for e in self.entries.values())

    def digest(self) -> bytes:
        """Canonical digest, entries sorted by numerical ID."""
        if self._digest is None:
            rows = []
            for k in sorted(self.entries):
                e = self.entries[k]
                rows.append(b"".join((k.to_bytes(32, "big"), e.lastblk, e.state,
                                      int_bytes(e.balance))))
            bl = b"".join(k.to_bytes(32, "big") + v for k, v in sorted(self.blacklist.items()))
            self._digest = digest(canonical_encode([
                self.tail, self.committed, b"".join(rows), bl,
                b"".join(int_bytes(x) for x in self.supply)]))
        return self._digest


def genesis_view(genesis: Block) -> View:
    entries = {}
    for tx in genesis.S:
        c = decode_cont(tx.cont)
        entries[c.receiver] = ViewEntry(c.receiver, genesis.h, tx.h, c.amount)
    return View(genesis.h, genesis.h, entries, {}, Supply())


def routers_of(record: Transaction | Block) -> list[int]:
    """Intermediate hops over every search proof, skipping owner and validator."""
    cached = record.__dict__.get("_routers")
    if cached is not None:
        return cached
    out = []
    owner = record.owner
    for p in record.search_proof:
        for hop in p.hops[1:-1]:
            if hop.ident != owner and hop.ident != p.result:
                out.append(hop.ident)
    record.__dict__["_routers"] = out
    return out


def fee_dues(record: Transaction | Block, params: PoVParams) -> tuple[tuple[int, int], ...]:
    """Fees owed for ``record`` grouped by payee, in first-payment order."""
    key = f"_dues_{params.validation_fee}_{params.routing_fee}"
    cached = record.__dict__.get(key)
    if cached is not None:
        return cached
    dues: dict[int, int] = {}
    for v, _ in record.sigma.validators:
        dues[v] = dues.get(v, 0) + params.validation_fee
    for r in routers_of(record):
        dues[r] = dues.get(r, 0) + params.routing_fee
    out = tuple(dues.items())
    record.__dict__[key] = out
    return out


def fees_of(record: Transaction | Block, params: PoVParams) -> int:
    return (params.t * params.validation_fee
            + len(routers_of(record)) * params.routing_fee)


def _commit_effects(entries: dict[int, ViewEntry], blacklist: dict[int, bytes], supply: Supply,
                    blk: Block, params: PoVParams) -> tuple[dict[int, bytes], Supply]:
    """Apply fees, rewards, transfers and penalties of a block that just
    became committed.  Payments never overdraw: a payer short of funds pays
    what it has, so every balance stays nonnegative and value is conserved."""
    minted_r, minted_a, burned = supply
    bl = blacklist

    def credit(x: int, amt: int) -> bool:
        if x in bl:
            return False
        e = entries.get(x)
        if e is None:
            entries[x] = ViewEntry(x, b"", b"", amt)
        else:
            entries[x] = ViewEntry(e.num_id, e.lastblk, e.state, e.balance + amt)
        return True

    def take(x: int, amt: int) -> int:
        e = entries.get(x)
        if e is None or amt <= 0:
            return 0
        amt = min(amt, e.balance)
        entries[x] = ViewEntry(e.num_id, e.lastblk, e.state, e.balance - amt)
        return amt

    def pay(payer: int, payee: int, amt: int) -> None:
        if payer in bl or payee in bl:
            return
        got = take(payer, amt)
        if got:
            credit(payee, got)

    def pay_fees(payer: int, rec: Transaction | Block) -> None:
        if payer in bl:
            return
        dues = fee_dues(rec, params)
        e = entries.get(payer)
        if e is not None and e.balance >= sum(a for _, a in dues):
            # nothing gets clamped, so grouped payments equal the itemized ones
            for payee, amt in dues:
                if payee not in bl:
                    take(payer, amt)
                    credit(payee, amt)
            return
        for v, _ in rec.sigma.validators:
            pay(payer, v, params.validation_fee)
        for r in routers_of(rec):
            pay(payer, r, params.routing_fee)

    if credit(blk.owner, params.block_reward):
        minted_r += params.block_reward
    pay_fees(blk.owner, blk)
    for tx in blk.S:
        c = decode_cont(tx.cont)
        if isinstance(c, Transfer):
            if tx.owner in bl:
                continue
            pay_fees(tx.owner, tx)
            pay(tx.owner, c.receiver, c.amount)
        elif isinstance(c, Evidence):
            guilty = [g for g in c.guilty if g not in bl]
            if not guilty:
                continue
            pay_fees(guilty[0], tx)
            for g in guilty:
                burned += take(g, params.misbehavior_penalty)
            if credit(tx.owner, params.audition_reward):
                minted_a += params.audition_reward
            if bl is blacklist:
                bl = dict(blacklist)
            for g in guilty:
                bl[g] = tx.h
    return bl, Supply(minted_r, minted_a, burned)


def advance_view(view: View, blk: Block, chain: ChainIndex, params: PoVParams) -> View:
    """View after ``blk`` (a successor of ``view.tail``) becomes the tail."""
    if blk.prev != view.tail:
        raise ValueError("block does not extend the view's tail")
    entries = dict(view.entries)
    blacklist, supply = view.blacklist, view.supply
    if view.tail != view.committed:
        blacklist, supply = _commit_effects(entries, blacklist, supply,
                                            chain.blocks[view.tail], params)
    for tx in blk.S:
        e = entries.get(tx.owner)
        if e is None:
            e = ViewEntry(tx.owner, b"", b"", 0)
        entries[tx.owner] = ViewEntry(e.num_id, blk.h, tx.h, e.balance)
    return View(blk.h, view.tail, entries, blacklist, supply, base=view, canonical=view.canonical)


# ------------------------------------------------------------ validity checks

def _soundness(tx: Transaction, view: View, chain: ChainIndex) -> str | None:
    """``None`` if sound; otherwise ``"superseded"`` (permanent) or
    ``"uncommitted"`` (``prev`` not yet committed in this view)."""
    e = view.get(tx.owner)
    if tx.prev not in chain:
        return "uncommitted"
    if e.lastblk in chain and chain.precedes(tx.prev, e.lastblk):
        return "superseded"
    if tx.prev != view.committed and not chain.precedes(tx.prev, view.committed):
        return "uncommitted"
    return None


def is_sound(tx: Transaction, view: View, chain: ChainIndex) -> bool:
    """False iff ``tx.prev`` precedes the owner's ``lastblk``, or is not a
    committed block of this view."""
    return _soundness(tx, view, chain) is None


def is_correct(tx: Transaction, view: View, evidence_check=None) -> bool:
    e = view.get(tx.owner)
    c = decode_cont(tx.cont)
    if is_allocation(tx):
        return False
    if isinstance(c, Transfer):
        return c.receiver != tx.owner and 0 < c.amount <= e.balance
    if isinstance(c, Evidence):
        return evidence_check is not None and bool(evidence_check(c))
    return False


def has_balance_compliance(tx: Transaction, view: View, params: PoVParams) -> bool:
    e = view.get(tx.owner)
    c = decode_cont(tx.cont)
    if isinstance(c, Evidence):
        return True  # the guilty peer pays for reports
    amount = c.amount if isinstance(c, Transfer) else 0
    return e.balance >= fees_of(tx, params) + amount


class AuthDetail(NamedTuple):
    ok: bool
    reason: str | None = None
    resolved: frozenset = frozenset()
    bad_signers: tuple = ()
    signers: tuple = ()


def authentication_detail(record: Transaction | Block, keyring: Keyring, params: PoVParams,
                          blacklist=frozenset(), *, full: bool = True,
                          proof_check=None) -> AuthDetail:
    """Hash, owner signature, validator search proofs and, for ``full``,
    ``t`` distinct valid validator signatures."""
    if record.owner in blacklist:
        return AuthDetail(False, "BlacklistedOwner")
    if record.recompute_hash() != record.h:
        return AuthDetail(False, "BadHash")
    if not keyring.verify(record.owner, record.h, record.sigma.owner):
        return AuthDetail(False, "BadOwnerSignature")
    proofs = record.search_proof
    if len(proofs) > params.alpha:
        return AuthDetail(False, "TooManyProofs")
    check = proof_check or (lambda p: verify_search_proof(p, keyring, blacklist))
    resolved = set()
    expected = validator_id_range(record.prev, record.owner, record.payload, record.s, 1, len(proofs))
    for p, want in zip(proofs, expected):
        if p.kind != "num" or not p.hops or p.hops[0].ident != record.owner:
            continue
        if p.target != want:
            continue
        if check(p):
            resolved.add(p.result)
    resolved.discard(record.owner)
    if len(resolved) < params.t:
        return AuthDetail(False, "TooFewProofs", frozenset(resolved))
    if not full:
        return AuthDetail(True, None, frozenset(resolved))
    good, bad = [], []
    for v, sig in record.sigma.validators:
        if v in good:
            continue
        if v in resolved and v not in blacklist and keyring.verify(v, record.h, sig):
            good.append(v)
        else:
            bad.append(v)
    if bad:
        return AuthDetail(False, "ForgedValidatorSignature", frozenset(resolved), tuple(bad), tuple(good))
    if len(good) < params.t:
        return AuthDetail(False, "TooFewSignatures", frozenset(resolved), (), tuple(good))
    return AuthDetail(True, None, frozenset(resolved), (), tuple(good))


def is_authenticated(record: Transaction | Block, keyring: Keyring, params: PoVParams,
                     blacklist=frozenset(), *, full: bool = True) -> Verdict:
    d = authentication_detail(record, keyring, params, blacklist, full=full)
    return Verdict(d.ok, d.reason)


def resolve_fork(candidates: Iterable[Block]) -> Block:
    """Minimum digest wins."""
    best = None
    for b in candidates:
        if best is None or b.h < best.h:
            best = b
    if best is None:
        raise EmptySet("no candidate blocks")
    return best


# --------------------------------------------------------------------- peers

@dataclass(eq=False)
class Peer:
    ident: int
    honest: bool = True
    modes: frozenset = frozenset()
    view: View | None = None
    blacklisted: bool = False
    joined: bool = False
    collected: dict = field(default_factory=dict)  # audited transactions seen in view_update


@dataclass(frozen=True)
class MisbehaviorReport:
    guilty: tuple[int, ...]
    kind: str
    record_h: bytes
    reporter: int

    def evidence(self) -> Evidence:
        return Evidence(tuple(self.guilty), self.kind, self.record_h.hex(), self.reporter)


@dataclass
class GenerationResult:
    ok: bool
    kind: Kind
    owner: int
    prev: bytes
    payload: bytes
    resolved: list[int]
    record: Transaction | Block | None = None
    signers: list[int] = field(default_factory=list)
    trials: int = 0
    messages: int = 0
    rejections: Counter = field(default_factory=Counter)
    error: str = ""


@dataclass
class OpStat:
    count: int = 0
    total: int = 0
    max: int = 0

    def add(self, cost: int, times: int = 1) -> None:
        if times <= 0:
            return
        self.count += times
        self.total += cost * times
        if cost > self.max:
            self.max = cost

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


class LatestState(NamedTuple):
    state: bytes
    balance: int
    lastblk: bytes


def introducer_id(ident: int, i: int, s: int) -> int:
    return truncate(digest(canonical_encode([id_bytes(ident, s), int_bytes(i)])), s)


# ------------------------------------------------------------------- network

class Network:
    """Overlay, block registry, mempool and peers of one simulated run."""

    VIEW_CACHE = 64

    def __init__(self, params: PoVParams, keyring: Keyring, identities: Sequence[int],
                 rng: random.Random, adversarial: Iterable[int] = (),
                 adversary_modes: Iterable[str] = ()):
        self.params = params.validate()
        self.keyring = keyring
        self.s = keyring.s
        self.rng = rng
        self.overlay = SkipGraph(keyring, tie_source=lambda: rng.getrandbits(TIE_BITS))
        adv = set(adversarial)
        modes = frozenset(adversary_modes)
        unknown = modes - ADVERSARY_MODES
        if unknown:
            raise ValueError(f"unknown adversary modes {sorted(unknown)}")
        self.peers = {i: Peer(i, i not in adv, modes if i in adv else frozenset())
                      for i in identities}
        self.genesis = make_genesis([(i, params.initial_balance) for i in sorted(identities)],
                                    self.s, params.set_encoding)
        self.chain = ChainIndex(self.genesis)
        self.genesis_view = genesis_view(self.genesis)
        self.tail_view = self.genesis_view
        self.initial_supply = params.initial_balance * len(self.peers)
        self._views: OrderedDict[bytes, View] = OrderedDict({self.genesis.h: self.genesis_view})
        self.mempool: dict[bytes, Transaction] = {}
        self.blacklist: dict[int, bytes] = {}
        self.knocked: set[bytes] = set()
        self._bl_version = 0
        self._proof_cache: dict[SearchProof, Verdict] = {}
        self._auth_cache: dict[tuple[int, bool], tuple[object, AuthDetail]] = {}
        self._audit_cache: dict[tuple[int, int], tuple[object, object, tuple | None]] = {}
        self.evidence: dict[bytes, tuple[object, View, tuple]] = {}
        self.reported: set[bytes] = set()
        self.auditors: dict[bytes, list[int]] = {}  # record hash -> peers that caught it
        self.pending_reports: list[MisbehaviorReport] = []
        self.protocol_messages: Counter[str] = Counter()
        self.ops: dict[str, OpStat] = {}
        self.events: Counter[str] = Counter()
        self._pointer_drops: list[tuple[int, int, int]] = []
        self.auto_sync = False
        for tx in self.genesis.S:
            c = decode_cont(tx.cont)
            self.overlay.insert_record(Kind.POINTER, truncate(self.genesis.h, self.s), c.receiver,
                                       c.receiver, TxPointer(c.receiver, self.genesis.h, self.s))

    @classmethod
    def create(cls, n: int, params: PoVParams | None = None, seed: int = 0, s: int = 32,
               scheme: str = "simulated", adversarial: int | Iterable[int] = 0,
               adversary_modes: Iterable[str] = (SIGN_ANYTHING,), join: bool = True) -> "Network":
        """Small fully-joined network for tests and examples.  ``adversarial``
        is a count (the first identities in sorted order) or explicit IDs."""
        from .core import make_scheme, seeded_rng

        rng = seeded_rng(seed)
        keyring = Keyring(make_scheme(scheme, rng.getrandbits(256).to_bytes(32, "big")), s)
        ids = [keyring.new_identity(rng) for _ in range(n)]
        if isinstance(adversarial, int):
            adv = sorted(ids)[:adversarial]
        else:
            adv = list(adversarial)
        net = cls(params or PoVParams(), keyring, ids, rng, adv, adversary_modes)
        if join:
            for i in sorted(ids):
                net.join(i)
            for i in sorted(ids):
                net.peers[i].view = net.genesis_view
        return net

    # ------------------------------------------------------------ bookkeeping

    def total_messages(self) -> int:
        return self.overlay.messages.total() + self.protocol_messages.total()

    def op(self, name: str) -> OpStat:
        st = self.ops.get(name)
        if st is None:
            st = self.ops[name] = OpStat()
        return st

    def online(self, ident: int) -> bool:
        return self.overlay.is_online(ident)

    def _bump_blacklist(self) -> None:
        self._bl_version += 1
        self._proof_cache.clear()
        self._auth_cache.clear()
        self._audit_cache.clear()

    def trim_caches(self) -> None:
        """Drop memoized verdicts; they are pure, so this only costs time."""
        self._proof_cache.clear()
        self._auth_cache.clear()
        self._audit_cache.clear()

    def proof_ok(self, proof: SearchProof) -> Verdict:
        v = self._proof_cache.get(proof)
        if v is None:
            v = verify_search_proof(proof, self.keyring, self.blacklist)
            self._proof_cache[proof] = v
        return v

    def auth(self, record, full: bool = True) -> AuthDetail:
        key = (id(record), full)
        hit = self._auth_cache.get(key)
        if hit is not None and hit[0] is record:
            return hit[1]
        d = authentication_detail(record, self.keyring, self.params, self.blacklist,
                                  full=full, proof_check=self.proof_ok)
        self._auth_cache[key] = (record, d)
        return d

    # ---------------------------------------------------------- membership

    def join(self, ident: int, introducer: int | None = None) -> int:
        peer = self.peers[ident]
        node = self.overlay.new_peer(ident)
        if introducer is None and len(self.overlay):
            online = self.overlay.online_ids()
            introducer = online[self.rng.randrange(len(online))]
        cost = self.overlay.join(node, introducer)
        peer.joined = True
        self.op("join").add(cost)
        return cost

    def set_online(self, ident: int, online: bool) -> int:
        peer = self.peers[ident]
        if online and peer.blacklisted:
            return 0
        return self.overlay.set_online(ident, online)

    # --------------------------------------------------------------- views

    def view_after(self, view: View, blk: Block) -> View:
        """Shared successor view for canonical views."""
        if view.canonical:
            hit = self._views.get(blk.h)
            if hit is not None and hit.committed == view.tail:
                self._views.move_to_end(blk.h)
                return hit
        nv = advance_view(view, blk, self.chain, self.params)
        if view.canonical:
            self._views[blk.h] = nv
            if len(self._views) > self.VIEW_CACHE:
                self._views.popitem(last=False)
        return nv

    def sync(self, peer: Peer) -> None:
        if self.auto_sync:
            self.catch_up(peer)

    def catch_up(self, peer: Peer) -> int:
        """Bring ``peer`` to the followed tail.  Equivalent to repeated
        :meth:`view_update` along already-audited blocks; charged one routed
        name-ID search per block behind."""
        start = self.total_messages()
        if peer.view is None:
            try:
                self.bootstrap(peer)
            except BootstrapFailed:
                self.events["bootstrap_failed"] += 1
                peer.view = self.genesis_view
        v = peer.view
        tv = self.tail_view
        if v is tv:
            return self.total_messages() - start
        chain = self.chain
        if v.tail in chain:
            cur, extra = v.tail, 0
            while not chain.on_main(cur):
                cur, extra = chain.blocks[cur].prev, 1
            steps = chain.depth[tv.tail] - chain.depth[cur] + extra
        else:
            steps = chain.depth[tv.tail]
        steps = max(steps, 1)
        before = self.total_messages()
        self.overlay.search_name_id(peer.ident, truncate(v.tail, self.s), prove=False)
        one = self.total_messages() - before
        self.protocol_messages["view_update"] += one * (steps - 1)
        self.op("view_update").add(one, steps)
        peer.view = tv
        return self.total_messages() - start

    def serve_view(self, introducer: Peer) -> View | None:
        if not self.online(introducer.ident) or introducer.view is None:
            return None
        if CORRUPT_VIEW in introducer.modes:
            return self._corrupt(introducer.view)
        return introducer.view

    def _corrupt(self, view: View) -> View:
        key = b"corrupt" + view.tail
        hit = self._views.get(key)
        if hit is None:
            entries = dict(view.entries)
            for pid, p in self.peers.items():
                if not p.honest and pid in entries:
                    entries[pid] = entries[pid]._replace(balance=entries[pid].balance + 10 ** 6)
            hit = View(view.tail, view.committed, entries, view.blacklist, view.supply,
                       canonical=False)
            self._views[key] = hit
        return hit

    def bootstrap(self, peer: Peer) -> View:
        """Adopt the first view reported identically by ``t`` introducers."""
        start = self.total_messages()
        counts: Counter[bytes] = Counter()
        seen = set()
        try:
            for i in range(1, self.params.alpha + 1):
                node, proof = self.overlay.search_num_id(peer.ident, introducer_id(peer.ident, i, self.s))
                if not self.proof_ok(proof):
                    continue
                iid = node.num_id
                if iid == peer.ident or iid in seen:
                    continue
                seen.add(iid)
                intro = self.peers[iid]
                if intro.view is None:
                    continue
                self.sync(intro)
                self.protocol_messages["view_fetch"] += 2
                v = self.serve_view(intro)
                if v is None:
                    continue
                d = v.digest()
                counts[d] += 1
                if counts[d] >= self.params.t:
                    peer.view = v
                    return v
            raise BootstrapFailed(f"fewer than {self.params.t} consistent views")
        finally:
            self.op("bootstrap").add(self.total_messages() - start)

    def view_update(self, peer: Peer) -> str:
        """One step of view maintenance.  Returns what happened: "bootstrap",
        "advanced", "switched", "transactions" or "idle"."""
        if peer.view is None:
            self.bootstrap(peer)
            return "bootstrap"
        start = self.total_messages()
        try:
            v = peer.view
            nodes, proof = self.overlay.search_name_id(peer.ident, truncate(v.tail, self.s),
                                                       kinds=(Kind.BLOCK, Kind.TRANSACTION))
            if proof is not None and not self.proof_ok(proof):
                return "idle"
            blocks = [n.payload for n in nodes if n.kind is Kind.BLOCK and n.payload.prev == v.tail]
            if blocks:
                winner = self._first_valid(blocks, v, peer)
                if winner is not None:
                    self._follow(peer, self.view_after(v, winner), winner)
                    return "advanced"
            if v.base is not None and v.tail != v.committed:
                sib_nodes, _ = self.overlay.search_name_id(peer.ident, truncate(v.committed, self.s),
                                                           kinds=(Kind.BLOCK,), prove=False)
                sibs = [n.payload for n in sib_nodes if n.payload.prev == v.committed]
                winner = self._first_valid(sibs, v.base, peer)
                if winner is not None and winner.h != v.tail:
                    self._follow(peer, self.view_after(v.base, winner), winner)
                    return "switched"
            new_txs = [n.payload for n in nodes if n.kind is Kind.TRANSACTION]
            if v.committed != v.tail:
                more, _ = self.overlay.search_name_id(peer.ident, truncate(v.committed, self.s),
                                                      kinds=(Kind.TRANSACTION,), prove=False)
                new_txs += [n.payload for n in more]
            got = False
            for tx in new_txs:
                if tx.h in peer.collected:
                    continue
                if self.auth(tx).ok and _soundness(tx, v, self.chain) is None:
                    peer.collected[tx.h] = tx
                    got = True
            return "transactions" if got else "idle"
        finally:
            self.op("view_update").add(self.total_messages() - start)

    def _follow(self, peer: Peer, nv: View, blk: Block) -> None:
        peer.view = nv
        for tx in blk.S:
            peer.collected.pop(tx.h, None)
        self._note_commit(nv)

    def _first_valid(self, blocks: list[Block], view: View, auditor: Peer | None) -> Block | None:
        winner = None
        for b in sorted(blocks, key=lambda b: b.h):
            if b.h in self.knocked:
                continue
            found = self._audit_verdict(b, view)
            if found is None:
                if winner is None:
                    winner = b
                if auditor is None:
                    break
            elif auditor is not None:
                # an auditor reports every invalid candidate, not just those below the winner
                self._report(found, b, view, auditor.ident)
        return winner

    # ------------------------------------------------------------- auditing

    def _audit_verdict(self, record, view: View) -> tuple[str, tuple[int, ...]] | None:
        key = (id(record), id(view))
        hit = self._audit_cache.get(key)
        if hit is not None and hit[0] is record and hit[1] is view:
            return hit[2]
        res = self._audit_record(record, view)
        self._audit_cache[key] = (record, view, res)
        return res

    def _audit_record(self, record, view: View) -> tuple[str, tuple[int, ...]] | None:
        """``None`` for a valid record, else (kind, guilty peers).  Blame is
        assigned as if nobody were blacklisted: a record that was signed and
        routed correctly but now touches a blacklisted peer is rejected with
        no one to blame, unless it breaks some other rule."""
        a = self.auth(record, full=True)
        stale = False
        if not a.ok:
            if a.reason == "BlacklistedOwner":
                return None if not record.is_block else ("BlacklistedOwner", ())
            a = self._raw_auth(record)
            if not a.ok:
                return (a.reason, (record.owner,) + tuple(sorted(set(a.bad_signers) - {record.owner})))
            stale = True
        guilty = (record.owner,) + tuple(sorted(a.signers))
        if record.is_block:
            if len(record.S) < self.params.min_tx:
                return (TOO_FEW_TX, guilty)
            owners = [tx.owner for tx in record.S]
            if len(set(owners)) != len(owners):
                return (DUPLICATE_OWNER, guilty)
            for tx in record.S:
                if not self.auth(tx, full=True).ok:
                    if not self._raw_auth(tx).ok:
                        return ("UnauthenticatedTransaction", guilty)
                    stale = True
                try:
                    if _soundness(tx, view, self.chain) is not None:
                        return ("UnsoundTransaction", guilty)
                except UnknownOwner:
                    return ("UnsoundTransaction", guilty)
        return (STALE_PARTICIPANT, ()) if stale else None

    def _raw_auth(self, record) -> AuthDetail:
        """Authentication with an empty blacklist."""
        return authentication_detail(record, self.keyring, self.params, full=True)

    def audit(self, record, auditor: Peer) -> MisbehaviorReport | None:
        """``None`` when the record passes the checks its validators apply;
        otherwise the report (also queued for submission)."""
        view = auditor.view
        if record.is_block and record.prev in self.chain and view.tail != record.prev:
            base = self._view_at(record.prev)
            if base is not None:
                view = base
        found = self._audit_verdict(record, view)
        if found is None:
            return None
        return self._report(found, record, view, auditor.ident)

    def _view_at(self, h: bytes) -> View | None:
        v = self._views.get(h)
        if v is not None:
            return v
        tv = self.tail_view
        if tv.tail == h:
            return tv
        if tv.base is not None and tv.base.tail == h:
            return tv.base
        return None

    def _report(self, found: tuple[str, tuple[int, ...]], record, view: View,
                reporter: int) -> MisbehaviorReport | None:
        kind, guilty = found
        if not guilty:
            return None
        rep = MisbehaviorReport(tuple(guilty), kind, record.h, reporter)
        self.evidence.setdefault(record.h, (record, view, found))
        seen = self.auditors.setdefault(record.h, [])
        if reporter not in seen:
            seen.append(reporter)
        if record.h not in self.reported:
            self.reported.add(record.h)
            self.pending_reports.append(rep)
            self.events["misbehavior_detected"] += 1
        return rep

    def check_evidence(self, ev: Evidence) -> bool:
        try:
            h = bytes.fromhex(ev.evidence_hex)
        except ValueError:
            return False
        stored = self.evidence.get(h)
        if stored is None:
            return False
        record, view, _ = stored
        res = self._audit_record(record, view)
        return res is not None and res[0] == ev.kind and tuple(res[1]) == tuple(ev.guilty)

    def submit_reports(self, reporter_ok=None) -> int:
        """Each pending report is turned into a misbehavior transaction by one
        of the peers that caught the record: the first that is online, passes
        ``reporter_ok`` and has not filed another report this round.  Failures
        stay queued."""
        done = 0
        keep = []
        busy: set[int] = set()
        for rep in self.pending_reports:
            if all(g in self.blacklist for g in rep.guilty):
                continue
            by = None
            for cand in self.auditors.get(rep.record_h, [rep.reporter]):
                peer = self.peers[cand]
                if cand in busy or not self.online(cand) or peer.blacklisted:
                    continue
                if reporter_ok is None or reporter_ok(peer):
                    by = peer
                    break
            if by is None:
                keep.append(rep)
                continue
            busy.add(by.ident)
            self.sync(by)
            filed = replace(rep, reporter=by.ident)
            res = self.attempt_transaction(by.ident, encode_evidence(filed.evidence()))
            if res.ok:
                done += 1
            else:
                keep.append(rep)
        self.pending_reports = keep
        return done

    # ------------------------------------------------------------ validation

    def pov_validate(self, record, validator: Peer) -> bytes | Reject:
        """Signature over ``record.h`` or the reason for refusing."""
        modes = validator.modes
        owner_honest = self.peers[record.owner].honest if record.owner in self.peers else True
        if SIGN_ANYTHING in modes or EQUIVOCATE in modes:
            return self.keyring.sign(validator.ident, record.h)
        if REFUSE_TO_SIGN in modes:
            if owner_honest:
                return Reject(REFUSED)
            return self.keyring.sign(validator.ident, record.h)
        view = validator.view
        if view is None:
            return Reject(INCONSISTENT, "validator has no view")
        a = self.auth(record, full=False)
        if not a.ok:
            return Reject(UNAUTHENTICATED, a.reason or "")
        if validator.ident not in a.resolved:
            return Reject(UNAUTHENTICATED, "not a designated validator")
        p = self.params
        if not record.is_block:
            try:
                if _soundness(record, view, self.chain) is not None:
                    return Reject(UNSOUND)
                if not is_correct(record, view, self.check_evidence):
                    return Reject(INCORRECT)
                if not has_balance_compliance(record, view, p):
                    return Reject(INSUFFICIENT_BALANCE)
            except UnknownOwner:
                return Reject(UNSOUND, "unknown owner")
            return self.keyring.sign(validator.ident, record.h)
        if record.prev != view.tail:
            return Reject(INCONSISTENT)
        if len(record.S) < p.min_tx:
            return Reject(TOO_FEW_TX)
        owners = set()
        for tx in record.S:
            if tx.owner in owners:
                return Reject(DUPLICATE_OWNER)
            owners.add(tx.owner)
        for tx in record.S:
            if not self.auth(tx, full=True).ok:
                return Reject(UNAUTHENTICATED, "transaction")
            try:
                if _soundness(tx, view, self.chain) is not None:
                    return Reject(UNSOUND, "transaction")
            except UnknownOwner:
                return Reject(UNSOUND, "transaction owner unknown")
        e = view.entries.get(record.owner)
        if e is None or e.balance + p.block_reward < fees_of(record, p):
            return Reject(INSUFFICIENT_BALANCE)
        nodes, _ = self.overlay.search_name_id(validator.ident, truncate(view.tail, self.s),
                                               kinds=(Kind.BLOCK,), prove=False)
        for n in nodes:
            b = n.payload
            if b.h != record.h and b.prev == view.tail and b.h not in self.knocked \
                    and self._audit_verdict(b, view) is None:
                return Reject(POTENTIAL_FORK)
        return self.keyring.sign(validator.ident, record.h)

    # ------------------------------------------------------------ generation

    def _search_validators(self, owner: int, prev: bytes, payload: bytes) -> tuple[list, list[int]]:
        proofs, resolved = [], []
        ids = validator_id_range(prev, owner, payload, self.s, 1, self.params.alpha)
        for i, vid in enumerate(ids, start=1):
            node, proof = self.overlay.search_num_id(owner, vid)
            if not self.proof_ok(proof):
                raise ProofVerificationFailed(f"search proof for validator {i} rejected")
            proofs.append(proof)
            resolved.append(node.num_id)
        return proofs, resolved

    def _collect(self, record, resolved: list[int], res: GenerationResult) -> list[tuple[int, bytes]]:
        sigs: list[tuple[int, bytes]] = []
        seen = set()
        t = self.params.t
        if len(set(resolved) - {record.owner}) < t:
            return sigs  # the owner can tell before asking anyone
        for i, v in enumerate(resolved, start=1):
            if v in seen or v == record.owner:
                continue
            seen.add(v)
            if not self.online(v):
                continue
            vp = self.peers[v]
            self.sync(vp)
            start = self.total_messages()
            self.protocol_messages["validation"] += 2
            out = self.pov_validate(record, vp)
            self.op("validation").add(self.total_messages() - start)
            if isinstance(out, Reject):
                res.rejections[out.reason] += 1
                continue
            sigs.append((v, out))
            if len(sigs) == t:
                res.trials = i
                break
        return sigs

    def attempt_transaction(self, owner: int, cont: bytes, publish: bool = True) -> GenerationResult:
        peer = self.peers[owner]
        self.sync(peer)
        start = self.total_messages()
        prev = peer.view.committed
        res = GenerationResult(False, Kind.TRANSACTION, owner, prev, cont, [])
        try:
            proofs, res.resolved = self._search_validators(owner, prev, cont)
        except ProofVerificationFailed as exc:
            res.error = str(exc)
            return res
        h = tx_hash(prev, owner, cont, proofs, self.s)
        tx = Transaction(prev, owner, cont, tuple(proofs), h,
                         Sigma(self.keyring.sign(owner, h)), self.s)
        sigs = self._collect(tx, res.resolved, res)
        if len(sigs) >= self.params.t:
            tx = tx.with_sigma(Sigma(tx.sigma.owner, tuple(sigs)))
            res.ok, res.record, res.signers = True, tx, [v for v, _ in sigs]
            if publish:
                self.publish_transaction(tx)
        else:
            res.error = "InsufficientValidators"
        res.messages = self.total_messages() - start
        self.op("tx_generation").add(res.messages)
        return res

    def attempt_block(self, owner: int, txs: Sequence[Transaction], publish: bool = True) -> GenerationResult:
        peer = self.peers[owner]
        self.sync(peer)
        start = self.total_messages()
        prev = peer.view.tail
        S = sort_set(txs)
        payload = Block(prev, owner, S, (), b"", Sigma(), self.s, self.params.set_encoding).payload
        res = GenerationResult(False, Kind.BLOCK, owner, prev, payload, [])
        try:
            proofs, res.resolved = self._search_validators(owner, prev, payload)
        except ProofVerificationFailed as exc:
            res.error = str(exc)
            return res
        h = blk_hash(prev, owner, S, proofs, self.s, self.params.set_encoding)
        blk = Block(prev, owner, S, tuple(proofs), h, Sigma(self.keyring.sign(owner, h)), self.s,
                    self.params.set_encoding)
        blk.__dict__["payload"] = payload
        sigs = self._collect(blk, res.resolved, res)
        if len(sigs) >= self.params.t:
            blk = blk.with_sigma(Sigma(blk.sigma.owner, tuple(sigs)))
            res.ok, res.record, res.signers = True, blk, [v for v, _ in sigs]
            if publish:
                self.publish_block(blk)
        else:
            res.error = "InsufficientValidators"
        res.messages = self.total_messages() - start
        self.op("block_generation").add(res.messages)
        return res

    def generate(self, owner: int, payload: bytes | Sequence[Transaction]):
        """Generate and validate a transaction (``payload`` is ``cont`` bytes)
        or a block (``payload`` is the transaction set)."""
        if isinstance(payload, (bytes, bytearray)):
            res = self.attempt_transaction(owner, bytes(payload))
        else:
            if len(payload) < self.params.min_tx:
                raise ValueError("block needs at least min_tx transactions")
            res = self.attempt_block(owner, payload)
        if not res.ok:
            if res.error.startswith("search proof"):
                raise ProofVerificationFailed(res.error)
            raise InsufficientValidators(f"{len(res.signers)} < t signatures", res)
        return res.record

    def transfer(self, owner: int, receiver: int, amount: int) -> Transaction:
        return self.generate(owner, encode_transfer(receiver, amount, self.s))

    # ----------------------------------------------------------- publication

    def _insert(self, kind: Kind, record, holders: Iterable[int]) -> None:
        num, name = truncate(record.h, self.s), truncate(record.prev, self.s)
        for hd in holders:
            self.overlay.insert_record(kind, num, name, hd, record)
            self.protocol_messages["replication"] += 1

    def holders_of(self, record) -> list[int]:
        return [record.owner] + [v for v, _ in record.sigma.validators]

    def publish_transaction(self, tx: Transaction) -> None:
        self._insert(Kind.TRANSACTION, tx, self.holders_of(tx))
        self.mempool[tx.h] = tx

    def publish_block(self, blk: Block, holders: Iterable[int] | None = None) -> None:
        """Insert a block (and its pointers) into the overlay and the block
        registry, then re-evaluate the followed tail."""
        hs = list(holders) if holders is not None else self.holders_of(blk)
        self._insert(Kind.BLOCK, blk, hs)
        num = truncate(blk.h, self.s)
        for tx in blk.S:
            ptr = TxPointer(tx.owner, blk.h, self.s)
            for hd in hs:
                self.overlay.insert_record(Kind.POINTER, num, tx.owner, hd, ptr)
                self.protocol_messages["replication"] += 1
        self.chain.add(blk)
        self.advance_tail()

    def knock_out(self, blk: Block) -> None:
        if blk.h in self.knocked:
            return
        self.knocked.add(blk.h)
        self.events["knockouts"] += 1
        node = self.overlay.record(Kind.BLOCK, truncate(blk.h, self.s), truncate(blk.prev, self.s))
        if node is not None:
            self.overlay.remove_record(node)
        for tx in blk.S:
            p = self.overlay.record(Kind.POINTER, truncate(blk.h, self.s), tx.owner)
            if p is not None:
                self.overlay.remove_record(p)

    def advance_tail(self) -> None:
        """Follow the fork rule from the current tail: extend by the lowest
        valid successor, or switch to a lower sibling while still pending."""
        while True:
            tv = self.tail_view
            kids = [self.chain.blocks[h] for h in self.chain.children.get(tv.tail, ())]
            w = self._first_valid(kids, tv, None)
            if w is not None:
                for b in kids:
                    if b is not w and b.h not in self.knocked and self._audit_verdict(b, tv) is None:
                        self.knock_out(b)
                self._extend(tv, w)
                continue
            if tv.base is not None and tv.tail != tv.committed:
                sibs = [self.chain.blocks[h] for h in self.chain.children.get(tv.committed, ())]
                w = self._first_valid(sibs, tv.base, None)
                if w is not None and w.h != tv.tail:
                    loser = self.chain.blocks[tv.tail]
                    self.knock_out(loser)
                    self.events["fork_switches"] += 1
                    self.tail_view = self.view_after(tv.base, w)
                    self.chain.set_tail(w.h)
                    included = {tx.h for tx in w.S}
                    for tx in loser.S:
                        if tx.h not in included:
                            self.mempool[tx.h] = tx
                    for tx in w.S:
                        self.mempool.pop(tx.h, None)
                    continue
                for b in sibs:
                    if b.h != tv.tail and b.h not in self.knocked \
                            and self._audit_verdict(b, tv.base) is None:
                        self.knock_out(b)
            break

    def _extend(self, tv: View, w: Block) -> None:
        nv = self.view_after(tv, w)
        self.chain.set_tail(w.h)
        self.tail_view = nv
        for tx in w.S:
            self.mempool.pop(tx.h, None)
        self._note_commit(nv)
        if tv.base is not None:
            tv.base = None

    def _note_commit(self, view: View) -> None:
        """Side effects owed when ``view.committed`` first becomes committed
        on the followed branch."""
        h = view.committed
        if not self.chain.on_main(h) or h == self.genesis.h:
            return
        d = self.chain.depth[h]
        if d <= getattr(self, "_committed_depth", 0):
            return
        self._committed_depth = d
        blk = self.chain.blocks[h]
        s = self.s
        for tx in blk.S:
            node = self.overlay.record(Kind.TRANSACTION, truncate(tx.h, s), truncate(tx.prev, s))
            if node is not None:
                self.overlay.remove_record(node)
            heapq.heappush(self._pointer_drops, (d + self.params.pointer_grace, tx.owner, d))
        for g, txh in view.blacklist.items():
            if g not in self.blacklist:
                self.blacklist[g] = txh
                peer = self.peers.get(g)
                if peer is not None:
                    peer.blacklisted = True
                    self.overlay.set_online(g, False)
                self.events["blacklisted"] += 1
                self._bump_blacklist()
        while self._pointer_drops and self._pointer_drops[0][0] <= d:
            _, owner, newer = heapq.heappop(self._pointer_drops)
            for node in self.overlay.records_named(owner):
                if node.kind is Kind.POINTER and self.chain.depth.get(node.payload.block_h, 0) < newer:
                    self.overlay.remove_record(node)

    def commit_status(self, h: bytes) -> str:
        if h == self.genesis.h:
            return "Committed"
        if self.chain.on_main(h) and h != self.chain.tail:
            return "Committed"
        return "Pending"

    # ---------------------------------------------------------------- queries

    def latest_state_of(self, target: int, requester: int) -> LatestState:
        start = self.total_messages()
        try:
            nodes, proof = self.overlay.search_name_id(requester, target, kinds=(Kind.POINTER,))
            if not nodes:
                raise NoPointerFound(f"no pointer for {target:#x}")
            node = max(nodes, key=lambda n: self.chain.depth.get(n.payload.block_h, -1))
            ptr: TxPointer = node.payload
            if ptr.block_h == self.genesis.h:
                blk = self.genesis
            else:
                found, _ = self.overlay.lookup(requester, Kind.BLOCK, ptr.num_id)
                found = [n for n in found if n.payload.h == ptr.block_h]
                if not found:
                    raise NoPointerFound("pointed-to block is offline")
                blk = found[0].payload
            for tx in blk.S:
                c = decode_cont(tx.cont)
                if tx.owner == target or (is_allocation(tx) and c.receiver == target):
                    break
            else:
                raise NoPointerFound("pointer does not match its block")
            answering = sorted(h for h in node.holders if self.online(h))
            host = self.peers[answering[0]] if answering else self.peers[requester]
            self.sync(host)
            self.protocol_messages["state_fetch"] += 2
            view = host.view or self.tail_view
            entry = view.entries.get(target)
            return LatestState(tx.h, entry.balance if entry else 0, blk.h)
        finally:
            self.op("latest_state").add(self.total_messages() - start)

    def conservation_gap(self, view: View | None = None) -> int:
        """Zero when balances + burned penalties equal initial supply plus
        minted rewards."""
        v = view or self.tail_view
        sup = v.supply
        return (v.total_balance() + sup.burned
                - (self.initial_supply + sup.minted_rewards + sup.minted_audition))
