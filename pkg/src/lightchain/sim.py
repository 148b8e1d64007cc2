"""Deterministic time-slotted simulator (one slot = one hour).

Slot schedule, each phase in ascending identifier order:
arrivals, churn, availability sample, view updates, transaction generation,
block rounds, adversary actions, misbehavior reports, metrics.
"""

from __future__ import annotations

import enum
import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .consensus import (ADVERSARY_MODES, INJECT_INVALID, SIGN_ANYTHING, VALIDATION_CAPTURE,
                        GenerationResult, Network, PoVParams, _soundness)
from .core import Keyring, derive_seed, make_scheme, seeded_rng, truncate
from .ledger import encode_transfer, validator_id_range

SCHEMA_VERSION = 1


class ConfigInvalid(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class ChurnKind(str, enum.Enum):
    WEIBULL = "weibull"
    UNIFORM = "uniform"
    NONE = "none"


@dataclass(frozen=True)
class ChurnModel:
    kind: ChurnKind = ChurnKind.WEIBULL
    mean_on: float = 2.7
    mean_off: float = 10.0
    shape_on: float = 0.5
    shape_off: float = 0.5
    q: float = 0.78

    def validate(self) -> "ChurnModel":
        if self.kind is ChurnKind.WEIBULL:
            if min(self.mean_on, self.mean_off, self.shape_on, self.shape_off) <= 0:
                raise ConfigInvalid("Weibull means and shapes must be positive")
        elif self.kind is ChurnKind.UNIFORM:
            if not 0 <= self.q < 1:
                raise ConfigInvalid(f"q must be in [0, 1), got {self.q}")
        return self

    @property
    def online_fraction(self) -> float:
        if self.kind is ChurnKind.WEIBULL:
            return self.mean_on / (self.mean_on + self.mean_off)
        if self.kind is ChurnKind.UNIFORM:
            return 1.0 - self.q
        return 1.0


def sample_session(model: ChurnModel, rng: random.Random, state: str) -> float:
    """Length of one ``"on"`` or ``"off"`` session, in slots.

    Weibull sessions are continuous (scale = mean / Gamma(1 + 1/shape)).  The
    uniform model is memoryless per slot, so its sessions are geometric: an
    online run ends with probability ``q`` each slot.
    """
    if state not in ("on", "off"):
        raise ValueError(f"state must be 'on' or 'off', got {state!r}")
    if model.kind is ChurnKind.WEIBULL:
        mean, shape = (model.mean_on, model.shape_on) if state == "on" else (model.mean_off, model.shape_off)
        return rng.weibullvariate(mean / math.gamma(1.0 + 1.0 / shape), shape)
    if model.kind is ChurnKind.UNIFORM:
        end = model.q if state == "on" else 1.0 - model.q
        if end <= 0:
            return math.inf
        n = 1
        while rng.random() >= end:
            n += 1
        return float(n)
    return math.inf if state == "on" else 0.0


def sample_session_slots(model: ChurnModel, rng: random.Random, state: str) -> int:
    """Session length rounded up to whole slots (at least one)."""
    d = sample_session(model, rng, state)
    return max(1, math.ceil(d)) if math.isfinite(d) else 10 ** 9


@dataclass
class SimConfig:
    seed: int = 1
    slots: int = 48
    n_cap: int = 2000
    arrival_rate: int = 200
    f: float = 0.165
    churn: ChurnModel = field(default_factory=ChurnModel)
    pov: PoVParams = field(default_factory=lambda: PoVParams(initial_balance=1_000_000))
    adversary_churns: bool = True
    tx_rate: int = 1
    adversary_modes: tuple[str, ...] = (SIGN_ANYTHING, VALIDATION_CAPTURE)
    max_block_size: int = 3
    max_block_rounds: int = 400
    fork_prob: float = 0.02
    inject_prob: float = 0.0
    efficiency_extension: int = 4
    s: int = 32
    scheme: str = "simulated"
    final_audit: bool = True

    def validate(self) -> "SimConfig":
        if not 0 <= self.f < 1:
            raise ConfigInvalid(f"f must be in [0, 1), got {self.f}")
        if self.slots < 1:
            raise ConfigInvalid("slots must be >= 1")
        if self.n_cap < 1 or self.arrival_rate < 0:
            raise ConfigInvalid("n_cap must be >= 1 and arrival_rate >= 0")
        if self.tx_rate < 0 or self.max_block_size < 1 or self.max_block_rounds < 0:
            raise ConfigInvalid("tx_rate, max_block_size and max_block_rounds out of range")
        if not 0 <= self.fork_prob <= 1 or not 0 <= self.inject_prob <= 1:
            raise ConfigInvalid("probabilities must lie in [0, 1]")
        if self.efficiency_extension < 1:
            raise ConfigInvalid("efficiency_extension must be >= 1")
        unknown = set(self.adversary_modes) - ADVERSARY_MODES
        if unknown:
            raise ConfigInvalid(f"unknown adversary modes {sorted(unknown)}")
        if self.scheme not in ("simulated", "ed25519"):
            raise ConfigInvalid(f"unknown signature scheme {self.scheme!r}")
        if not 8 <= self.s <= 256:
            raise ConfigInvalid("identifier width must be in [8, 256]")
        self.churn.validate()
        try:
            self.pov.validate()
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["churn"]["kind"] = self.churn.kind.value
        d["adversary_modes"] = sorted(self.adversary_modes)
        d["version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        if not isinstance(obj, dict):
            raise ConfigInvalid("config must be a JSON object")
        obj = dict(obj)
        version = obj.pop("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys {sorted(extra)}")
        try:
            if "churn" in obj:
                c = dict(obj["churn"])
                c["kind"] = ChurnKind(c.get("kind", "weibull"))
                obj["churn"] = ChurnModel(**c)
            if "pov" in obj:
                base = asdict(PoVParams(initial_balance=1_000_000))
                base.update(obj["pov"])
                obj["pov"] = PoVParams(**base)
            if "adversary_modes" in obj:
                obj["adversary_modes"] = tuple(obj["adversary_modes"])
            cfg = cls(**obj)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        return cfg.validate()


@dataclass
class MetricsReport:
    config: dict
    per_slot: list[dict]
    totals: dict
    security: list[dict]
    availability: list[dict]
    efficiency: list[dict]
    storage: list[dict]
    storage_stats: dict
    messages: list[dict]

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


# ------------------------------------------------------------------- engine

class Engine:
    """State of one run.  Use :func:`run` unless stepping slot by slot."""

    def __init__(self, config: SimConfig):
        self.cfg = config.validate()
        cfg = self.cfg
        self.seed = cfg.seed
        rng = seeded_rng(derive_seed(cfg.seed, "identities"))
        secret = rng.getrandbits(256).to_bytes(32, "big")
        keyring = Keyring(make_scheme(cfg.scheme, secret), cfg.s)
        self.order = [keyring.new_identity(rng) for _ in range(cfg.n_cap)]
        adv_rng = seeded_rng(derive_seed(cfg.seed, "adversary"))
        adversarial = [i for i in self.order if adv_rng.random() < cfg.f]
        self.net = Network(cfg.pov, keyring, self.order, seeded_rng(derive_seed(cfg.seed, "network")),
                           adversarial, cfg.adversary_modes)
        self.net.auto_sync = True
        self.churn_rng = seeded_rng(derive_seed(cfg.seed, "churn"))
        self.work_rng = seeded_rng(derive_seed(cfg.seed, "workload"))
        self.arrived: list[int] = []
        self.state: dict[int, bool] = {}
        self.next_flip: dict[int, float] = {}
        self.slot = 0
        self.per_slot: list[dict] = []
        a = cfg.pov.alpha
        self.adv_hist = np.zeros(a + 1, dtype=np.int64)
        self.ext = cfg.efficiency_extension * a
        self.trials_sum = np.zeros(a + 1, dtype=np.float64)
        self.trials_cnt = np.zeros(a + 1, dtype=np.int64)
        self.honest_within = 0
        self.draws = 0
        self.avail_with_owner = 0.0
        self.avail_validators = 0.0
        self.avail_pairs = 0
        self.block_rows: list[int] = []  # main-chain depth to replica row
        self.holder_idx: list[list[int]] = []
        self.index = {pid: k for k, pid in enumerate(sorted(self.order))}
        self.totals = Counter()
        self.injected: list[tuple[int, int, bytes]] = []  # (slot, owner, block hash)

    # ------------------------------------------------------------ helpers

    def _churns(self, pid: int) -> bool:
        return self.cfg.adversary_churns or self.net.peers[pid].honest

    def _record_draw(self, res: GenerationResult) -> None:
        """Per-draw security and efficiency bookkeeping."""
        self.totals["validator_rejections"] += sum(res.rejections.values())
        if not res.resolved:
            return
        net = self.net
        peers = net.peers
        owner = res.owner
        a = net.params.alpha
        adv = sum(1 for v in res.resolved if v != owner and not peers[v].honest)
        self.adv_hist[adv] += 1
        self.draws += 1
        flags = [v != owner and peers[v].honest for v in res.resolved]
        self.honest_within += sum(flags)
        resolve = net.overlay.resolve
        for vid in validator_id_range(res.prev, owner, res.payload, net.s, a + 1, self.ext):
            v = resolve(vid)
            flags.append(v != owner and peers[v].honest)
        k = 0
        for pos, ok in enumerate(flags, start=1):
            if ok:
                k += 1
                self.trials_sum[k] += pos
                self.trials_cnt[k] += 1
                if k == a:
                    break

    def _is_online(self, pid: int) -> bool:
        return self.net.online(pid)

    # ------------------------------------------------------------ phases

    def _arrivals(self) -> int:
        cfg = self.cfg
        start = len(self.arrived)
        batch = self.order[start:start + cfg.arrival_rate]
        for pid in batch:
            self.net.join(pid)
            self.arrived.append(pid)
            self.state[pid] = True
            if cfg.churn.kind is ChurnKind.WEIBULL and self._churns(pid):
                self.next_flip[pid] = self.slot + sample_session(cfg.churn, self.churn_rng, "on")
        return len(batch)

    def _churn(self) -> None:
        cfg = self.cfg
        model = cfg.churn
        now = float(self.slot)
        for pid in sorted(self.arrived):
            peer = self.net.peers[pid]
            if peer.blacklisted or not self._churns(pid):
                continue
            if model.kind is ChurnKind.UNIFORM:
                want = self.churn_rng.random() >= model.q
            elif model.kind is ChurnKind.WEIBULL:
                want = self.state[pid]
                nxt = self.next_flip[pid]
                while nxt <= now:
                    want = not want
                    nxt += sample_session(model, self.churn_rng, "on" if want else "off")
                self.next_flip[pid] = nxt
            else:
                want = True
            if want != self.state[pid]:
                self.state[pid] = want
                self.net.set_online(pid, want)

    def _sample_availability(self) -> None:
        if not self.holder_idx:
            return
        online = np.zeros(len(self.index) + 1, dtype=np.int8)
        for pid in self.net.overlay.online_ids():
            online[self.index[pid]] = 1
        idx = np.asarray(self.holder_idx, dtype=np.int64)
        on = online[idx]
        self.avail_with_owner += float(on.sum())
        self.avail_validators += float(on[:, 1:].sum())
        self.avail_pairs += on.shape[0]

    def _view_updates(self) -> None:
        net = self.net
        for pid in net.overlay.online_ids():
            peer = net.peers[pid]
            if peer.honest and peer.view is not None:
                net.view_update(peer)
            net.catch_up(peer)

    def _pending_owners(self) -> set[int]:
        net = self.net
        owners = {tx.owner for tx in net.mempool.values()}
        tv = net.tail_view
        if tv.tail != tv.committed:
            owners.update(tx.owner for tx in net.chain.blocks[tv.tail].S)
        return owners

    def _tx_generation(self) -> Counter:
        net = self.net
        stats = Counter()
        pending = self._pending_owners()
        ids = self.order
        for pid in net.overlay.online_ids():
            peer = net.peers[pid]
            if not peer.honest or pid in pending:
                continue
            for _ in range(self.cfg.tx_rate):
                receiver = ids[self.work_rng.randrange(len(ids))]
                if receiver == pid:
                    continue
                amount = 1 + self.work_rng.randrange(10)
                res = net.attempt_transaction(pid, encode_transfer(receiver, amount, net.s))
                self._record_draw(res)
                stats["tx_attempts"] += 1
                if res.ok:
                    stats["tx_generated"] += 1
                    pending.add(pid)
                    break
                stats["tx_failed"] += 1
        return stats

    def _eligible_txs(self) -> list:
        """Mempool transactions a block on the current tail may include, one
        per owner, oldest first.  Permanently unsound or unauthenticated ones
        are dropped."""
        net = self.net
        tv = net.tail_view
        out, owners, drop = [], set(), []
        for h, tx in net.mempool.items():
            if tx.owner in net.blacklist or (net.blacklist and not net.auth(tx).ok):
                # blacklists only grow, so a failed authentication is final
                drop.append(h)
                continue
            why = _soundness(tx, tv, net.chain)
            if why == "superseded":
                drop.append(h)
                continue
            if why is None and tx.owner not in owners:
                owners.add(tx.owner)
                out.append(tx)
        for h in drop:
            del net.mempool[h]
        return out

    def _block_rounds(self) -> Counter:
        cfg = self.cfg
        net = self.net
        stats = Counter()
        fails = 0
        for _ in range(cfg.max_block_rounds):
            txs = self._eligible_txs()
            if len(txs) < net.params.min_tx:
                break
            online = [p for p in net.overlay.online_ids() if net.peers[p].honest]
            if not online:
                break
            n_owners = 2 if self.work_rng.random() < cfg.fork_prob else 1
            owners = [online[self.work_rng.randrange(len(online))] for _ in range(n_owners)]
            made = []
            batch = txs[:cfg.max_block_size]
            for owner in dict.fromkeys(owners):
                res = net.attempt_block(owner, batch, publish=False)
                self._record_draw(res)
                stats["block_attempts"] += 1
                if res.ok:
                    made.append(res.record)
                else:
                    stats["block_failed"] += 1
            for blk in made:
                net.publish_block(blk)
                stats["blocks_published"] += 1
            fails = 0 if made else fails + 1
            if fails >= 5:
                break
        return stats

    def _adversary_actions(self) -> Counter:
        """Adversaries in inject-invalid mode replay an already committed
        transaction inside a block of their own."""
        cfg = self.cfg
        net = self.net
        stats = Counter()
        if INJECT_INVALID not in cfg.adversary_modes or cfg.inject_prob <= 0:
            return stats
        committed = net.tail_view.committed
        if committed == net.genesis.h:
            return stats
        replay = net.chain.blocks[committed].S[:1]
        for pid in net.overlay.online_ids():
            peer = net.peers[pid]
            if peer.honest or INJECT_INVALID not in peer.modes:
                continue
            if self.work_rng.random() >= cfg.inject_prob:
                continue
            res = net.attempt_block(pid, replay, publish=False)
            self._record_draw(res)
            stats["adv_attempts"] += 1
            if res.ok:
                stats["adv_successes"] += 1
                self.injected.append((self.slot, pid, res.record.h))
                net.publish_block(res.record)
        return stats

    def _note_new_blocks(self) -> None:
        net = self.net
        chain = net.chain
        depth = chain.depth[net.tail_view.tail]
        # rows follow the main chain; a fork switch may replace the last rows
        keep = 0
        while keep < len(self.block_rows) and chain.main[keep + 1] == self.block_rows[keep]:
            keep += 1
        del self.block_rows[keep:]
        del self.holder_idx[keep:]
        for d in range(keep + 1, depth + 1):
            blk = chain.blocks[chain.main[d]]
            self.block_rows.append(blk.h)
            self.holder_idx.append([self.index[h] for h in net.holders_of(blk)])

    # -------------------------------------------------------------- slots

    def step(self) -> dict:
        net = self.net
        before_msgs = net.total_messages()
        ev_before = Counter(net.events)
        arrived = self._arrivals()
        self._churn()
        self._sample_availability()
        self._view_updates()
        stats = self._tx_generation()
        stats.update(self._block_rounds())
        stats.update(self._adversary_actions())
        pending = self._pending_owners()
        stats["reports_submitted"] = net.submit_reports(
            reporter_ok=lambda p: p.honest and p.ident not in pending)
        self._note_new_blocks()
        gap = net.conservation_gap()
        if gap != 0:
            raise SimulationError(f"conservation violated by {gap} at slot {self.slot}")
        online = net.overlay.online_ids()
        online_adv = sum(1 for p in online if not net.peers[p].honest)
        tv = net.tail_view
        row = {
            "slot": self.slot,
            "arrived": arrived,
            "online": len(online),
            "online_honest": len(online) - online_adv,
            "online_adversarial": online_adv,
            "committed_blocks": net.chain.depth[tv.committed],
            "mempool": len(net.mempool),
            "tx_generated": stats["tx_generated"],
            "tx_failed": stats["tx_failed"],
            "blocks_published": stats["blocks_published"],
            "block_failed": stats["block_failed"],
            "fork_knockouts": net.events["knockouts"] - ev_before["knockouts"],
            "fork_switches": net.events["fork_switches"] - ev_before["fork_switches"],
            "adv_attempts": stats["adv_attempts"],
            "adv_successes": stats["adv_successes"],
            "misbehavior_detected": net.events["misbehavior_detected"] - ev_before["misbehavior_detected"],
            "blacklisted": net.events["blacklisted"] - ev_before["blacklisted"],
            "reports_submitted": stats["reports_submitted"],
            "messages": net.total_messages() - before_msgs,
            "mean_replicas_online": (self.avail_with_owner / self.avail_pairs) if self.avail_pairs else 0.0,
            "mean_honest_found": (self.honest_within / self.draws) if self.draws else 0.0,
            "conservation_gap": gap,
        }
        self.totals.update(stats)
        self.per_slot.append(row)
        self.slot += 1
        if self.slot % 8 == 0:
            net.trim_caches()
        return row

    # ------------------------------------------------------------ results

    def final_audit(self) -> bool:
        """Every committed main-chain block re-authenticates, with one
        transaction per owner."""
        net = self.net
        chain = net.chain
        net.trim_caches()
        for h in chain.main[1:chain.depth[net.tail_view.committed] + 1]:
            blk = chain.blocks[h]
            if not net.auth(blk, full=True).ok:
                return False
            owners = [tx.owner for tx in blk.S]
            if len(set(owners)) != len(owners):
                return False
        return True

    def report(self) -> MetricsReport:
        cfg = self.cfg
        net = self.net
        a = net.params.alpha
        t = net.params.t
        security = []
        tail_counts = np.cumsum(self.adv_hist[::-1])[::-1]
        for tt in range(1, a + 1):
            succ = int(tail_counts[tt]) if tt < len(tail_counts) else 0
            security.append({"alpha": a, "t": tt, "attempts": self.draws, "successes": succ,
                             "rate": succ / self.draws if self.draws else 0.0})
        pairs = self.avail_pairs
        availability = [{
            "t": t,
            "mean_replicas_with_owner": self.avail_with_owner / pairs if pairs else 0.0,
            "mean_replicas_validators_only": self.avail_validators / pairs if pairs else 0.0,
        }]
        efficiency = []
        for k in range(1, a + 1):
            c = int(self.trials_cnt[k])
            efficiency.append({"k": k, "mean_trials": float(self.trials_sum[k] / c) if c else 0.0,
                               "samples": c})
        counts = Counter()
        committed_depth = net.chain.depth[net.tail_view.committed]
        for row in self.holder_idx[:committed_depth]:
            for k in row:
                counts[k] += 1
        ids_sorted = sorted(self.order)
        storage = []
        honest_counts = []
        arrived = set(self.arrived)
        for pid in ids_sorted:
            if pid not in arrived:
                continue
            c = counts.get(self.index[pid], 0)
            storage.append({"peer": f"{pid:0{(cfg.s + 3) // 4}x}", "replica_count": c})
            if net.peers[pid].honest:
                honest_counts.append(c)
        storage_stats = storage_balance(honest_counts, committed_depth, t, len(arrived))
        messages = [{"op_class": name, "mean": st.mean, "max": st.max, "count": st.count}
                    for name, st in sorted(net.ops.items())]
        totals = dict(sorted(self.totals.items()))
        totals.update({
            "slots": self.slot,
            "peers_arrived": len(self.arrived),
            "adversarial_peers": sum(1 for p in self.arrived if not net.peers[p].honest),
            "committed_blocks": committed_depth,
            "draws": self.draws,
            "mean_honest_found": self.honest_within / self.draws if self.draws else 0.0,
            "fork_knockouts": net.events["knockouts"],
            "fork_switches": net.events["fork_switches"],
            "blacklisted": net.events["blacklisted"],
            "bootstrap_failed": net.events["bootstrap_failed"],
            "misbehavior_detected": net.events["misbehavior_detected"],
            "total_messages": net.total_messages(),
            "minted_rewards": net.tail_view.supply.minted_rewards,
            "minted_audition": net.tail_view.supply.minted_audition,
            "burned": net.tail_view.supply.burned,
        })
        if cfg.final_audit:
            totals["final_audit_ok"] = self.final_audit()
        return MetricsReport(cfg.to_json(), self.per_slot, totals, security, availability,
                             efficiency, storage, storage_stats, messages)


def storage_balance(counts, blocks: int, t: int, n: int) -> dict:
    """Mean, standard deviation and coefficient of variation of per-peer
    replica counts, with a chi-square test against equal shares."""
    from scipy.stats import chisquare

    arr = np.asarray(counts, dtype=np.float64)
    if arr.size == 0:
        return {"peers": 0, "mean": 0.0, "stddev": 0.0, "cv": 0.0, "chi2_p": 1.0,
                "expected_mean": 0.0, "blocks": blocks}
    mean = float(arr.mean())
    sd = float(arr.std())
    p = float(chisquare(arr).pvalue) if arr.sum() > 0 and arr.size > 1 else 1.0
    return {"peers": int(arr.size), "mean": mean, "stddev": sd, "cv": sd / mean if mean else 0.0,
            "chi2_p": p, "expected_mean": blocks * (t + 1) / n if n else 0.0, "blocks": blocks}


def run(config: SimConfig, progress=None) -> MetricsReport:
    eng = Engine(config)
    for _ in range(config.slots):
        row = eng.step()
        if progress is not None:
            progress(row)
    return eng.report()


# --------------------------------------------------------- measurement views

def measure_adversarial_success(report: MetricsReport, alpha: int, t: int) -> float:
    for row in report.security:
        if row["alpha"] == alpha and row["t"] == t:
            return row["rate"]
    raise KeyError((alpha, t))


def measure_availability(report: MetricsReport, validators_only: bool = True) -> float:
    row = report.availability[0]
    return row["mean_replicas_validators_only" if validators_only else "mean_replicas_with_owner"]


def measure_efficiency(report: MetricsReport) -> list[tuple[int, float]]:
    return [(r["k"], r["mean_trials"]) for r in report.efficiency]


def measure_storage_balance(report: MetricsReport) -> tuple[float, float, float]:
    s = report.storage_stats
    return s["mean"], s["stddev"], s["cv"]


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    """Copy of ``config`` with top-level or ``pov_*`` overrides applied."""
    pov = {k[4:]: v for k, v in kw.items() if k.startswith("pov_")}
    top = {k: v for k, v in kw.items() if not k.startswith("pov_")}
    cfg = replace(config, **top)
    if pov:
        cfg = replace(cfg, pov=replace(cfg.pov, **pov))
    return cfg
