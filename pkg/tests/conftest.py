from __future__ import annotations

import pytest

from lightchain.consensus import Network, PoVParams


def small_params(**kw) -> PoVParams:
    base = dict(t=3, alpha=8, initial_balance=1000)
    base.update(kw)
    return PoVParams(**base)


@pytest.fixture
def net8() -> Network:
    """Eight honest peers, t=3 of alpha=8."""
    return Network.create(8, small_params(), seed=0)


@pytest.fixture
def net16() -> Network:
    return Network.create(16, small_params(), seed=11)


def sync_all(net: Network, rounds: int = 10) -> None:
    """Run view_update on every online peer until nothing advances."""
    for p in net.peers.values():
        if not net.online(p.ident):
            continue
        for _ in range(rounds):
            if net.view_update(p) not in ("advanced", "switched", "bootstrap"):
                break


def extend_chain(net: Network, blocks: int, start: int = 0) -> list:
    """Append ``blocks`` blocks, each holding one transfer, syncing everyone
    in between.  Payers and block owners rotate through the sorted online
    IDs; combinations that cannot gather ``t`` signatures are skipped."""
    from lightchain.ledger import encode_transfer

    out = []
    k = start
    while len(out) < blocks:
        ids = [i for i in sorted(net.peers) if net.online(i)]
        n = len(ids)
        blk = None
        for shift in range(n * n):
            payer = ids[(k + shift) % n]
            payee, owner = ids[(k + shift + 1) % n], ids[(k + shift // n + 2) % n]
            if owner == payer:
                continue
            tx = net.attempt_transaction(payer, encode_transfer(payee, 1, net.s))
            if not tx.ok:
                continue
            res = net.attempt_block(owner, [tx.record])
            if res.ok:
                blk = res.record
                break
        if blk is None:
            raise RuntimeError("no owner could extend the chain")
        out.append(blk)
        sync_all(net)
        k += 1
    return out


def include(net: Network, txs) -> object:
    """Put ``txs`` into a block under the first online owner that succeeds."""
    owners = {tx.owner for tx in txs}
    for owner in sorted(net.peers):
        if owner in owners or not net.online(owner):
            continue
        res = net.attempt_block(owner, list(txs))
        if res.ok:
            sync_all(net)
            return res.record
    raise RuntimeError("no owner could include the transactions")


def transfer_any(net: Network, payer: int, amount: int = 1):
    """A validated transfer from ``payer`` to the first receiver that works."""
    from lightchain.ledger import encode_transfer

    for payee in sorted(net.peers):
        if payee == payer:
            continue
        res = net.attempt_transaction(payer, encode_transfer(payee, amount, net.s))
        if res.ok:
            return res.record
    return None


# ------------------------------------------------------------ acceptance

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one pass/fail line, then assert it."""
    def check(name: str, ok: bool, detail: str) -> None:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in VERDICTS:
            terminalreporter.write_line(line)
