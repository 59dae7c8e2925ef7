"""Cross-layer state pre-synchronization: L1 cache, sandboxing, diffing and verdicts."""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .chain import (
    BRIDGE_MINT,
    KYC_REGISTRY,
    ORACLE,
    TRANSFER,
    Address,
    Keyring,
    L1Dependency,
    L1State,
    L2State,
    Revert,
    Scratch,
    Transaction,
    advance_l1,
    execute,
    make_address,
    make_tx,
    price_key,
    settle_l1,
)

ACCEPT, DELAY, REJECT = "accept", "delay", "reject"

ELIGIBILITY = "eligibility"
BALANCE = "balance"
ORACLE_PRICE = "oracle"
INFORMATIONAL = "informational"

L1_ESCROW = make_address("l1/bridge-escrow")


# ---------------------------------------------------------------------------
# cache


@dataclass
class CacheEntry:
    value: int
    block_seen: int
    prev_value: int | None = None


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    stale_serves: int = 0
    reads: int = 0

    @property
    def freshness(self) -> float:
        return 1.0 - self.stale_serves / self.reads if self.reads else 1.0

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "stale_serves": self.stale_serves,
            "reads": self.reads,
            "freshness": round(self.freshness, 6),
        }


class L1Cache:
    """Write-through L1 storage cache, LRU per tracked contract.

    `source` backs misses (the feed the cache syncs from).  `stale_prob` makes
    each hit serve the entry's previous value with that probability.  `audit`
    is ground truth used only to count stale serves.
    """

    def __init__(
        self,
        tracked: Iterable[Address],
        capacity: int = 10_000,
        source: Callable[[Address, bytes], int] | None = None,
        *,
        stale_prob: float = 0.0,
        rng: np.random.Generator | None = None,
        audit: Callable[[Address, bytes], int] | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.tracked = frozenset(tracked)
        self.capacity = capacity
        self.source = source
        self.stale_prob = stale_prob
        self.rng = rng
        self.audit = audit
        self.entries: dict[Address, OrderedDict] = {a: OrderedDict() for a in self.tracked}
        self.stats = CacheStats()
        self.synced_height = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return sum(len(m) for m in self.entries.values())

    def __contains__(self, slot) -> bool:
        addr, key = slot
        return key in self.entries.get(addr, ())

    def peek(self, addr: Address, key: bytes) -> CacheEntry | None:
        m = self.entries.get(addr)
        return None if m is None else m.get(key)

    def _put(self, addr: Address, key: bytes, value: int, height: int) -> None:
        m = self.entries[addr]
        old = m.get(key)
        if old is None:
            m[key] = CacheEntry(value, height)
            if len(m) > self.capacity:
                m.popitem(last=False)
                self.stats.evictions += 1
        elif height >= old.block_seen:  # never regress to an older block's value
            if old.value != value:
                old.prev_value = old.value
                old.value = value
            old.block_seen = height
            m.move_to_end(key)

    def read(self, addr: Address, key: bytes) -> int:
        with self._lock:
            self.stats.reads += 1
            m = self.entries.get(addr)
            entry = None if m is None else m.get(key)
            if entry is None:
                self.stats.misses += 1
                value = self.source(addr, key) if self.source is not None else 0
                if m is not None:
                    self._put(addr, key, value, self.synced_height)
            else:
                self.stats.hits += 1
                m.move_to_end(key)
                value = entry.value
                if self.stale_prob and entry.prev_value is not None and self.rng.random() < self.stale_prob:
                    value = entry.prev_value
            if self.audit is not None and value != self.audit(addr, key):
                self.stats.stale_serves += 1
            return value

    __call__ = read

    def apply(self, writes: Iterable[tuple], height: int) -> None:
        with self._lock:
            for addr, key, value in writes:
                if addr in self.entries:
                    self._put(addr, key, value, height)
            self.synced_height = max(self.synced_height, height)


def cache_update(c: L1Cache, l1: L1State, changed_slots: Iterable[tuple]) -> L1Cache:
    """Refresh tracked `changed_slots` ((addr, key) pairs) from `l1` at its height."""
    c.apply(((a, k, l1.get(a, k)) for a, k in changed_slots), l1.block_height)
    return c


# ---------------------------------------------------------------------------
# sandbox, diff, decision


@dataclass(frozen=True)
class DiffEntry:
    addr: Address
    key: bytes
    v_proj: int
    v_act: int

    def as_dict(self) -> dict:
        return {
            "addr": "0x" + self.addr.hex(),
            "key": "0x" + self.key.hex(),
            "v_proj": "0x" + self.v_proj.to_bytes(32, "big").hex(),
            "v_act": "0x" + self.v_act.to_bytes(32, "big").hex(),
        }


@dataclass
class SandboxResult:
    projected: L2State
    dependencies: dict  # (addr, key) -> value seen, first-read order
    per_tx: list  # (tx, L1Dependency | None)
    failed: list  # (tx, reason)
    readers: dict = field(default_factory=dict)  # (addr, key) -> [tx_id, ...]


def sandbox_execute(batch: Sequence[Transaction], s: L2State, c: Callable[[Address, bytes], int]) -> SandboxResult:
    """Run the batch on a scratch copy of `s`, reading L1 through the cache."""
    scratch = Scratch(s)
    deps: dict[tuple, int] = {}
    readers: dict[tuple, list] = {}
    per_tx, failed = [], []
    for tx in batch:
        try:
            dep, _ = execute(tx, scratch, c)
        except Revert as exc:
            failed.append((tx, exc.reason))
            per_tx.append((tx, None))
            continue
        per_tx.append((tx, dep))
        for a, k, v in dep.required:
            deps.setdefault((a, k), v)
            readers.setdefault((a, k), []).append(dep.tx_id)
    return SandboxResult(scratch.commit(), deps, per_tx, failed, readers)


def compute_diff(d: Mapping[tuple, int], l1: L1State) -> list[DiffEntry]:
    out = [DiffEntry(a, k, v, l1.get(a, k)) for (a, k), v in d.items() if l1.get(a, k) != v]
    out.sort(key=lambda e: (e.addr, e.key))
    return out


@dataclass(frozen=True)
class SeverityConfig:
    """Per-class weights and thresholds for the accept/delay/reject function.

    Flags and balances score their weight per divergent slot; oracle prices
    score weight x relative drift in basis points.
    """

    weights: Mapping[str, float] = field(
        default_factory=lambda: {ELIGIBILITY: 100, BALANCE: 100, ORACLE_PRICE: 1, INFORMATIONAL: 1}
    )
    theta_delay: float = 10
    theta_reject: float = 100
    contract_classes: Mapping[Address, str] = field(
        default_factory=lambda: {KYC_REGISTRY: ELIGIBILITY, ORACLE: ORACLE_PRICE, L1_ESCROW: BALANCE}
    )

    def classify(self, addr: Address, key: bytes) -> str:
        return self.contract_classes.get(addr, INFORMATIONAL)

    def score(self, e: DiffEntry) -> Fraction:
        cls = self.classify(e.addr, e.key)
        w = Fraction(self.weights.get(cls, 1))
        if cls == ORACLE_PRICE:
            if e.v_proj == 0:
                return Fraction(10**9)
            return w * Fraction(abs(e.v_act - e.v_proj) * 10_000, e.v_proj)
        return w

    @classmethod
    def from_dict(cls, d: Mapping) -> "SeverityConfig":
        base = cls()
        weights = dict(base.weights)
        weights.update({k: v for k, v in d.get("weights", {}).items()})
        return cls(
            weights=weights,
            theta_delay=d.get("theta_delay", base.theta_delay),
            theta_reject=d.get("theta_reject", base.theta_reject),
        )


@dataclass(frozen=True)
class Decision:
    verdict: str
    severity_score: Fraction = Fraction(0)
    triggering_entries: tuple = ()
    attempts: int = 1
    attributed: Mapping[tuple, tuple] = field(default_factory=dict)  # (addr,key) -> tx ids

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPT


def decide(delta: Sequence[DiffEntry], weights: SeverityConfig | None = None) -> Decision:
    cfg = weights or SeverityConfig()
    if not delta:
        return Decision(ACCEPT)
    score = sum((cfg.score(e) for e in delta), Fraction(0))
    if score >= cfg.theta_reject:
        verdict = REJECT
    elif score >= cfg.theta_delay:
        verdict = DELAY
    else:
        verdict = ACCEPT
    return Decision(verdict, score, tuple(delta))


@dataclass
class StateValidation:
    decision: Decision
    sandbox: SandboxResult
    delta: list
    dropped: frozenset = frozenset()


def validate_state(
    batch: Sequence[Transaction],
    s: L2State,
    c: L1Cache,
    l1: L1State,
    *,
    severity: SeverityConfig | None = None,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    max_retries: int = 3,
) -> StateValidation:
    """Sandbox, diff against confirmed L1, decide; delays resync the divergent slots and retry.

    With probability `eta` each dependency slot is missed by the tracker (it
    never reaches the diff).  After `max_retries` delays the batch is rejected.
    """
    severity = severity or SeverityConfig()
    missed: dict[tuple, bool] = {}
    attempts = 0
    while True:
        attempts += 1
        sb = sandbox_execute(batch, s, c)
        tracked = {}
        for slot, v in sb.dependencies.items():
            if slot not in missed:
                missed[slot] = bool(eta) and rng.random() < eta
            if not missed[slot]:
                tracked[slot] = v
        delta = compute_diff(tracked, l1)
        d = decide(delta, severity)
        attributed = {(e.addr, e.key): tuple(sb.readers.get((e.addr, e.key), ())) for e in delta}
        dropped = frozenset(k for k, v in missed.items() if v)
        if d.verdict == DELAY and attempts <= max_retries:
            # targeted state-diff retrieval for the divergent keys
            c.apply(((e.addr, e.key, e.v_act) for e in delta), l1.block_height)
            continue
        if d.verdict == DELAY:
            d = Decision(REJECT, d.severity_score, d.triggering_entries)
        elif d.verdict == ACCEPT and delta:
            # benign divergence: write the confirmed values through and re-project
            c.apply(((e.addr, e.key, e.v_act) for e in delta), l1.block_height)
            sb = sandbox_execute(batch, s, c)
        return StateValidation(
            Decision(d.verdict, d.severity_score, d.triggering_entries, attempts, attributed),
            sb,
            delta,
            dropped,
        )


# ---------------------------------------------------------------------------
# Monte Carlo estimate of settlement failure among accepted transactions


@dataclass(frozen=True)
class FreshnessParams:
    """Cache-freshness model for the failure-rate estimate.

    epsilon: probability a dependency slot's cached value differs from the
        value L1 holds at settlement (the write lands after validation, so it
        is invisible to the diff).
    eta: probability the dependency tracker misses a slot.
    lag_prob: probability the cache has not yet received a confirmed update
        (visible to the diff, so only dangerous when also missed).
    """

    epsilon: float = 0.0
    eta: float = 0.0
    update_interval_ms: int = 1000
    lag_prob: float = 0.3

    def __post_init__(self):
        for name in ("epsilon", "eta", "lag_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @property
    def bound(self) -> float:
        return self.epsilon + self.eta


@dataclass(frozen=True)
class FailRateEstimate:
    accepted: int
    failed: int
    submitted: int
    rejected: int
    delayed_batches: int
    epsilon: float
    eta: float

    @property
    def p_fail_accepted(self) -> float:
        return self.failed / self.accepted if self.accepted else 0.0

    @property
    def bound(self) -> float:
        return self.epsilon + self.eta

    @property
    def allowance(self) -> float:
        """bound + 3 sqrt(bound / N): the Monte Carlo acceptance line."""
        if not self.accepted:
            return self.bound
        return self.bound + 3 * math.sqrt(self.bound / self.accepted)

    @property
    def within_bound(self) -> bool:
        return self.p_fail_accepted <= self.allowance

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "eta": self.eta,
            "accepted": self.accepted,
            "failed": self.failed,
            "p_fail_accepted": self.p_fail_accepted,
            "bound": self.bound,
            "allowance": self.allowance,
            "within_bound": self.within_bound,
        }


def drift_price(value: int, rng: np.random.Generator, lo: int = 5, hi: int = 30) -> int:
    bps = int(rng.integers(lo, hi))
    step = max(1, value * bps // 10_000)
    return value + step if rng.random() < 0.5 else max(1, value - step)


def estimate_fail_rate(
    trials: int,
    params: FreshnessParams,
    *,
    batch_size: int = 20,
    dependent_fraction: float = 1.0,
    seed: int = 0,
    severity: SeverityConfig | None = None,
) -> FailRateEstimate:
    """Run `trials` independent batches through validate_state and settle the accepted ones.

    Each dependent transaction is a bridge mint reading its own oracle slot.
    Random streams are split by purpose so runs with different epsilon on the
    same seed share every other draw.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    keyring = Keyring(b"fail-rate/" + str(seed).encode())
    users = [make_address(f"fr-user/{i}") for i in range(batch_size)]
    sink = make_address("fr-sink")
    base_state = L2State.from_maps({"balance": {u: 10**9 for u in users}})
    accepted = failed = rejected = delayed = 0
    root = np.random.SeedSequence([seed, 0x5EED])
    for trial, ss in enumerate(root.spawn(trials)):
        r_work, r_lag, r_eta, r_eps = (np.random.default_rng(x) for x in ss.spawn(4))
        dep_mask = r_work.random(batch_size) < dependent_fraction
        feeds = [trial * batch_size + i for i in range(batch_size)]
        slots = [(ORACLE, price_key(f)) for f in feeds]
        l1 = L1State({s: int(r_work.integers(500, 5000)) for s in slots}, trial)
        batch = []
        for i, u in enumerate(users):
            if dep_mask[i]:
                tx = make_tx(keyring, u, BRIDGE_MINT, {"to": u, "amount": 10, "feed": feeds[i]}, nonce=0, arrival_ts=1 + i)
            else:
                tx = make_tx(keyring, u, TRANSFER, {"to": sink, "amount": 10}, nonce=0, arrival_ts=1 + i)
            batch.append(tx)
        cache = L1Cache([ORACLE], capacity=max(10_000, batch_size), source=l1.get)
        cache.apply(((a, k, l1.get(a, k)) for a, k in slots), l1.block_height)
        # one confirmed block the cache may not have caught up with
        moved = r_lag.random(batch_size) < 0.5
        lagged = r_lag.random(batch_size) < params.lag_prob
        writes = [(a, k, drift_price(l1.get(a, k), r_lag)) for (a, k), m in zip(slots, moved) if m]
        l1 = advance_l1(l1, writes)
        cache.apply((w for w, lg in zip(writes, lagged[moved]) if not lg), l1.block_height)
        val = validate_state(batch, base_state, cache, l1, severity=severity, eta=params.eta, rng=r_eta)
        # the settlement block: some writes land after validation
        u_eps = r_eps.random(batch_size)
        post = [(a, k, drift_price(l1.get(a, k), r_eps)) for (a, k), u in zip(slots, u_eps) if u < params.epsilon]
        post.append((ORACLE, price_key(-1 - trial), int(r_eps.integers(1, 10**6))))
        l1_settle = advance_l1(l1, post)
        if val.decision.attempts > 1:
            delayed += 1
        if not val.decision.accepted:
            rejected += batch_size
            continue
        for tx, dep in val.sandbox.per_tx:
            if dep is None:
                rejected += 1
                continue
            accepted += 1
            if not settle_l1(tx, dep, l1_settle):
                failed += 1
    return FailRateEstimate(accepted, failed, trials * batch_size, rejected, delayed, params.epsilon, params.eta)
