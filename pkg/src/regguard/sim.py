"""Discrete-event harness wiring validation, encrypted ordering, execution and settlement.

Simulated time is an integer microsecond clock.  A run is single-threaded and
deterministic in (config, seed); Monte Carlo trials fan out to processes.

Event log schema (one JSON object per line)::

    {"ts": <int us>, "tx": <tx_id>, "stage": <stage>, "outcome": <outcome>}

stages, in pipeline order: submit, syn, sem, state, commit, release,
execute, settle.  `commit` and `release` records carry the window id in
place of a tx id (``"w<id>"``).
"""

from __future__ import annotations

import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .chain import (
    BRIDGE_MINT,
    KYC_REGISTRY,
    ORACLE,
    REDEEM,
    SIGNATURES,
    SWAP,
    TRANSFER,
    Keyring,
    L1State,
    L2State,
    Revert,
    Scratch,
    Transaction,
    address_key,
    advance_l1,
    execute,
    make_address,
    make_tx,
    price_key,
    settle_l1,
    syn_legit,
)
from .crypto import ThresholdUnmet
from .ordering import (
    Batch,
    CommitteeConfig,
    OrderingWindow,
    Sequencer,
    assign_arrival,
    dkg,
    encrypt_tx,
    measure_fairness,
    verify_and_release,
)
from .presync import L1Cache, SeverityConfig, drift_price, validate_state
from .regspec import EvalStats, RuleSet, parse_rules, rule_complexity, validate_semantic

BLOCK_US = 12_000_000
PROFILES = {"simple": (1, 5), "medium": (6, 15), "complex": (16, 20)}
PROFILE_DEFAULT_COUNT = {"simple": 5, "medium": 12, "complex": 20}
ADVERSARIES = ("none", "mev_sequencer", "byzantine_oracle", "malicious_users", "combined")
MEV_MODES = ("off", "sandwich", "post_commit_swap")
MODES = ("guarded", "baseline")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CommitteeParams:
    n: int = 4
    t: int = 3
    byzantine_fraction: float = 0.0
    claims_honest_majority: bool = True
    clock_skew_us: int = 50_000  # alpha

    @property
    def byzantine_count(self) -> int:
        return math.floor(self.byzantine_fraction * self.n + 1e-9)

    def to_committee(self) -> CommitteeConfig:
        f = self.byzantine_count
        # the highest indices misbehave; the lowest t honest members answer decryption requests
        return CommitteeConfig(self.n, self.t, frozenset(range(self.n - f + 1, self.n + 1)), self.clock_skew_us)


@dataclass(frozen=True)
class Freshness:
    epsilon: float = 0.0
    eta: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    mode: str = "guarded"
    compare_baseline: bool = False
    tps: float = 20.0
    duration_windows: int = 50
    window_us: int = 2_000_000
    block_us: int = BLOCK_US
    settlement_lag_blocks: int = 1
    rule_profile: str = "simple"
    rule_count: int = 0  # 0 = profile default
    theta_max: int = 1_000_000
    dependency_intensity: float = 0.2
    arbitrage_share: float = 0.3
    n_users: int = 128
    oracle_feeds: int = 4
    oracle_update_prob: float = 0.25
    oracle_delay_blocks: int = 0
    oracle_inconsistency: float = 0.0
    kyc_revoke_prob: float = 0.0
    adversary: str = "none"
    mev_mode: str = "sandwich"
    malicious_fraction: float = 0.05
    security_bits: int = 64
    cache_capacity: int = 10_000
    max_retries: int = 3
    committee: CommitteeParams = field(default_factory=CommitteeParams)
    freshness: Freshness = field(default_factory=Freshness)
    severity: SeverityConfig = field(default_factory=SeverityConfig)

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.mode in MODES, f"mode must be one of {MODES}")
        need(self.tps > 0, "tps must be positive")
        need(self.duration_windows >= 1, "duration_windows must be >= 1")
        need(self.window_us >= 1 and self.block_us >= 1, "window_us and block_us must be positive")
        need(self.settlement_lag_blocks >= 1, "settlement_lag_blocks must be >= 1")
        need(self.rule_profile in PROFILES, f"rule_profile must be one of {tuple(PROFILES)}")
        need(0 <= self.rule_count <= 20, "rule_count must be in 0..20")
        need(0.0 <= self.dependency_intensity <= 0.4, "dependency_intensity must be in [0, 0.4]")
        for name in ("arbitrage_share", "oracle_update_prob", "oracle_inconsistency", "kyc_revoke_prob", "malicious_fraction"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must be in [0, 1]")
        for name in ("epsilon", "eta"):
            need(0.0 <= getattr(self.freshness, name) <= 1.0, f"freshness.{name} must be in [0, 1]")
        need(0 <= self.oracle_delay_blocks <= 10, "oracle_delay_blocks must be in 0..10")
        need(self.oracle_feeds >= 1 and self.n_users >= 2, "need >= 1 oracle feed and >= 2 users")
        need(self.adversary in ADVERSARIES, f"adversary must be one of {ADVERSARIES}")
        need(self.mev_mode in MEV_MODES, f"mev_mode must be one of {MEV_MODES}")
        c = self.committee
        need(1 <= c.t <= c.n, "committee needs 1 <= t <= n")
        need(0.0 <= c.byzantine_fraction <= 0.49, "committee.byzantine_fraction must be in [0, 0.49]")
        need(c.clock_skew_us >= 0, "committee.clock_skew_us must be >= 0")
        if c.claims_honest_majority:
            need(2 * c.byzantine_count < c.n, "byzantine members must be a strict minority")

    @property
    def predicate_count(self) -> int:
        return self.rule_count or PROFILE_DEFAULT_COUNT[self.rule_profile]

    def adversary_on(self, kind: str) -> bool:
        return self.adversary == kind or self.adversary == "combined"

    def to_dict(self) -> dict:
        d = asdict(replace(self, severity=SeverityConfig()))
        sev = self.severity
        d["severity"] = {"weights": dict(sev.weights), "theta_delay": sev.theta_delay, "theta_reject": sev.theta_reject}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioConfig":
        d = dict(d)
        d.pop("sweep", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "committee" in d:
                d["committee"] = _sub(CommitteeParams, d["committee"], "committee")
            if "freshness" in d:
                d["freshness"] = _sub(Freshness, d["freshness"], "freshness")
            if "severity" in d:
                extra = set(d["severity"]) - {"weights", "theta_delay", "theta_reject"}
                if extra:
                    raise ConfigError(f"unknown severity keys: {sorted(extra)}")
                d["severity"] = SeverityConfig.from_dict(d["severity"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_toml(cls, text: str) -> "ScenarioConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(data)


def _sub(kind, d, name):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{name} must be a table")
    extra = set(d) - {f.name for f in fields(kind)}
    if extra:
        raise ConfigError(f"unknown {name} keys: {sorted(extra)}")
    return kind(**d)


def sweep_axes(text: str) -> dict[str, list]:
    """The optional [sweep] table of a config: field name -> list of values."""
    data = tomllib.loads(text)
    axes = data.get("sweep", {})
    for k, v in axes.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"sweep.{k} must be a non-empty list")
    return axes


def with_overrides(cfg: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
    """Apply dotted-key overrides such as {"freshness.eta": 0.003}."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        head, _, tail = key.partition(".")
        if tail:
            d.setdefault(head, {})[tail] = value
        else:
            d[head] = value
    return ScenarioConfig.from_dict(d)


# ---------------------------------------------------------------------------
# rule corpus for generated scenarios

_TRANSFER_SIG = SIGNATURES[TRANSFER]
_CANONICAL = [
    ("whitelist", "Whitelist[to] == 1"),
    ("concentration", "balance[to] + amount <= {theta}"),
    ("threshold", "amount <= 10000 || EDD[from] == 1"),
    ("volume", "Volume24h[from] + amount <= 50000"),
    ("sanctions", "Sanctions[to] == 0"),
]
_FILLERS = [
    "amount >= 1",
    "balance[from] >= amount",
    "amount <= 100000 && balance[to] + amount <= {theta2}",
    "Sanctions[from] == 0",
    "2 * amount <= 200000",
    "!(Sanctions[to] == 1) || EDD[to] == 1",
    "balance[from] - amount >= 0 && Volume24h[to] >= 0",
    "amount + Volume24h[from] <= 2 * 50000",
]


def build_rule_text(k: int, theta_max: int = 1_000_000) -> str:
    """A rule file with `k` predicates on transfer plus fixed rules on the other functions."""
    if not 1 <= k <= 20:
        raise ValueError("predicate count must be in 1..20")
    lines = []
    for i in range(k):
        if i < len(_CANONICAL):
            rid, body = _CANONICAL[i]
        else:
            rid, body = f"aux{i - len(_CANONICAL) + 1}", _FILLERS[(i - len(_CANONICAL)) % len(_FILLERS)]
        lines.append(f"# generated predicate {i + 1}")
        lines.append(f"rule {rid} on {_TRANSFER_SIG}: " + body.format(theta=theta_max, theta2=2 * theta_max))
    lines.append("# bridged funds only to whitelisted accounts")
    lines.append(f"rule mint_whitelist on {SIGNATURES[BRIDGE_MINT]}: Whitelist[to] == 1")
    lines.append("# no sanctioned traders")
    lines.append(f"rule swap_sanctions on {SIGNATURES[SWAP]}: Sanctions[from] == 0")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# world and workload


@dataclass(frozen=True)
class World:
    users: tuple
    outsiders: tuple
    sanctioned: tuple
    attacker: bytes
    feeds: tuple
    pools: tuple
    l2: L2State
    l1: L1State


def build_world(cfg: ScenarioConfig) -> World:
    users = tuple(make_address(f"user/{i}") for i in range(cfg.n_users))
    outsiders = tuple(make_address(f"outsider/{i}") for i in range(4))
    sanctioned = tuple(make_address(f"sanctioned/{i}") for i in range(4))
    attacker = make_address("mev/searcher")
    feeds = tuple(range(cfg.oracle_feeds))
    pools = (0, 1)
    balance = {u: 100_000 for u in users}
    balance[attacker] = 1_000_000
    whitelist = {a: 1 for a in users + sanctioned + (attacker,)}
    maps = {
        "balance": balance,
        "Whitelist": whitelist,
        "Sanctions": {a: 1 for a in sanctioned},
        "EDD": {u: 1 for u in users[::8]},
        "poolX": {p: 10_000_000 for p in pools},
        "poolY": {p: 10_000_000 for p in pools},
    }
    slots = {(ORACLE, price_key(f)): 1000 + 250 * f for f in feeds}
    slots.update({(KYC_REGISTRY, address_key(u)): 1 for u in users})
    return World(users, outsiders, sanctioned, attacker, feeds, pools, L2State.from_maps(maps), L1State(slots, 0))


@dataclass(frozen=True)
class WorkloadTx:
    tx: Transaction
    kind: str  # transfer | bridge | arbitrage | mev
    invalid: str = ""  # non-empty for injected violations: whitelist | concentration | sanctions


def _keyring(cfg: ScenarioConfig) -> Keyring:
    return Keyring(b"regguard/sim/" + str(cfg.seed).encode())


def generate_workload(cfg: ScenarioConfig, rng: np.random.Generator, world: World | None = None) -> list[WorkloadTx]:
    """Poisson arrivals over the horizon, mixing transfers, oracle-dependent bridging and arbitrage swaps."""
    world = world or build_world(cfg)
    keyring = _keyring(cfg)
    horizon = cfg.duration_windows * cfg.window_us
    count = int(rng.poisson(cfg.tps * horizon / 1_000_000))
    times = np.sort(rng.integers(1, horizon, size=count))
    users = world.users
    malicious = cfg.adversary_on("malicious_users")
    k = cfg.predicate_count
    invalid_kinds = [kind for kind, need in (("whitelist", 1), ("concentration", 2), ("sanctions", 5)) if k >= need]
    nonces: dict[bytes, int] = {}
    out = []
    for ts in times.tolist():
        sender = users[int(rng.integers(len(users)))]
        u = rng.random()
        invalid = ""
        if malicious and invalid_kinds and rng.random() < cfg.malicious_fraction:
            invalid = invalid_kinds[int(rng.integers(len(invalid_kinds)))]
            kind = "transfer"
            to = {
                "whitelist": world.outsiders[int(rng.integers(len(world.outsiders)))],
                "concentration": users[int(rng.integers(len(users)))],
                "sanctions": world.sanctioned[int(rng.integers(len(world.sanctioned)))],
            }[invalid]
            amount = cfg.theta_max + 1 if invalid == "concentration" else int(rng.integers(1, 100))
            selector, params = TRANSFER, {"to": to, "amount": amount}
        elif u < cfg.dependency_intensity:
            kind = "bridge"
            feed = int(rng.integers(len(world.feeds)))
            if rng.random() < 0.5:
                selector, params = BRIDGE_MINT, {"to": sender, "amount": int(rng.integers(1, 100)), "feed": feed}
            else:
                selector, params = REDEEM, {"amount": int(rng.integers(1, 50)), "feed": feed}
        elif rng.random() < cfg.arbitrage_share:
            kind = "arbitrage"
            selector, params = SWAP, {"pool": int(rng.integers(len(world.pools))), "amountIn": int(rng.integers(10, 1000)), "minOut": 1}
        else:
            kind = "transfer"
            to = users[int(rng.integers(len(users)))]
            selector, params = TRANSFER, {"to": to, "amount": int(rng.integers(1, 100))}
        n = nonces.get(sender, 0)
        nonces[sender] = n + 1
        out.append(WorkloadTx(make_tx(keyring, sender, selector, params, nonce=n, arrival_ts=int(ts)), kind, invalid))
    return out


# ---------------------------------------------------------------------------
# adversaries


def mev_adversary(window: Sequence, mode: str, *, visible: bool = True, make_sandwich=None) -> list:
    """The order a content-aware sequencer would like to publish for one window.

    `window` holds plaintext Transactions when `visible`, ciphertexts otherwise.
    A content-blind adversary cannot locate a victim and leaves the order alone.
    `make_sandwich(victim)` returns the (front, back) transactions to inject.
    """
    items = list(window)
    if mode != "sandwich" or not visible or make_sandwich is None:
        return items
    swaps = [i for i, t in enumerate(items) if t.msg.selector == SWAP]
    if not swaps:
        return items
    victim = max(swaps, key=lambda i: (items[i].msg.params["amountIn"], -i))
    front, back = make_sandwich(items[victim])
    return items[:victim] + [front, items[victim], back] + items[victim + 1 :]


def post_commit_swap(o_enc: Sequence, o_plain: Sequence, i: int) -> tuple[list, list]:
    """Exchange positions i and i+1 after commitment (the injected deviation)."""
    enc, plain = list(o_enc), list(o_plain)
    enc[i], enc[i + 1] = enc[i + 1], enc[i]
    plain[i], plain[i + 1] = plain[i + 1], plain[i]
    return enc, plain


class ByzantineOracleFeed:
    """The cache's view of L1: confirmed blocks delivered `delay_blocks` late.

    With probability `inconsistency` a delivered value is perturbed.
    delay_blocks = 0 and inconsistency = 0 reproduce confirmed L1 exactly.
    """

    def __init__(self, genesis: L1State, delay_blocks: int, rng: np.random.Generator, inconsistency: float = 0.0):
        if not 0 <= delay_blocks <= 10:
            raise ValueError("delay_blocks must be in 0..10")
        self.delay = delay_blocks
        self.rng = rng
        self.inconsistency = inconsistency
        self.history = [genesis]
        self.blocks: list[list] = [[]]

    def record(self, l1: L1State, writes: list) -> list:
        """Register confirmed block `l1.block_height`; return the writes now delivered to the cache."""
        self.history.append(l1)
        self.blocks.append(list(writes))
        h = l1.block_height - self.delay
        if h < 1:
            return []
        out = []
        for a, k, v in self.blocks[h]:
            if self.inconsistency and self.rng.random() < self.inconsistency:
                v = drift_price(v, self.rng)
            out.append((a, k, v))
        return out

    @property
    def delivered_height(self) -> int:
        return max(0, len(self.history) - 1 - self.delay)

    def view(self, addr, key) -> int:
        return self.history[self.delivered_height].get(addr, key)


def byzantine_oracle(l1: L1State, delay_blocks: int, rng: np.random.Generator, inconsistency: float = 0.0) -> ByzantineOracleFeed:
    return ByzantineOracleFeed(l1, delay_blocks, rng, inconsistency)


# ---------------------------------------------------------------------------
# metrics

# slashing evidence beyond this many documents per run is counted but not kept
MAX_EVIDENCE_KEPT = 16

COUNT_KEYS = (
    "submitted",
    "syn_rejected",
    "sem_rejected",
    "state_rejected",
    "state_delayed",
    "ordered",
    "executed",
    "exec_failed",
    "undecryptable",
    "settled",
    "settle_failed",
    "in_flight",
)
TERMINAL_KEYS = ("syn_rejected", "sem_rejected", "state_rejected", "exec_failed", "undecryptable", "settled", "settle_failed", "in_flight")
COST_KEYS = ("predicate_visits", "cache_queries", "diff_entries", "crypto_ops")


@dataclass
class Metrics:
    mode: str
    counts: dict = field(default_factory=lambda: dict.fromkeys(COUNT_KEYS, 0))
    costs: dict = field(default_factory=lambda: dict.fromkeys(COST_KEYS, 0))
    fairness_violations: int = 0
    qualifying_pairs: int = 0
    slashing_events: int = 0
    silent_deviations: int = 0
    windows: int = 0
    l1_dependent_executed: int = 0
    injected_invalid: int = 0
    injected_invalid_sem_rejected: int = 0
    cache: dict = field(default_factory=dict)
    eta: float = 0.0
    evidence: list = field(default_factory=list)  # JSON texts, not part of the numeric summary

    @property
    def p_fail_accepted(self) -> float:
        n = self.counts["settled"] + self.counts["settle_failed"]
        return self.counts["settle_failed"] / n if n else 0.0

    @property
    def beta_hat(self) -> float:
        return self.fairness_violations / self.qualifying_pairs if self.qualifying_pairs else 0.0

    @property
    def epsilon_hat(self) -> float:
        return 1.0 - self.cache.get("freshness", 1.0)

    @property
    def bound(self) -> float:
        return self.epsilon_hat + self.eta

    def conserved(self) -> bool:
        return self.counts["submitted"] == sum(self.counts[k] for k in TERMINAL_KEYS)

    def summary(self) -> dict:
        """Flat numeric view with stable keys (what Monte Carlo aggregates)."""
        out = {f"count.{k}": self.counts[k] for k in COUNT_KEYS}
        out.update({f"cost.{k}": self.costs[k] for k in COST_KEYS})
        out.update(
            {
                "p_fail_accepted": self.p_fail_accepted,
                "beta_hat": self.beta_hat,
                "qualifying_pairs": self.qualifying_pairs,
                "fairness_violations": self.fairness_violations,
                "slashing_events": self.slashing_events,
                "silent_deviations": self.silent_deviations,
                "windows": self.windows,
                "l1_dependent_executed": self.l1_dependent_executed,
                "injected_invalid": self.injected_invalid,
                "injected_invalid_sem_rejected": self.injected_invalid_sem_rejected,
                "epsilon_hat": self.epsilon_hat,
                "eta": self.eta,
                "bound": self.bound,
            }
        )
        out.update({f"cache.{k}": v for k, v in self.cache.items()})
        return out

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "counts": dict(self.counts),
            "conserved": self.conserved(),
            "p_fail_accepted": self.p_fail_accepted,
            "bound_line": {
                "epsilon_hat": self.epsilon_hat,
                "eta": self.eta,
                "bound": self.bound,
                "within_bound": self.p_fail_accepted <= self.bound,
            },
            "fairness": {
                "beta_hat": self.beta_hat,
                "violations": self.fairness_violations,
                "qualifying_pairs": self.qualifying_pairs,
            },
            "costs": dict(self.costs),
            "slashing": {"events": self.slashing_events, "silent_deviations": self.silent_deviations},
            "cache": dict(self.cache),
            "windows": self.windows,
            "l1_dependent_executed": self.l1_dependent_executed,
            "injected_invalid": {"total": self.injected_invalid, "sem_rejected": self.injected_invalid_sem_rejected},
        }


# ---------------------------------------------------------------------------
# the pipeline


class _PendingNonces:
    """Admission-time nonce view: a nonce is consumed once its tx passes the syntactic check.

    Later stages may still drop the tx; simulated users do not resubmit, and
    execution tolerates the resulting nonce gaps.
    """

    def __init__(self):
        self.base: L2State | None = None
        self.admitted: dict[bytes, int] = {}

    def next_nonce(self, sender) -> int:
        n = self.admitted.get(sender)
        return self.base.next_nonce(sender) if n is None else n


class _PinnedView:
    """Execution reads the L1 values the state validator signed off on."""

    def __init__(self, pinned: Mapping, fallback):
        self.pinned = pinned
        self.fallback = fallback

    def __call__(self, addr, key):
        v = self.pinned.get((addr, key))
        return self.fallback(addr, key) if v is None else v


def _streams(seed: int) -> dict:
    names = ("workload", "committee", "cache", "eta", "l1", "feed", "crypto", "adversary")
    children = np.random.SeedSequence(seed).spawn(len(names))
    out = {n: np.random.default_rng(c) for n, c in zip(names, children)}
    out["crypto"] = random.Random(int(children[names.index("crypto")].generate_state(1, np.uint64)[0]))
    return out


def run_scenario(cfg: ScenarioConfig, *, mode: str | None = None, event_log: list | None = None) -> Metrics:
    """Run one scenario end to end and return its metrics.

    `mode` overrides cfg.mode so guarded and baseline can share one config
    (and therefore one seed).  Records are appended to `event_log` if given.
    """
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    guarded = mode == "guarded"
    rs = _streams(cfg.seed)
    world = build_world(cfg)
    workload = generate_workload(cfg, rs["workload"], world)
    keyring = _keyring(cfg)
    rules: RuleSet = parse_rules(build_rule_text(cfg.predicate_count, cfg.theta_max))
    committee = cfg.committee.to_committee()
    alpha = committee.clock_skew_bound_alpha
    sequencer = Sequencer(b"sim/" + str(cfg.seed).encode())
    m = Metrics(mode, eta=cfg.freshness.eta if guarded else 0.0)
    log = event_log.append if event_log is not None else None

    # L1, the (possibly Byzantine) feed, and the cache that syncs from it
    l1 = world.l1
    feed = byzantine_oracle(
        l1,
        cfg.oracle_delay_blocks,
        rs["feed"],
        cfg.oracle_inconsistency if cfg.adversary_on("byzantine_oracle") else 0.0,
    )
    truth = [l1]
    cache = L1Cache(
        [ORACLE, KYC_REGISTRY],
        cfg.cache_capacity,
        source=feed.view,
        stale_prob=cfg.freshness.epsilon,
        rng=rs["cache"],
        audit=lambda a, k: truth[0].get(a, k),
    )
    state = world.l2
    pending = _PendingNonces()
    settle_queue: dict[int, list] = {}
    mev = cfg.adversary_on("mev_sequencer")
    attacker_nonce = [0]

    def make_sandwich(victim: Transaction):
        p = victim.msg.params
        ts = victim.meta.arrival_ts + 2 * alpha + 1  # reacts after seeing the victim
        txs = []
        for _ in range(2):
            txs.append(
                make_tx(keyring, world.attacker, SWAP, {"pool": p["pool"], "amountIn": p["amountIn"], "minOut": 1}, nonce=attacker_nonce[0], arrival_ts=ts)
            )
            attacker_nonce[0] += 1
        m.counts["submitted"] += 2
        return txs[0], txs[1]

    def advance_block(b: int):
        nonlocal l1
        for tx, dep in settle_queue.pop(b, ()):
            ok = settle_l1(tx, dep, l1)
            m.counts["settled" if ok else "settle_failed"] += 1
            if log:
                log({"ts": b * cfg.block_us, "tx": tx.tx_id, "stage": "settle", "outcome": "ok" if ok else "conflict"})
        r = rs["l1"]
        writes = []
        for f in world.feeds:
            if r.random() < cfg.oracle_update_prob:
                slot = (ORACLE, price_key(f))
                writes.append((slot[0], slot[1], drift_price(l1.get(*slot), r)))
        if cfg.kyc_revoke_prob and r.random() < cfg.kyc_revoke_prob:
            u = world.users[int(r.integers(len(world.users)))]
            writes.append((KYC_REGISTRY, address_key(u), 0))
        l1 = advance_l1(l1, writes)
        truth[0] = l1
        delivered = feed.record(l1, writes)
        cache.apply(delivered, feed.delivered_height)

    # committee timestamps (one row of member observations per tx)
    n = committee.n
    byz = np.array([i in committee.byzantine for i in range(1, n + 1)])
    items = []
    rc = rs["committee"]
    for w in workload:
        true_ts = w.tx.meta.arrival_ts
        if guarded:
            jitter = rc.integers(-(alpha // 2), alpha // 2 + 1, size=n)
            wild = rc.integers(-20 * alpha - 1, 20 * alpha + 2, size=n)
            obs = np.where(byz, true_ts + wild, true_ts + jitter)
            assigned = max(0, assign_arrival(obs.tolist()))
        else:
            assigned = max(0, true_ts + int(rc.integers(-(alpha // 2), alpha // 2 + 1)))
        items.append((assigned, w))
    m.counts["submitted"] += len(workload)
    m.injected_invalid = sum(1 for w in workload if w.invalid)
    by_window: dict[int, list] = {}
    for assigned, w in items:
        by_window.setdefault(assigned // cfg.window_us, []).append((assigned, w))
    n_windows = max([cfg.duration_windows] + [k + 1 for k in by_window])

    arrivals: list[int] = []
    positions: list[int] = []
    stats = EvalStats()
    next_block = 1
    for wid in range(n_windows):
        start, close = wid * cfg.window_us, (wid + 1) * cfg.window_us
        while next_block * cfg.block_us <= close:
            advance_block(next_block)
            next_block += 1
        entries = sorted(by_window.get(wid, ()), key=lambda e: (e[1].tx.meta.arrival_ts, e[1].tx.tx_hash))
        m.windows += 1
        pending.base = state

        # plaintext admission: syntactic, then semantic
        admitted: list[tuple[int, WorkloadTx]] = []
        for assigned, w in entries:
            tx = w.tx
            if log:
                log({"ts": tx.meta.arrival_ts, "tx": tx.tx_id, "stage": "submit", "outcome": w.kind})
            if not syn_legit(tx, keyring, pending):
                m.counts["syn_rejected"] += 1
                if log:
                    log({"ts": close, "tx": tx.tx_id, "stage": "syn", "outcome": "reject"})
                continue
            pending.admitted[tx.meta.sender] = tx.meta.nonce + 1
            if log:
                log({"ts": close, "tx": tx.tx_id, "stage": "syn", "outcome": "ok"})
            if guarded:
                d = validate_semantic(tx, state, rules, stats)
                if log:
                    log({"ts": close, "tx": tx.tx_id, "stage": "sem", "outcome": str(d)})
                if not d.accepted:
                    m.counts["sem_rejected"] += 1
                    if w.invalid:
                        m.injected_invalid_sem_rejected += 1
                    continue
            admitted.append((assigned, w))

        # state pre-synchronization on the window batch
        pinned: Mapping = {}
        if guarded and admitted:
            batch = [w.tx for _, w in admitted]
            sv = validate_state(batch, state, cache, l1, severity=cfg.severity, eta=cfg.freshness.eta, rng=rs["eta"], max_retries=cfg.max_retries)
            m.costs["diff_entries"] += len(sv.delta)
            if sv.decision.attempts > 1:
                m.counts["state_delayed"] += len(batch)
            if not sv.decision.accepted:
                m.counts["state_rejected"] += len(batch)
                if log:
                    for tx in batch:
                        log({"ts": close, "tx": tx.tx_id, "stage": "state", "outcome": sv.decision.verdict})
                admitted = []
            else:
                reverted = {tx.tx_hash for tx, _ in sv.sandbox.failed}
                kept = []
                for assigned, w in admitted:
                    bad = w.tx.tx_hash in reverted
                    if bad:
                        m.counts["state_rejected"] += 1
                    else:
                        kept.append((assigned, w))
                    if log:
                        log({"ts": close, "tx": w.tx.tx_id, "stage": "state", "outcome": "sandbox-revert" if bad else sv.decision.verdict})
                admitted = kept
                pinned = sv.sandbox.dependencies

        # ordering
        if guarded:
            released = _guarded_order(cfg, committee, wid, start, close, admitted, sequencer, keyring, rs, m, log)
        else:
            plain = [w.tx for _, w in admitted]  # FIFO by sequencer receipt
            plain = mev_adversary(plain, cfg.mev_mode if mev else "off", visible=True, make_sandwich=make_sandwich)
            if log:
                log({"ts": close, "tx": f"w{wid}", "stage": "commit", "outcome": "fifo"})
            released = plain
        m.counts["ordered"] += len(released)

        # execution on L2
        view = _PinnedView(pinned, cache) if guarded else cache
        scratch = Scratch(state)
        settle_at = l1.block_height + cfg.settlement_lag_blocks
        for tx in released:
            arrivals.append(tx.meta.arrival_ts)
            positions.append(len(positions))
            try:
                dep, _ = execute(tx, scratch, view)
            except Revert as exc:
                m.counts["exec_failed"] += 1
                if log:
                    log({"ts": close + 2, "tx": tx.tx_id, "stage": "execute", "outcome": exc.reason})
                continue
            m.counts["executed"] += 1
            if dep.required:
                m.l1_dependent_executed += 1
            settle_queue.setdefault(settle_at, []).append((tx, dep))
            if log:
                log({"ts": close + 2, "tx": tx.tx_id, "stage": "execute", "outcome": "ok"})
        state = scratch.commit(1)

    # drain settlements
    while settle_queue and next_block <= max(settle_queue):
        advance_block(next_block)
        next_block += 1
    m.counts["in_flight"] = sum(len(v) for v in settle_queue.values())

    fr = measure_fairness(arrivals, positions, alpha)
    m.fairness_violations, m.qualifying_pairs = fr.violations, fr.qualifying_pairs
    m.costs["predicate_visits"] = stats.visits
    m.costs["cache_queries"] = cache.stats.reads
    m.cache = cache.stats.as_dict()
    return m


def _guarded_order(cfg, committee, wid, start, close, admitted, sequencer, keyring, rs, m, log) -> list[Transaction]:
    """Encrypt, commit, threshold-decrypt and verify one window; returns the released order."""
    if not admitted:
        return []
    crng = rs["crypto"]
    keys = dkg(committee, wid, cfg.security_bits, crng)
    m.costs["crypto_ops"] += committee.n + 1
    window = OrderingWindow(wid, keys, start, close)
    for assigned, w in admitted:
        e = encrypt_tx(w.tx, keys, crng, keyring).with_arrival(assigned)
        window.submit(e)
    m.costs["crypto_ops"] += 3 * len(admitted)  # two exponentiations and one AEAD seal each
    mev = cfg.adversary_on("mev_sequencer")
    # the pre-commit adversary sees only ciphertexts
    commitment = window.commit(sequencer, close, reorder=lambda o: mev_adversary(o, cfg.mev_mode if mev else "off", visible=False))
    m.costs["crypto_ops"] += 1
    if log:
        log({"ts": close, "tx": f"w{wid}", "stage": "commit", "outcome": commitment.comm.hex()[:16]})
    try:
        plain = window.decrypt(committee.honest)
    except ThresholdUnmet:
        m.counts["undecryptable"] += len(admitted)
        if log:
            log({"ts": close + 1, "tx": f"w{wid}", "stage": "release", "outcome": "threshold-unmet"})
        return []
    m.costs["crypto_ops"] += len(admitted) * (2 * keys.t + 1)
    o_enc, o_plain = list(window.o_enc), list(plain)
    if mev and cfg.mev_mode == "post_commit_swap" and len(o_enc) >= 2:
        i = int(rs["adversary"].integers(len(o_enc) - 1))
        o_enc, o_plain = post_commit_swap(o_enc, o_plain, i)
    sig = sequencer.sign_release(wid, o_enc, o_plain)
    m.costs["crypto_ops"] += 1
    out = verify_and_release(commitment, o_enc, o_plain, release_signature=sig, committed=window.o_enc)
    window.finish()
    if isinstance(out, Batch):
        released = list(out.txs)
        if [t.tx_hash for t in released] != [e.link_hash for e in window.o_enc]:
            m.silent_deviations += 1
        outcome = "ok"
    else:
        m.slashing_events += 1
        if len(m.evidence) < MAX_EVIDENCE_KEPT:
            m.evidence.append(out.to_json())
        released = list(plain)  # the committed order is enforced
        outcome = f"slashed@{out.index}"
    if log:
        log({"ts": close + 1, "tx": f"w{wid}", "stage": "release", "outcome": outcome})
    return released


# ---------------------------------------------------------------------------
# Monte Carlo


def trial_seeds(master: int, trials: int) -> list[int]:
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(master).spawn(trials)]


def _trial(args) -> dict:
    cfg, mode = args
    return run_scenario(cfg, mode=mode).summary()


@dataclass(frozen=True)
class MetricStat:
    mean: float
    ci_low: float
    ci_high: float
    min: float
    max: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "ci95": [self.ci_low, self.ci_high], "min": self.min, "max": self.max}


def aggregate(rows: Sequence[Mapping[str, float]]) -> dict[str, MetricStat]:
    """Mean, normal-approximation 95% CI, min and max for every key (input order preserved)."""
    out = {}
    n = len(rows)
    for key in rows[0]:
        xs = np.array([float(r[key]) for r in rows])
        mean = float(xs.mean())
        half = 1.959963984540054 * float(xs.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        out[key] = MetricStat(mean, mean - half, mean + half, float(xs.min()), float(xs.max()))
    return out


def monte_carlo(cfg: ScenarioConfig, trials: int, *, mode: str | None = None, jobs: int = 1) -> dict[str, MetricStat]:
    """Independent runs on seeds derived from cfg.seed, aggregated in trial order."""
    if trials < 2:
        raise ValueError("trials must be >= 2")
    work = [(replace(cfg, seed=s), mode) for s in trial_seeds(cfg.seed, trials)]
    if jobs <= 1:
        rows = [_trial(a) for a in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_trial, work, chunksize=max(1, trials // (4 * jobs))))
    return aggregate(rows)


# ---------------------------------------------------------------------------
# rule-evaluation cost scaling


def complexity_scaling(counts: Sequence[int] = tuple(range(1, 21)), n_txs: int = 200, seed: int = 0) -> list[dict]:
    """Mean predicate node visits per compliant transfer for rule sets of each size."""
    cfg = ScenarioConfig(seed=seed, n_users=64)
    world = build_world(cfg)
    rng = np.random.default_rng(seed)
    keyring = _keyring(cfg)
    txs = []
    for i in range(n_txs):
        a, b = rng.choice(len(world.users), size=2, replace=False)
        txs.append(make_tx(keyring, world.users[a], TRANSFER, {"to": world.users[b], "amount": int(rng.integers(1, 100))}, nonce=0, arrival_ts=1 + i))
    rows = []
    for k in counts:
        rs = parse_rules(build_rule_text(k, cfg.theta_max))
        stats = EvalStats()
        rejected = 0
        for tx in txs:
            if not validate_semantic(tx, world.l2, rs, stats).accepted:
                rejected += 1
        total_l = sum(rule_complexity(rs.get(rid).expr) for rid in rs.index[TRANSFER])
        rows.append({"predicates": k, "sum_L": total_l, "mean_visits": stats.visits / len(txs), "rejected": rejected})
    return rows


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope, intercept and R^2."""
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot else 1.0
    return float(slope), float(intercept), r2
