"""Two-layer chain model: transactions, L2/L1 state, execution and settlement."""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from .regspec import ADDRESS, INT, INT64_MAX, INT64_MIN, MapDecl, function_selector, DEFAULT_SCHEMA

DAY_US = 24 * 3600 * 1_000_000
PRICE_UNIT = 1000  # oracle prices are fixed-point with 3 decimals

Address = bytes


def make_address(label) -> Address:
    """Deterministic 20-byte address for a label (int or str)."""
    return hashlib.sha256(b"regguard/address/" + str(label).encode()).digest()[:20]


def parse_address(text: str) -> Address:
    raw = bytes.fromhex(text[2:] if text.startswith("0x") else text)
    if len(raw) != 20:
        raise ValueError(f"address must be 20 bytes: {text!r}")
    return raw


def slot_key(*parts) -> bytes:
    """32-byte storage key derived from a label tuple."""
    return hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()


def address_key(addr: Address) -> bytes:
    return bytes(12) + addr


ORACLE = make_address("l1/oracle")
KYC_REGISTRY = make_address("l1/kyc-registry")


def price_key(feed: int) -> bytes:
    return slot_key("price", feed)


# ---------------------------------------------------------------------------
# transactions


@dataclass(frozen=True)
class Message:
    contract: Address
    selector: bytes
    params: Mapping[str, object]


@dataclass(frozen=True)
class Meta:
    arrival_ts: int
    nonce: int
    gas: int
    sender: Address


@dataclass(frozen=True)
class Transaction:
    msg: Message
    sig: bytes
    meta: Meta

    def __post_init__(self):
        if self.meta.nonce < 0:
            raise ValueError("nonce must be >= 0")
        if self.meta.arrival_ts <= 0:
            raise ValueError("arrival_ts must be positive")

    @property
    def sender(self) -> Address:
        return self.meta.sender

    @property
    def selector(self) -> bytes:
        return self.msg.selector

    @property
    def params(self) -> Mapping[str, object]:
        return self.msg.params

    def signing_bytes(self) -> bytes:
        return _encode_msg(self.msg) + _encode_meta(self.meta)

    def serialize(self) -> bytes:
        return self.signing_bytes() + struct.pack(">H", len(self.sig)) + self.sig

    @property
    def tx_hash(self) -> bytes:
        return hashlib.sha256(self.serialize()).digest()

    @property
    def tx_id(self) -> str:
        return self.tx_hash.hex()[:16]


def _encode_msg(msg: Message) -> bytes:
    out = [msg.contract, msg.selector, struct.pack(">H", len(msg.params))]
    for name in sorted(msg.params):
        value = msg.params[name]
        raw = name.encode()
        out.append(struct.pack(">B", len(raw)) + raw)
        if isinstance(value, (bytes, bytearray)):
            if len(value) != 20:
                raise ValueError(f"address param {name!r} must be 20 bytes")
            out.append(b"\x01" + bytes(value))
        else:
            out.append(b"\x00" + struct.pack(">q", value))
    return b"".join(out)


def _encode_meta(meta: Meta) -> bytes:
    return struct.pack(">QQQ", meta.arrival_ts, meta.nonce, meta.gas) + meta.sender


def deserialize_tx(data: bytes) -> Transaction:
    """Inverse of Transaction.serialize; raises ValueError on malformed input."""
    try:
        pos = 0
        contract, selector = data[0:20], data[20:24]
        (n,) = struct.unpack_from(">H", data, 24)
        pos = 26
        params: dict[str, object] = {}
        for _ in range(n):
            ln = data[pos]
            name = data[pos + 1 : pos + 1 + ln].decode()
            pos += 1 + ln
            tag = data[pos]
            if tag == 1:
                params[name] = bytes(data[pos + 1 : pos + 21])
                pos += 21
            elif tag == 0:
                (params[name],) = struct.unpack_from(">q", data, pos + 1)
                pos += 9
            else:
                raise ValueError(f"bad param tag {tag}")
        ts, nonce, gas = struct.unpack_from(">QQQ", data, pos)
        pos += 24
        sender = bytes(data[pos : pos + 20])
        pos += 20
        (sl,) = struct.unpack_from(">H", data, pos)
        sig = bytes(data[pos + 2 : pos + 2 + sl])
        if len(contract) != 20 or len(selector) != 4 or len(sender) != 20 or len(sig) != sl:
            raise ValueError("truncated transaction")
        if pos + 2 + sl != len(data):
            raise ValueError("trailing bytes after transaction")
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed transaction: {exc}") from None
    return Transaction(Message(bytes(contract), bytes(selector), params), sig, Meta(ts, nonce, gas, sender))


class Keyring:
    """Per-sender MAC keys derived from a master secret (simulation-grade signatures)."""

    def __init__(self, master: bytes):
        self._master = master
        self._cache: dict[Address, bytes] = {}

    def secret(self, sender: Address) -> bytes:
        k = self._cache.get(sender)
        if k is None:
            k = hashlib.sha256(b"regguard/key/" + self._master + sender).digest()
            self._cache[sender] = k
        return k

    def sign(self, msg: Message, meta: Meta) -> Transaction:
        unsigned = Transaction(msg, b"", meta)
        sig = hmac.new(self.secret(meta.sender), unsigned.signing_bytes(), hashlib.sha256).digest()
        return Transaction(msg, sig, meta)

    def verify(self, tx: Transaction) -> bool:
        expect = hmac.new(self.secret(tx.meta.sender), tx.signing_bytes(), hashlib.sha256).digest()
        return hmac.compare_digest(expect, tx.sig)


def syn_legit(tx: Transaction, keyring: Keyring, nonces) -> bool:
    """Signature, nonce and gas checks; `nonces` provides ``next_nonce(sender)``."""
    try:
        if tx.meta.gas <= 0:
            return False
        if tx.meta.nonce != nonces.next_nonce(tx.meta.sender):
            return False
        return keyring.verify(tx)
    except Exception:
        return False


# ---------------------------------------------------------------------------
# L2 state


CHAIN_SCHEMA: dict[str, MapDecl] = dict(DEFAULT_SCHEMA)
CHAIN_SCHEMA.update(
    {
        "holdings": MapDecl("holdings", ADDRESS),
        "redeemed": MapDecl("redeemed", ADDRESS),
        "poolX": MapDecl("poolX", INT),
        "poolY": MapDecl("poolY", INT),
    }
)


@dataclass(frozen=True)
class L2State:
    maps: Mapping[str, Mapping] = field(default_factory=dict)
    nonces: Mapping[Address, int] = field(default_factory=dict)
    height: int = 0
    volume_log: Mapping[Address, tuple] = field(default_factory=dict)

    def lookup(self, map_name: str, key) -> int:
        m = self.maps.get(map_name)
        return 0 if m is None else m.get(key, 0)

    @property
    def balances(self) -> Mapping[Address, int]:
        return self.maps.get("balance", {})

    def next_nonce(self, sender: Address) -> int:
        return self.nonces.get(sender, 0)

    def total_supply(self) -> int:
        return sum(self.balances.values())

    @classmethod
    def from_maps(cls, maps: Mapping[str, Mapping], nonces=None) -> "L2State":
        return cls({k: dict(v) for k, v in maps.items()}, dict(nonces or {}))


class Scratch:
    """Copy-on-write overlay on an L2State; several transactions may share one."""

    def __init__(self, base: L2State):
        self.base = base
        self.writes: dict[str, dict] = {}
        self.nonces: dict[Address, int] = {}
        self.volume: dict[Address, tuple] = {}

    def lookup(self, map_name: str, key) -> int:
        w = self.writes.get(map_name)
        if w is not None and key in w:
            return w[key]
        return self.base.lookup(map_name, key)

    def set(self, map_name: str, key, value: int) -> None:
        if value < INT64_MIN or value > INT64_MAX:
            raise Revert("overflow")
        self.writes.setdefault(map_name, {})[key] = value

    def next_nonce(self, sender: Address) -> int:
        n = self.nonces.get(sender)
        return self.base.next_nonce(sender) if n is None else n

    def volume_entries(self, sender: Address) -> tuple:
        v = self.volume.get(sender)
        return self.base.volume_log.get(sender, ()) if v is None else v

    def savepoint(self):
        return ({k: dict(v) for k, v in self.writes.items()}, dict(self.nonces), dict(self.volume))

    def rollback(self, sp) -> None:
        self.writes, self.nonces, self.volume = sp[0], sp[1], sp[2]

    def commit(self, height_delta: int = 0) -> L2State:
        base = self.base
        maps = dict(base.maps)
        for name, w in self.writes.items():
            m = dict(maps.get(name, {}))
            m.update(w)
            maps[name] = m
        nonces = dict(base.nonces)
        nonces.update(self.nonces)
        vol = dict(base.volume_log)
        vol.update(self.volume)
        return L2State(maps, nonces, base.height + height_delta, vol)


# ---------------------------------------------------------------------------
# L1 state


@dataclass(frozen=True)
class L1State:
    """Confirmed L1 storage. Slot values are 256-bit unsigned ints (big-endian on the wire)."""

    slots: Mapping[tuple, int] = field(default_factory=dict)
    block_height: int = 0

    def get(self, addr: Address, key: bytes) -> int:
        return self.slots.get((addr, key), 0)


def advance_l1(l1: L1State, block: Iterable[tuple]) -> L1State:
    """Append one block of (addr, key, value) writes, applied in order."""
    slots = dict(l1.slots)
    for addr, key, value in block:
        if not 0 <= value < 2**256:
            raise ValueError("L1 slot values are 32-byte unsigned integers")
        slots[(addr, key)] = value
    return L1State(slots, l1.block_height + 1)


@dataclass(frozen=True)
class L1Dependency:
    tx_id: str
    required: tuple = ()  # ((addr, key, assumed_value), ...) in first-read order


class Revert(Exception):
    """Contract-level failure: insufficient-funds, revert, overflow, nonce."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class TracingView:
    """Wraps an L1 lookup and records every distinct slot read with the value seen."""

    def __init__(self, lookup: Callable[[Address, bytes], int]):
        self._lookup = lookup
        self.reads: dict[tuple, int] = {}

    def __call__(self, addr: Address, key: bytes) -> int:
        slot = (addr, key)
        if slot in self.reads:
            return self.reads[slot]
        v = self._lookup(addr, key)
        self.reads[slot] = v
        return v


# contract handlers ----------------------------------------------------------

TRANSFER_SIG = "transfer(address,uint256)"
BRIDGE_MINT_SIG = "bridgeMint(address,uint256,uint256)"
REDEEM_SIG = "redeem(uint256,uint256)"
SWAP_SIG = "swap(uint256,uint256,uint256)"

TRANSFER = function_selector(TRANSFER_SIG)
BRIDGE_MINT = function_selector(BRIDGE_MINT_SIG)
REDEEM = function_selector(REDEEM_SIG)
SWAP = function_selector(SWAP_SIG)

TOKEN = make_address("l2/token")
BRIDGE = make_address("l2/bridge")
AMM = make_address("l2/amm")

SELECTOR_NAMES = {TRANSFER: "transfer", BRIDGE_MINT: "bridgeMint", REDEEM: "redeem", SWAP: "swap"}


def _debit(s: Scratch, who: Address, amount: int) -> None:
    bal = s.lookup("balance", who)
    if amount < 0 or bal < amount:
        raise Revert("insufficient-funds")
    s.set("balance", who, bal - amount)


def _credit(s: Scratch, who: Address, amount: int) -> None:
    s.set("balance", who, s.lookup("balance", who) + amount)


def _transfer(tx, s, l1):
    p = tx.msg.params
    amount = p["amount"]
    _debit(s, tx.meta.sender, amount)
    _credit(s, p["to"], amount)
    # rolling 24h outbound volume
    now = tx.meta.arrival_ts
    entries = tuple(e for e in s.volume_entries(tx.meta.sender) if e[0] > now - DAY_US) + ((now, amount),)
    s.volume[tx.meta.sender] = entries
    s.set("Volume24h", tx.meta.sender, sum(a for _, a in entries))
    return 0


def _oracle_price(l1, feed: int) -> int:
    price = l1(ORACLE, price_key(feed))
    if price <= 0:
        raise Revert("revert")
    return price


def _bridge_mint(tx, s, l1):
    p = tx.msg.params
    minted = p["amount"] * _oracle_price(l1, p["feed"]) // PRICE_UNIT
    if p["amount"] <= 0:
        raise Revert("revert")
    _credit(s, p["to"], minted)
    return minted


def _redeem(tx, s, l1):
    p = tx.msg.params
    sender = tx.meta.sender
    if l1(KYC_REGISTRY, address_key(sender)) != 1:
        raise Revert("revert")
    price = _oracle_price(l1, p["feed"])
    _debit(s, sender, p["amount"])
    s.set("redeemed", sender, s.lookup("redeemed", sender) + p["amount"] * price // PRICE_UNIT)
    return -p["amount"]


def _swap(tx, s, l1):
    p = tx.msg.params
    pool, amount_in = p["pool"], p["amountIn"]
    x, y = s.lookup("poolX", pool), s.lookup("poolY", pool)
    if x <= 0 or y <= 0 or amount_in <= 0:
        raise Revert("revert")
    out = y * amount_in // (x + amount_in)
    if out < p["minOut"] or out <= 0:
        raise Revert("revert")
    _debit(s, tx.meta.sender, amount_in)
    s.set("poolX", pool, x + amount_in)
    s.set("poolY", pool, y - out)
    s.set("holdings", tx.meta.sender, s.lookup("holdings", tx.meta.sender) + out)
    return 0


HANDLERS = {TRANSFER: _transfer, BRIDGE_MINT: _bridge_mint, REDEEM: _redeem, SWAP: _swap}
SIGNATURES = {
    TRANSFER: "transfer(address to, uint256 amount)",
    BRIDGE_MINT: "bridgeMint(address to, uint256 amount, uint256 feed)",
    REDEEM: "redeem(uint256 amount, uint256 feed)",
    SWAP: "swap(uint256 pool, uint256 amountIn, uint256 minOut)",
}


def execute(tx: Transaction, scratch: Scratch, l1_view: Callable[[Address, bytes], int]) -> tuple[L1Dependency, int]:
    """Run one transaction inside `scratch`; on Revert the scratch is left untouched.

    Returns the L1 dependency and the supply delta (minted minus burned).
    """
    handler = HANDLERS.get(tx.msg.selector)
    sp = scratch.savepoint()
    tracer = TracingView(l1_view)
    try:
        if handler is None:
            raise Revert("revert")
        sender = tx.meta.sender
        if tx.meta.nonce < scratch.next_nonce(sender):
            raise Revert("nonce")
        delta = handler(tx, scratch, tracer)
        scratch.nonces[sender] = tx.meta.nonce + 1
    except Revert:
        scratch.rollback(sp)
        raise
    except (KeyError, TypeError) as exc:
        scratch.rollback(sp)
        raise Revert("revert") from exc
    dep = L1Dependency(tx.tx_id, tuple((a, k, v) for (a, k), v in tracer.reads.items()))
    return dep, delta


def apply_l2(tx: Transaction, s: L2State, l1_view: Callable[[Address, bytes], int]) -> tuple[L2State, L1Dependency]:
    """Deterministic L2 transition; raises Revert on failure."""
    scratch = Scratch(s)
    dep, _ = execute(tx, scratch, l1_view)
    return scratch.commit(), dep


def settlement_conflicts(dep: L1Dependency, l1: L1State) -> list[tuple]:
    return [(a, k, v, l1.get(a, k)) for a, k, v in dep.required if l1.get(a, k) != v]


def settle_l1(tx: Transaction, dep: L1Dependency, l1: L1State) -> bool:
    """True (settled) iff every L1 value assumed during execution still holds."""
    for a, k, v in dep.required:
        if l1.slots.get((a, k), 0) != v:
            return False
    return True


def make_tx(keyring: Keyring, sender: Address, selector: bytes, params: Mapping, *, nonce: int, arrival_ts: int, gas: int = 21000, contract: Address | None = None) -> Transaction:
    if contract is None:
        contract = {TRANSFER: TOKEN, BRIDGE_MINT: BRIDGE, REDEEM: BRIDGE, SWAP: AMM}.get(selector, TOKEN)
    return keyring.sign(Message(contract, selector, dict(params)), Meta(arrival_ts, nonce, gas, sender))


def with_sig(tx: Transaction, sig: bytes) -> Transaction:
    return replace(tx, sig=sig)
