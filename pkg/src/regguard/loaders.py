"""JSON fixture formats for L2/L1 state snapshots and transaction lists.

State (``regguard-state/1``)::

    {"format": "regguard-state/1",
     "maps": {"balance": {"0x<40 hex>": 900}, "poolX": {"0": 1000000}},
     "nonces": {"0x<40 hex>": 0},
     "volume_log": {"0x<40 hex>": [[<ts us>, <amount>], ...]},
     "l1": {"height": 7, "slots": [{"contract": "0x..", "key": "0x<64 hex>", "value": "0x<64 hex>" | int}]}}

Address-keyed maps use 0x-prefixed 20-byte hex keys; int-keyed maps use
decimal strings.  Every map must be declared by the rule schema.

Transactions (``regguard-txs/1``)::

    {"format": "regguard-txs/1",
     "txs": [{"label": "...", "sender": "0x..", "function": "transfer(address to, uint256 amount)",
              "params": {"to": "0x..", "amount": 9000}, "nonce": 0, "arrival_ts": 1, "gas": 21000}]}

`function` may also be a 0x-prefixed 4-byte selector of a known function.
Transactions are signed with a fixture keyring, so they pass syntactic checks.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Mapping

from .chain import SIGNATURES, Keyring, L1State, L2State, Transaction, make_tx, parse_address
from .regspec import ADDRESS, INT, MapDecl, function_selector

FIXTURE_KEYRING = Keyring(b"regguard/fixtures")
_SIG_RE = re.compile(r"^\s*(\w+)\s*\((.*)\)\s*$")


class FixtureError(ValueError):
    """Malformed fixture, or a fixture that does not match the rule schema."""


@dataclass(frozen=True)
class LabeledTx:
    label: str
    tx: Transaction


def _addr(text, where: str) -> bytes:
    try:
        return parse_address(str(text))
    except ValueError:
        raise FixtureError(f"{where}: not a 20-byte address: {text!r}") from None


def _word(v, where: str) -> int:
    if isinstance(v, int) and not isinstance(v, bool):
        return v
    if isinstance(v, str) and v.startswith("0x"):
        return int(v, 16)
    raise FixtureError(f"{where}: expected int or 0x-hex, got {v!r}")


def _key32(v, where: str) -> bytes:
    if not isinstance(v, str) or not v.startswith("0x") or len(v) != 66:
        raise FixtureError(f"{where}: expected 0x + 64 hex digits")
    return bytes.fromhex(v[2:])


def load_state(text: str, schema: Mapping[str, MapDecl]) -> tuple[L2State, L1State]:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FixtureError(f"state: invalid JSON: {exc}") from None
    if not isinstance(d, dict) or d.get("format") != "regguard-state/1":
        raise FixtureError("state: expected format 'regguard-state/1'")
    maps = {}
    for name, entries in d.get("maps", {}).items():
        decl = schema.get(name)
        if decl is None:
            raise FixtureError(f"state: map {name!r} is not declared by the rule schema")
        m = {}
        for k, v in entries.items():
            where = f"state.maps.{name}[{k}]"
            if decl.key_type == ADDRESS:
                key = _addr(k, where)
            else:
                try:
                    key = int(k)
                except ValueError:
                    raise FixtureError(f"{where}: {name} is int-keyed") from None
            if not isinstance(v, int) or isinstance(v, bool):
                raise FixtureError(f"{where}: values are integers")
            m[key] = v
        maps[name] = m
    nonces = {_addr(k, "state.nonces"): int(v) for k, v in d.get("nonces", {}).items()}
    vol = {_addr(k, "state.volume_log"): tuple((int(t), int(a)) for t, a in v) for k, v in d.get("volume_log", {}).items()}
    l2 = L2State({k: v for k, v in maps.items()}, nonces, 0, vol)
    l1d = d.get("l1", {})
    slots = {}
    for i, s in enumerate(l1d.get("slots", [])):
        where = f"state.l1.slots[{i}]"
        slots[(_addr(s.get("contract"), where), _key32(s.get("key"), where))] = _word(s.get("value"), where)
    return l2, L1State(slots, int(l1d.get("height", 0)))


def _signature_params(fn: str) -> tuple[bytes, list[tuple[str, str]]]:
    if fn.startswith("0x") and len(fn) == 10:
        sel = bytes.fromhex(fn[2:])
        if sel not in SIGNATURES:
            raise FixtureError(f"unknown selector {fn}")
        fn = SIGNATURES[sel]
    m = _SIG_RE.match(fn)
    if not m:
        raise FixtureError(f"bad function signature {fn!r}")
    params = []
    for part in filter(None, (p.strip() for p in m.group(2).split(","))):
        bits = part.split()
        if len(bits) != 2:
            raise FixtureError(f"function parameters need a type and a name: {fn!r}")
        params.append((bits[1], ADDRESS if bits[0] == "address" else INT))
    canonical = f"{m.group(1)}({','.join('address' if t == ADDRESS else 'uint256' for _, t in params)})"
    return function_selector(canonical), params


def load_txs(text: str, keyring: Keyring = FIXTURE_KEYRING) -> list[LabeledTx]:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FixtureError(f"txs: invalid JSON: {exc}") from None
    if not isinstance(d, dict) or d.get("format") != "regguard-txs/1":
        raise FixtureError("txs: expected format 'regguard-txs/1'")
    out = []
    for i, t in enumerate(d.get("txs", [])):
        where = f"txs[{i}]"
        selector, sig_params = _signature_params(str(t.get("function", "")))
        given = t.get("params", {})
        if set(given) != {n for n, _ in sig_params}:
            raise FixtureError(f"{where}: params {sorted(given)} do not match the function signature")
        params = {}
        for name, typ in sig_params:
            v = given[name]
            params[name] = _addr(v, f"{where}.{name}") if typ == ADDRESS else _word(v, f"{where}.{name}")
        tx = make_tx(
            keyring,
            _addr(t.get("sender"), f"{where}.sender"),
            selector,
            params,
            nonce=int(t.get("nonce", 0)),
            arrival_ts=int(t.get("arrival_ts", i + 1)),
            gas=int(t.get("gas", 21000)),
        )
        out.append(LabeledTx(str(t.get("label", f"tx{i}")), tx))
    return out
