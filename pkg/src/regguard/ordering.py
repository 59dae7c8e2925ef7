"""Windowed encrypted ordering with binding commitments and slashing evidence.

Canonical byte formats (integers big-endian, fixed width):

EncryptedTx::

    u32 len(ct_sym) | ct_sym | u32 len(ct_k) | ct_k | u64 arrival_ts |
    sender[20] | u32 len(sig) | sig | link_hash[32]

    ct_sym = nonce[12] | ChaCha20-Poly1305 ciphertext and tag
    ct_k   = c1 (group element, fixed width) | wrapped_key[32]

Ordered list (also used for lists of plaintext transactions)::

    u32 count | count * (u32 len(item) | item)

The commitment is SHA-256 over the ordered-list encoding of the window's
EncryptedTx items.
"""

from __future__ import annotations

import bisect
import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .chain import Keyring, Transaction, deserialize_tx
from .crypto import (
    GROUPS,
    AuthFailure,
    Group,
    ThresholdUnmet,
    combine_partials,
    group_for,
    lagrange_at_zero,
    open_sealed,
    partial_decrypt,
    seal,
    split_secret,
    wrap_key,
)


class LinkMismatch(Exception):
    """Decrypted payload does not hash to the link hash submitted with it."""


# ---------------------------------------------------------------------------
# committee and keys


@dataclass(frozen=True)
class CommitteeConfig:
    n: int
    t: int
    byzantine: frozenset = frozenset()
    clock_skew_bound_alpha: int = 50_000  # microseconds

    def __post_init__(self):
        if not 1 <= self.t <= self.n:
            raise ValueError("need 1 <= t <= n")
        object.__setattr__(self, "byzantine", frozenset(self.byzantine))
        if not self.byzantine <= set(range(1, self.n + 1)):
            raise ValueError("byzantine members must be indices in 1..n")

    @property
    def honest(self) -> list[int]:
        return [i for i in range(1, self.n + 1) if i not in self.byzantine]

    @property
    def honest_majority(self) -> bool:
        return 2 * len(self.byzantine) < self.n


@dataclass(frozen=True)
class WindowKeys:
    window_id: int
    group: Group
    pk_temp: int
    shares: Mapping[int, int]
    t: int

    @property
    def pk_bytes(self) -> bytes:
        return self.group.encode(self.pk_temp)


def dkg(cfg: CommitteeConfig, window_id: int, security_bits: int, rng) -> WindowKeys:
    """Dealer-simulated key setup: Shamir t-of-n sharing of a fresh window secret."""
    group = group_for(security_bits)
    secret = 1 + rng.randrange(group.q - 1)
    shares = split_secret(secret, cfg.t, cfg.n, group.q, rng)
    return WindowKeys(window_id, group, pow(group.g, secret, group.p), shares, cfg.t)


# ---------------------------------------------------------------------------
# encrypted transactions


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


@dataclass(frozen=True)
class EncryptedTx:
    ct_sym: bytes
    ct_k: bytes
    arrival_ts: int
    sender: bytes
    sig: bytes
    link_hash: bytes

    def serialize(self) -> bytes:
        return b"".join(
            (
                _lp(self.ct_sym),
                _lp(self.ct_k),
                struct.pack(">Q", self.arrival_ts),
                self.sender,
                _lp(self.sig),
                self.link_hash,
            )
        )

    @property
    def ct_hash(self) -> bytes:
        return hashlib.sha256(self.ct_sym).digest()

    def submission_bytes(self) -> bytes:
        return _lp(self.ct_sym) + _lp(self.ct_k) + self.link_hash

    def with_arrival(self, ts: int) -> "EncryptedTx":
        return replace(self, arrival_ts=ts)


def deserialize_enc(data: bytes) -> EncryptedTx:
    try:
        pos = 0

        def take_lp():
            nonlocal pos
            (n,) = struct.unpack_from(">I", data, pos)
            out = data[pos + 4 : pos + 4 + n]
            if len(out) != n:
                raise ValueError("truncated field")
            pos += 4 + n
            return bytes(out)

        ct_sym = take_lp()
        ct_k = take_lp()
        (ts,) = struct.unpack_from(">Q", data, pos)
        sender = bytes(data[pos + 8 : pos + 28])
        pos += 28
        sig = take_lp()
        link = bytes(data[pos : pos + 32])
        if len(sender) != 20 or len(link) != 32 or pos + 32 != len(data):
            raise ValueError("bad lengths")
    except struct.error as exc:
        raise ValueError(f"malformed encrypted transaction: {exc}") from None
    return EncryptedTx(ct_sym, ct_k, ts, sender, sig, link)


def encode_list(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return struct.pack(">I", len(items)) + b"".join(_lp(x) for x in items)


def decode_list(data: bytes) -> list[bytes]:
    try:
        (n,) = struct.unpack_from(">I", data, 0)
        pos, out = 4, []
        for _ in range(n):
            (ln,) = struct.unpack_from(">I", data, pos)
            item = data[pos + 4 : pos + 4 + ln]
            if len(item) != ln:
                raise ValueError("truncated list item")
            out.append(bytes(item))
            pos += 4 + ln
    except struct.error as exc:
        raise ValueError(f"malformed list: {exc}") from None
    if pos != len(data):
        raise ValueError("trailing bytes after list")
    return out


def encrypt_tx(tx: Transaction, keys: WindowKeys, rng, keyring: Keyring | None = None) -> EncryptedTx:
    """Hybrid encryption: AEAD over the serialized tx, threshold KEM over its key."""
    k = rng.randbytes(32)
    ct_sym = seal(k, tx.serialize(), rng)
    c1, c2 = wrap_key(keys.group, keys.pk_temp, k, rng)
    ct_k = keys.group.encode(c1) + c2
    enc = EncryptedTx(ct_sym, ct_k, 0, tx.meta.sender, b"", tx.tx_hash)
    if keyring is not None:
        sig = hmac.new(keyring.secret(tx.meta.sender), enc.submission_bytes(), hashlib.sha256).digest()
        enc = replace(enc, sig=sig)
    return enc


def split_ct_k(group: Group, ct_k: bytes) -> tuple[int, bytes]:
    n = group.element_len
    if len(ct_k) != n + 32:
        raise AuthFailure("bad key ciphertext length")
    return int.from_bytes(ct_k[:n], "big"), ct_k[n:]


def member_partial(keys: WindowKeys, member: int, e: EncryptedTx) -> int:
    c1, _ = split_ct_k(keys.group, e.ct_k)
    return partial_decrypt(keys.group, c1, keys.shares[member])


def threshold_decrypt(partials: Mapping[int, int], e: EncryptedTx, keys: WindowKeys, lagrange=None) -> Transaction:
    """Combine >= t partials, open the payload and check the link hash."""
    if len(partials) < keys.t:
        raise ThresholdUnmet(f"{len(partials)} partial decryptions, need {keys.t}")
    c1, c2 = split_ct_k(keys.group, e.ct_k)
    k = combine_partials(keys.group, c1, c2, partials, keys.t, lagrange)
    payload = open_sealed(k, e.ct_sym)
    try:
        tx = deserialize_tx(payload)
    except ValueError as exc:
        raise AuthFailure(str(exc)) from None
    if tx.tx_hash != e.link_hash:
        raise LinkMismatch(f"payload hash {tx.tx_hash.hex()[:16]} != link {e.link_hash.hex()[:16]}")
    return tx


def assign_arrival(observations: Sequence[int]) -> int:
    """Lower median of member-observed timestamps; robust while f < n/2."""
    s = sorted(observations)
    return s[(len(s) - 1) // 2]


def order_window(txs: Iterable[EncryptedTx]) -> list[EncryptedTx]:
    """Sort by assigned arrival; ties by SHA-256 of the ciphertext (content-blind)."""
    return sorted(txs, key=lambda e: (e.arrival_ts, e.ct_hash))


# ---------------------------------------------------------------------------
# commitments and release


def ordering_hash(o_enc: Sequence[EncryptedTx]) -> bytes:
    return hashlib.sha256(encode_list(e.serialize() for e in o_enc)).digest()


def _commit_message(window_id: int, comm: bytes) -> bytes:
    return b"regguard/commit/" + struct.pack(">Q", window_id) + comm


def _release_message(window_id: int, enc_blob: bytes, plain_blob: bytes) -> bytes:
    return (
        b"regguard/release/"
        + struct.pack(">Q", window_id)
        + hashlib.sha256(enc_blob).digest()
        + hashlib.sha256(plain_blob).digest()
    )


@dataclass(frozen=True)
class OrderingCommitment:
    window_id: int
    comm: bytes
    published_at: int
    signature: bytes = b""
    sequencer_pk: bytes = b""


def commit_order(o_enc: Sequence[EncryptedTx], window_id: int = 0, published_at: int = 0, signer: "Sequencer | None" = None) -> OrderingCommitment:
    comm = ordering_hash(o_enc)
    if signer is None:
        return OrderingCommitment(window_id, comm, published_at)
    return OrderingCommitment(window_id, comm, published_at, signer.sign(_commit_message(window_id, comm)), signer.public_key)


class Sequencer:
    """Holds the sequencer's Ed25519 identity used to sign commitments and releases."""

    def __init__(self, seed: bytes):
        self._sk = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"regguard/sequencer/" + seed).digest())
        self.public_key = self._sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, message: bytes) -> bytes:
        return self._sk.sign(message)

    def commit(self, o_enc, window_id: int, published_at: int) -> OrderingCommitment:
        return commit_order(o_enc, window_id, published_at, self)

    def sign_release(self, window_id: int, o_enc, o_plain) -> bytes:
        enc_blob = encode_list(e.serialize() for e in o_enc)
        plain_blob = encode_list(t.serialize() for t in o_plain)
        return self.sign(_release_message(window_id, enc_blob, plain_blob))


@dataclass(frozen=True)
class Batch:
    window_id: int
    txs: tuple


@dataclass(frozen=True)
class SlashingEvidence:
    window_id: int
    comm: bytes
    comm_signature: bytes
    sequencer_pk: bytes
    observed_enc: bytes  # ordered-list encoding of the released EncryptedTx sequence
    observed_plain: bytes  # ordered-list encoding of the released plaintext sequence
    release_signature: bytes
    index: int  # first divergent position; -1 when only the hash mismatch is provable
    committed_enc: bytes = b""  # ordered-list encoding hashing to comm, when known

    def to_json(self) -> str:
        d = {
            "format": "regguard-slashing-evidence/1",
            "window_id": self.window_id,
            "comm": self.comm.hex(),
            "comm_signature": self.comm_signature.hex(),
            "sequencer_pk": self.sequencer_pk.hex(),
            "index": self.index,
            "observed_enc": self.observed_enc.hex(),
            "observed_plain": self.observed_plain.hex(),
            "release_signature": self.release_signature.hex(),
            "committed_enc": self.committed_enc.hex(),
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SlashingEvidence":
        d = json.loads(text)
        if d.get("format") != "regguard-slashing-evidence/1":
            raise ValueError("unknown evidence format")
        return cls(
            window_id=int(d["window_id"]),
            comm=bytes.fromhex(d["comm"]),
            comm_signature=bytes.fromhex(d["comm_signature"]),
            sequencer_pk=bytes.fromhex(d["sequencer_pk"]),
            observed_enc=bytes.fromhex(d["observed_enc"]),
            observed_plain=bytes.fromhex(d["observed_plain"]),
            release_signature=bytes.fromhex(d["release_signature"]),
            index=int(d["index"]),
            committed_enc=bytes.fromhex(d.get("committed_enc", "")),
        )


def _first_divergence(a: Sequence[bytes], b: Sequence[bytes]) -> int | None:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def _plain_mismatch(enc_items: Sequence[bytes], plain_items: Sequence[bytes]) -> int | None:
    for i, (e, p) in enumerate(zip(enc_items, plain_items)):
        if hashlib.sha256(p).digest() != deserialize_enc(e).link_hash:
            return i
    if len(enc_items) != len(plain_items):
        return min(len(enc_items), len(plain_items))
    return None


def verify_and_release(c: OrderingCommitment, o_enc: Sequence[EncryptedTx], o_plain: Sequence[Transaction], *, release_signature: bytes = b"", committed: Sequence[EncryptedTx] | None = None):
    """Release the batch iff it matches the commitment position by position.

    Returns a Batch, or SlashingEvidence naming the first divergent position.
    """
    enc_items = [e.serialize() for e in o_enc]
    plain_items = [t.serialize() for t in o_plain]
    enc_blob, plain_blob = encode_list(enc_items), encode_list(plain_items)
    committed_blob = b"" if committed is None else encode_list(e.serialize() for e in committed)

    def evidence(index: int) -> SlashingEvidence:
        return SlashingEvidence(c.window_id, c.comm, c.signature, c.sequencer_pk, enc_blob, plain_blob, release_signature, index, committed_blob)

    if hashlib.sha256(enc_blob).digest() != c.comm:
        if committed is not None and hashlib.sha256(committed_blob).digest() == c.comm:
            idx = _first_divergence([e.serialize() for e in committed], enc_items)
            return evidence(-1 if idx is None else idx)
        return evidence(-1)
    idx = _plain_mismatch(enc_items, plain_items)
    if idx is not None:
        return evidence(idx)
    return Batch(c.window_id, tuple(o_plain))


def _verify_sig(pk: bytes, sig: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pk).verify(sig, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify_evidence(ev: SlashingEvidence) -> bool:
    """Offline check that the evidence proves a deviation from a signed commitment."""
    if not _verify_sig(ev.sequencer_pk, ev.comm_signature, _commit_message(ev.window_id, ev.comm)):
        return False
    if not _verify_sig(ev.sequencer_pk, ev.release_signature, _release_message(ev.window_id, ev.observed_enc, ev.observed_plain)):
        return False
    try:
        enc_items = decode_list(ev.observed_enc)
        plain_items = decode_list(ev.observed_plain)
        if hashlib.sha256(ev.observed_enc).digest() != ev.comm:
            if ev.committed_enc and hashlib.sha256(ev.committed_enc).digest() == ev.comm:
                idx = _first_divergence(decode_list(ev.committed_enc), enc_items)
                return ev.index == (-1 if idx is None else idx)
            return ev.index == -1
        idx = _plain_mismatch(enc_items, plain_items)
    except ValueError:
        return False
    return idx is not None and idx == ev.index


# ---------------------------------------------------------------------------
# fairness measurement


@dataclass(frozen=True)
class FairnessResult:
    violations: int
    qualifying_pairs: int

    @property
    def beta_hat(self) -> float:
        return self.violations / self.qualifying_pairs if self.qualifying_pairs else 0.0


class _Fenwick:
    def __init__(self, n: int):
        self.n = n
        self.tree = [0] * (n + 1)

    def add(self, i: int) -> None:
        i += 1
        while i <= self.n:
            self.tree[i] += 1
            i += i & -i

    def prefix(self, i: int) -> int:
        """Count of inserted indices < i."""
        s = 0
        while i > 0:
            s += self.tree[i]
            i -= i & -i
        return s


def measure_fairness(arrivals: Sequence[int], positions: Sequence[int], alpha: int) -> FairnessResult:
    """Count pairs with arrival_i < arrival_j - alpha whose final order is inverted.

    `positions` are final ranks (any totally ordered ints, e.g. global
    execution index).  Runs in O(N log N).
    """
    n = len(arrivals)
    if n != len(positions):
        raise ValueError("arrivals and positions differ in length")
    order = sorted(range(n), key=lambda k: arrivals[k])
    a_sorted = [arrivals[k] for k in order]
    ranks = {p: r for r, p in enumerate(sorted(set(positions)))}
    fw = _Fenwick(len(ranks))
    inserted = 0
    violations = 0
    qualifying = 0
    for k in order:
        limit = arrivals[k] - alpha
        frontier = bisect.bisect_left(a_sorted, limit)
        while inserted < frontier:
            fw.add(ranks[positions[order[inserted]]])
            inserted += 1
        qualifying += inserted
        # earlier arrivals placed after k
        violations += inserted - fw.prefix(ranks[positions[k]] + 1)
    return FairnessResult(violations, qualifying)


# ---------------------------------------------------------------------------
# window state machine


class Phase(Enum):
    SETUP = 0
    COLLECT = 1
    COMMITTED = 2
    DECRYPTED = 3
    DONE = 4


class WindowError(Exception):
    pass


@dataclass
class OrderingWindow:
    """One window's progression: setup -> collect -> commit -> decrypt -> verify."""

    window_id: int
    keys: WindowKeys
    start: int
    end: int
    phase: Phase = Phase.COLLECT
    pending: list = field(default_factory=list)
    o_enc: list = field(default_factory=list)
    commitment: OrderingCommitment | None = None
    plaintexts: list = field(default_factory=list)

    def submit(self, e: EncryptedTx) -> None:
        if self.phase is not Phase.COLLECT:
            raise WindowError(f"window {self.window_id} is not collecting")
        if not self.start <= e.arrival_ts < self.end:
            raise WindowError("arrival outside the half-open window")
        self.pending.append(e)

    def commit(self, sequencer: Sequencer, published_at: int, reorder=None) -> OrderingCommitment:
        if self.phase is not Phase.COLLECT:
            raise WindowError("commit out of order")
        self.o_enc = order_window(self.pending)
        if reorder is not None:
            self.o_enc = list(reorder(self.o_enc))
        self.commitment = sequencer.commit(self.o_enc, self.window_id, published_at)
        self.phase = Phase.COMMITTED
        return self.commitment

    def decrypt(self, responders: Sequence[int]) -> list[Transaction]:
        if self.phase is not Phase.COMMITTED:
            raise WindowError("decrypt before commit")
        members = sorted(responders)[: self.keys.t]
        if len(members) < self.keys.t:
            raise ThresholdUnmet(f"{len(members)} responders, need {self.keys.t}")
        lam = lagrange_at_zero(members, self.keys.group.q)
        out = []
        for e in self.o_enc:
            partials = {i: member_partial(self.keys, i, e) for i in members}
            out.append(threshold_decrypt(partials, e, self.keys, lam))
        self.plaintexts = out
        self.phase = Phase.DECRYPTED
        return out

    def finish(self) -> None:
        if self.phase is not Phase.DECRYPTED:
            raise WindowError("verify before decrypt")
        self.phase = Phase.DONE


def group_by_name(name: str) -> Group:
    return GROUPS[name]
