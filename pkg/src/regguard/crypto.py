"""Shamir sharing over prime fields, threshold hashed-ElGamal, and the AEAD layer.

Groups are quadratic-residue subgroups of safe primes p = 2q + 1, so the
exponent field Z_q is prime and Lagrange interpolation works there.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305


class ThresholdUnmet(Exception):
    pass


class AuthFailure(Exception):
    pass


@dataclass(frozen=True)
class Group:
    name: str
    p: int
    q: int
    g: int = 4  # 2**2 is a quadratic residue, hence of order q

    @property
    def element_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def encode(self, x: int) -> bytes:
        return x.to_bytes(self.element_len, "big")

    def decode(self, raw: bytes) -> int:
        x = int.from_bytes(raw, "big")
        if not 1 <= x < self.p or pow(x, self.q, self.p) != 1:
            raise ValueError("not a subgroup element")
        return x


SIM64 = Group("sim64", p=0x17953A6F2A5CD7DAF, q=0xBCA9D37952E6BED7)
SIM256 = Group(
    "sim256",
    p=0x10C0C7409125F2057A47E104825165E6618B8FFA14D4748A0CA264E1C4D3C1F1F,
    q=0x86063A04892F902BD23F0824128B2F330C5C7FD0A6A3A4506513270E269E0F8F,
)
GROUPS = {g.name: g for g in (SIM64, SIM256)}


def group_for(security_bits: int) -> Group:
    return SIM64 if security_bits <= 64 else SIM256


# ---------------------------------------------------------------------------
# Shamir


def poly_eval(coeffs, x: int, q: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % q
    return acc


def split_secret(secret: int, t: int, n: int, q: int, rng) -> dict[int, int]:
    """t-of-n shares of `secret` at x = 1..n over Z_q."""
    if not 1 <= t <= n:
        raise ValueError("need 1 <= t <= n")
    if n >= q:
        raise ValueError("field too small for n shares")
    coeffs = [secret % q] + [rng.randrange(q) for _ in range(t - 1)]
    return {i: poly_eval(coeffs, i, q) for i in range(1, n + 1)}


def lagrange_at_zero(xs, q: int) -> dict[int, int]:
    xs = list(xs)
    out = {}
    for i in xs:
        num, den = 1, 1
        for j in xs:
            if j != i:
                num = num * j % q
                den = den * (j - i) % q
        out[i] = num * pow(den, -1, q) % q
    return out


def reconstruct(shares: Mapping[int, int], t: int, q: int) -> int:
    if len(shares) < t:
        raise ThresholdUnmet(f"{len(shares)} shares, need {t}")
    chosen = dict(sorted(shares.items())[:t])
    lam = lagrange_at_zero(chosen, q)
    return sum(lam[i] * y for i, y in chosen.items()) % q


# ---------------------------------------------------------------------------
# threshold hashed ElGamal (KEM wrapping a 32-byte symmetric key)


def _kdf(group: Group, c1: int, shared: int) -> bytes:
    return hashlib.sha256(b"regguard/kem/" + group.encode(c1) + group.encode(shared)).digest()


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def wrap_key(group: Group, pk: int, key: bytes, rng) -> tuple[int, bytes]:
    r = 1 + rng.randrange(group.q - 1)
    c1 = pow(group.g, r, group.p)
    shared = pow(pk, r, group.p)
    return c1, _xor(key, _kdf(group, c1, shared))


def partial_decrypt(group: Group, c1: int, share: int) -> int:
    return pow(c1, share, group.p)


def combine_partials(group: Group, c1: int, c2: bytes, partials: Mapping[int, int], t: int, lagrange: Mapping[int, int] | None = None) -> bytes:
    """Recover the wrapped key from >= t partial decryptions c1^{s_i}."""
    if len(partials) < t:
        raise ThresholdUnmet(f"{len(partials)} partial decryptions, need {t}")
    chosen = dict(sorted(partials.items())[:t])
    lam = lagrange or lagrange_at_zero(chosen, group.q)
    shared = 1
    for i, d in chosen.items():
        shared = shared * pow(d, lam[i], group.p) % group.p
    return _xor(c2, _kdf(group, c1, shared))


# ---------------------------------------------------------------------------
# AEAD

NONCE_LEN = 12
AD = b"regguard/tx/v1"


def seal(key: bytes, plaintext: bytes, rng) -> bytes:
    nonce = rng.randbytes(NONCE_LEN)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, AD)


def open_sealed(key: bytes, sealed: bytes) -> bytes:
    if len(sealed) < NONCE_LEN + 16:
        raise AuthFailure("ciphertext too short")
    try:
        return ChaCha20Poly1305(key).decrypt(sealed[:NONCE_LEN], sealed[NONCE_LEN:], AD)
    except InvalidTag:
        raise AuthFailure("authentication tag mismatch") from None
