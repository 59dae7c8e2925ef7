import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regguard.chain import (
    BRIDGE_MINT,
    KYC_REGISTRY,
    ORACLE,
    PRICE_UNIT,
    REDEEM,
    SWAP,
    TRANSFER,
    Keyring,
    L1State,
    L2State,
    Revert,
    Scratch,
    address_key,
    advance_l1,
    apply_l2,
    deserialize_tx,
    execute,
    make_address,
    make_tx,
    price_key,
    settle_l1,
    settlement_conflicts,
    syn_legit,
    with_sig,
)

KR = Keyring(b"test")
A, B = make_address("a"), make_address("b")


def no_l1(addr, key):
    raise AssertionError("unexpected L1 read")


def test_transfer_moves_funds_and_tracks_rolling_volume():
    s = L2State.from_maps({"balance": {A: 100}})
    tx = make_tx(KR, A, TRANSFER, {"to": B, "amount": 30}, nonce=0, arrival_ts=10)
    s2, dep = apply_l2(tx, s, no_l1)
    assert (s2.lookup("balance", A), s2.lookup("balance", B)) == (70, 30)
    assert s2.lookup("Volume24h", A) == 30 and dep.required == ()
    tx2 = make_tx(KR, A, TRANSFER, {"to": B, "amount": 5}, nonce=1, arrival_ts=10 + 24 * 3600 * 1_000_000)
    s3, _ = apply_l2(tx2, s2, no_l1)
    assert s3.lookup("Volume24h", A) == 5  # the first transfer aged out
    assert s.lookup("balance", A) == 100  # states are immutable


def test_insufficient_funds_reverts_without_side_effects():
    scratch = Scratch(L2State.from_maps({"balance": {A: 10}}))
    with pytest.raises(Revert) as ei:
        execute(make_tx(KR, A, TRANSFER, {"to": B, "amount": 11}, nonce=0, arrival_ts=1), scratch, no_l1)
    assert ei.value.reason == "insufficient-funds"
    assert scratch.writes == {} and scratch.next_nonce(A) == 0


def test_replayed_nonce_reverts():
    s = L2State.from_maps({"balance": {A: 10}}, {A: 3})
    with pytest.raises(Revert, match="nonce"):
        apply_l2(make_tx(KR, A, TRANSFER, {"to": B, "amount": 1}, nonce=2, arrival_ts=1), s, no_l1)


def test_overflow_reverts():
    s = L2State.from_maps({"balance": {A: 10, B: 2**63 - 5}})
    with pytest.raises(Revert, match="overflow"):
        apply_l2(make_tx(KR, A, TRANSFER, {"to": B, "amount": 10}, nonce=0, arrival_ts=1), s, no_l1)


def test_bridge_mint_records_oracle_dependency_and_settles_only_on_match():
    slot = (ORACLE, price_key(2))
    l1 = L1State({slot: 2500})
    tx = make_tx(KR, A, BRIDGE_MINT, {"to": A, "amount": 4, "feed": 2}, nonce=0, arrival_ts=1)
    s2, dep = apply_l2(tx, L2State(), l1.get)
    assert s2.lookup("balance", A) == 4 * 2500 // PRICE_UNIT
    assert dep.required == ((ORACLE, price_key(2), 2500),)
    assert settle_l1(tx, dep, l1)
    moved = advance_l1(l1, [(ORACLE, price_key(2), 2501)])
    assert not settle_l1(tx, dep, moved)
    assert settlement_conflicts(dep, moved) == [(ORACLE, price_key(2), 2500, 2501)]


def test_redeem_requires_kyc_on_l1():
    l1 = L1State({(ORACLE, price_key(0)): 1000})
    s = L2State.from_maps({"balance": {A: 50}})
    tx = make_tx(KR, A, REDEEM, {"amount": 5, "feed": 0}, nonce=0, arrival_ts=1)
    with pytest.raises(Revert):
        apply_l2(tx, s, l1.get)
    l1 = advance_l1(l1, [(KYC_REGISTRY, address_key(A), 1)])
    s2, dep = apply_l2(tx, s, l1.get)
    assert s2.lookup("balance", A) == 45 and len(dep.required) == 2


def test_swap_constant_product():
    s = L2State.from_maps({"balance": {A: 1000}, "poolX": {0: 1000}, "poolY": {0: 1000}})
    s2, _ = apply_l2(make_tx(KR, A, SWAP, {"pool": 0, "amountIn": 100, "minOut": 1}, nonce=0, arrival_ts=1), s, no_l1)
    out = 1000 * 100 // 1100
    assert (s2.lookup("poolX", 0), s2.lookup("poolY", 0), s2.lookup("holdings", A)) == (1100, 1000 - out, out)
    with pytest.raises(Revert):
        apply_l2(make_tx(KR, A, SWAP, {"pool": 0, "amountIn": 100, "minOut": 10**6}, nonce=0, arrival_ts=1), s, no_l1)


def test_syn_legit_checks_signature_nonce_and_gas():
    s = L2State.from_maps({}, {A: 1})
    ok = make_tx(KR, A, TRANSFER, {"to": B, "amount": 1}, nonce=1, arrival_ts=1)
    assert syn_legit(ok, KR, s)
    assert not syn_legit(make_tx(KR, A, TRANSFER, {"to": B, "amount": 1}, nonce=0, arrival_ts=1), KR, s)
    assert not syn_legit(make_tx(KR, A, TRANSFER, {"to": B, "amount": 1}, nonce=1, arrival_ts=1, gas=0), KR, s)
    assert not syn_legit(with_sig(ok, bytes(32)), KR, s)
    assert not syn_legit(ok, Keyring(b"other"), s)


def test_l1_rejects_out_of_range_words():
    with pytest.raises(ValueError):
        advance_l1(L1State(), [(ORACLE, price_key(0), 2**256)])


addresses = st.binary(min_size=20, max_size=20)
param_values = st.one_of(st.integers(0, 2**64), addresses)


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from([TRANSFER, BRIDGE_MINT, REDEEM, SWAP]),
    st.dictionaries(st.text("abcdefgh", min_size=1, max_size=8), param_values, max_size=4),
    st.integers(0, 2**63),
    st.integers(1, 2**63),
    st.integers(1, 10**6),
    addresses,
)
def test_serialization_round_trip(selector, params, nonce, ts, gas, sender):
    tx = make_tx(KR, sender, selector, params, nonce=nonce, arrival_ts=ts, gas=gas)
    back = deserialize_tx(tx.serialize())
    assert back == tx and back.tx_hash == tx.tx_hash and KR.verify(back)


def test_deserialize_rejects_trailing_garbage():
    tx = make_tx(KR, A, TRANSFER, {"to": B, "amount": 1}, nonce=0, arrival_ts=1)
    with pytest.raises(ValueError):
        deserialize_tx(tx.serialize() + b"\x00")
