import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regguard.regspec import (
    And,
    ArithmeticOverflow,
    Cmp,
    Const,
    EvalStats,
    LinearityError,
    LinTerm,
    Not,
    Or,
    Param,
    ParseError,
    SchemaError,
    StateLookup,
    Sum,
    eval_predicate,
    format_expr,
    format_rules,
    function_selector,
    lint_rules,
    parse_rules,
    rule_complexity,
)

SIG = "transfer(address to, uint256 amount)"
ALICE = b"\xaa" * 20
BOB = b"\xbb" * 20


def one(body: str):
    return parse_rules(f"rule r on {SIG}: {body}\n").rules[0]


def test_erc20_transfer_selector_matches_known_value():
    # 0xa9059cbb is the ubiquitous ERC-20 transfer selector
    assert function_selector("transfer(address,uint256)").hex() == "a9059cbb"


def test_rule_fields_and_description_from_comments():
    rs = parse_rules("# only eligible\n# investors\nrule wl on transfer(address to, uint256 amount):\n    Whitelist[to] == 1\n")
    r = rs.rules[0]
    assert r.id == "wl"
    assert r.description == "only eligible\ninvestors"
    assert r.target_selector == bytes.fromhex("a9059cbb")
    assert r.expr == Cmp("==", StateLookup("Whitelist", Param("to")), Const(1))
    assert r.complexity == 4
    assert rs.index[r.target_selector] == ("wl",)


def test_blank_line_detaches_comment():
    rs = parse_rules("# header\n\nrule a on transfer(address to, uint256 amount): amount > 0\n")
    assert rs.rules[0].description == ""


@pytest.mark.parametrize("alias,op", [("=", "=="), ("≤", "<="), ("≥", ">="), ("≠", "!=")])
def test_operator_aliases(alias, op):
    assert one(f"amount {alias} 5").expr.op == op


def test_precedence_and_binds_tighter_than_or():
    e = one("amount < 1 || amount > 2 && amount != 7").expr
    assert isinstance(e, Or) and isinstance(e.right, And)


def test_subtraction_and_scaling_are_linear_terms():
    e = one("balance[to] - 2 * amount >= -5").expr
    assert e.lhs == Sum((StateLookup("balance", Param("to")), LinTerm(-1, LinTerm(2, Param("amount")))))
    assert e.rhs == Const(-5)


def test_nonlinear_product_rejected_with_position():
    with pytest.raises(LinearityError) as ei:
        parse_rules(f"rule r on {SIG}:\n    amount * balance[to] <= 10\n")
    assert (ei.value.line, ei.value.col) == (2, 12)


@pytest.mark.parametrize(
    "text,exc",
    [
        (f"rule r on {SIG}: Unknown[to] == 1", SchemaError),
        (f"rule r on {SIG}: to <= 5", SchemaError),
        (f"rule r on {SIG}: amount + 1", SchemaError),
        (f"rule r on {SIG}: Whitelist[amount] == 1", SchemaError),
        (f"rule r on {SIG}: ghost == 1", SchemaError),
        (f"rule r on {SIG}: amount < 1 < 2", ParseError),
        (f"rule r on {SIG}: (amount < 1", ParseError),
        ("rule r transfer(address to): to == to", ParseError),
        ("  indented", ParseError),
        (f"rule r on {SIG}: amount > 0\nrule r on {SIG}: amount > 1", SchemaError),
        ("map M[float]", SchemaError),
    ],
)
def test_static_errors(text, exc):
    with pytest.raises(exc) as ei:
        parse_rules(text)
    assert ei.value.line >= 1 and ei.value.col >= 1


def test_map_declaration_extends_schema():
    rs = parse_rules("map Tier[int]\nrule r on swap(uint256 pool, uint256 amountIn, uint256 minOut): Tier[pool] <= 3\n")
    assert rs.schema["Tier"].key_type == "int"
    assert "map Tier[int]" in format_rules(rs)


def test_lint_reports_complexity_counts_and_errors():
    rs, diags = lint_rules(f"# ok\nrule a on {SIG}: amount > 0\nrule b on {SIG}: amount * amount > 0\n")
    assert rs is None
    text = [str(d) for d in diags]
    assert any(t.startswith("error:3:") and "LinearityError" in t for t in text)
    assert any("rule a L=3" in t for t in text)
    rs, diags = lint_rules("")
    assert rs is not None and len(rs) == 0 and diags == []


def test_lint_warns_on_missing_description():
    _, diags = lint_rules(f"rule a on {SIG}: amount > 0\n")
    assert any(d.severity == "warning" for d in diags)


def test_evaluation_reads_zero_for_missing_keys_and_from_param():
    r = one("Volume24h[from] + amount <= 50000")
    assert eval_predicate(r.expr, {"from": ALICE, "amount": 50000}, {})
    assert not eval_predicate(r.expr, {"from": ALICE, "amount": 10}, {"Volume24h": {ALICE: 49995}})


def test_short_circuit_counts_visits():
    r = one("amount <= 10000 || EDD[from] == 1")
    s = EvalStats()
    assert eval_predicate(r.expr, {"from": ALICE, "amount": 5}, {}, s)
    assert s.visits == 4  # Or, Cmp, amount, 10000
    s = EvalStats()
    assert not eval_predicate(r.expr, {"from": ALICE, "amount": 50_000}, {}, s)
    assert s.visits == rule_complexity(r.expr)


def test_int64_overflow_raises():
    r = one("amount + 9223372036854775807 > 0")
    with pytest.raises(ArithmeticOverflow):
        eval_predicate(r.expr, {"amount": 1, "from": ALICE}, {})


def test_address_literals():
    r = one("to != 0x" + BOB.hex())
    assert eval_predicate(r.expr, {"to": ALICE, "amount": 0, "from": ALICE}, {})
    assert not eval_predicate(r.expr, {"to": BOB, "amount": 0, "from": ALICE}, {})


# ---------------------------------------------------------------------------
# properties over generated well-typed expressions

ints = st.integers(-10**6, 10**6)
leaf_int = st.one_of(
    ints.map(Const),
    st.just(Param("amount")),
    st.sampled_from(["balance", "Volume24h", "EDD"]).map(lambda m: StateLookup(m, Param("to"))),
)


def _int_expr(children):
    return st.one_of(
        st.tuples(st.integers(-50, 50).filter(lambda c: c not in (0,)), children).map(lambda t: LinTerm(*t)),
        st.lists(children, min_size=2, max_size=4).map(lambda ts: Sum(tuple(ts))),
    )


int_expr = st.recursive(leaf_int, _int_expr, max_leaves=6)
cmp_expr = st.builds(Cmp, st.sampled_from(["<", "<=", "==", ">=", ">", "!="]), int_expr, int_expr)
bool_expr = st.recursive(
    cmp_expr,
    lambda c: st.one_of(st.builds(And, c, c), st.builds(Or, c, c), st.builds(Not, c)),
    max_leaves=6,
)


@settings(max_examples=300, deadline=None)
@given(bool_expr)
def test_format_parse_round_trip(e):
    assert one(format_expr(e)).expr == e


state_st = st.fixed_dictionaries(
    {m: st.dictionaries(st.sampled_from([ALICE, BOB]), st.integers(-1000, 1000), max_size=2) for m in ("balance", "Volume24h", "EDD")}
)


@settings(max_examples=300, deadline=None)
@given(bool_expr, st.integers(-1000, 1000), st.sampled_from([ALICE, BOB]), state_st)
def test_evaluation_terminates_deterministically_within_size(e, amount, to, state):
    params = {"amount": amount, "to": to, "from": ALICE}
    s1, s2 = EvalStats(), EvalStats()
    r1 = eval_predicate(e, params, state, s1)
    r2 = eval_predicate(e, params, state, s2)
    assert r1 == r2 and s1.visits == s2.visits
    assert 1 <= s1.visits <= rule_complexity(e)
