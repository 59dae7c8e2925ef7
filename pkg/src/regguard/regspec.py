"""RegSpec: a small decidable rule language for transaction compliance.

A rule file is line oriented::

    # Only whitelisted investors may receive fund tokens.
    rule whitelist on transfer(address to, uint256 amount): Whitelist[to] == 1

Statements start in column 1 with ``rule`` or ``map``; indented lines continue
the previous statement.  ``#`` starts a comment.  Comment lines directly above
a rule become its description.

Expressions are Boolean combinations (``&&``, ``||``, ``!``) of comparisons
between linear integer terms.  ``Name[key]`` reads a finite map on L2 state.
Multiplication is allowed only when one side is an integer literal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Sequence, Union

from Crypto.Hash import keccak

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

ADDRESS = "address"
INT = "int"
BOOL = "bool"

CMP_OPS = ("<", "<=", "==", ">=", ">", "!=")


# ---------------------------------------------------------------------------
# errors


class RuleError(Exception):
    """Static error in a rule file, carrying a 1-based source position."""

    severity = "error"

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col

    def diagnostic(self) -> str:
        return f"{self.severity}:{self.line}:{self.col}:{type(self).__name__}: {self.message}"


class ParseError(RuleError):
    pass


class SchemaError(RuleError):
    pass


class LinearityError(RuleError):
    pass


class EvalError(Exception):
    reason = "eval-error"


class ArithmeticOverflow(EvalError, OverflowError):
    reason = "overflow"


class MissingParam(EvalError, KeyError):
    reason = "missing-param"


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class AddrConst:
    value: bytes


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class StateLookup:
    map_name: str
    key: "Expr"


@dataclass(frozen=True)
class LinTerm:
    coeff: int
    expr: "Expr"


@dataclass(frozen=True)
class Sum:
    terms: tuple


@dataclass(frozen=True)
class Cmp:
    op: str
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Not:
    expr: "Expr"


Expr = Union[Const, AddrConst, Param, StateLookup, LinTerm, Sum, Cmp, And, Or, Not]


def children(e: Expr) -> tuple:
    if isinstance(e, (Const, AddrConst, Param)):
        return ()
    if isinstance(e, StateLookup):
        return (e.key,)
    if isinstance(e, LinTerm):
        return (e.expr,)
    if isinstance(e, Sum):
        return e.terms
    if isinstance(e, Cmp):
        return (e.lhs, e.rhs)
    if isinstance(e, (And, Or)):
        return (e.left, e.right)
    if isinstance(e, Not):
        return (e.expr,)
    raise TypeError(f"not a RegSpec node: {e!r}")


def iter_nodes(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def rule_complexity(e: Expr) -> int:
    """Node count of the expression tree (always >= 1)."""
    return sum(1 for _ in iter_nodes(e))


# ---------------------------------------------------------------------------
# schema, rules


@dataclass(frozen=True)
class MapDecl:
    name: str
    key_type: str
    default: int = 0


DEFAULT_SCHEMA: dict[str, MapDecl] = {
    d.name: d
    for d in (
        MapDecl("balance", ADDRESS),
        MapDecl("Whitelist", ADDRESS),
        MapDecl("Sanctions", ADDRESS),
        MapDecl("EDD", ADDRESS),
        MapDecl("Volume24h", ADDRESS),
    )
}

# Every rule may reference the transaction sender as `from`.
IMPLICIT_PARAMS = {"from": ADDRESS}


def function_selector(canonical_signature: str) -> bytes:
    """First four bytes of keccak-256 of ``name(type1,type2,...)``."""
    h = keccak.new(digest_bits=256)
    h.update(canonical_signature.encode())
    return h.digest()[:4]


@dataclass(frozen=True)
class Rule:
    id: str
    target_selector: bytes
    description: str
    expr: Expr
    signature: str = ""
    params: tuple = ()  # ((name, "address"|"int"), ...)

    @property
    def complexity(self) -> int:
        return rule_complexity(self.expr)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple = ()
    schema: Mapping[str, MapDecl] = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    index: Mapping[bytes, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index and self.rules:
            idx: dict[bytes, list] = {}
            for r in self.rules:
                idx.setdefault(r.target_selector, []).append(r.id)
            object.__setattr__(self, "index", {k: tuple(v) for k, v in idx.items()})
        object.__setattr__(self, "_by_id", {r.id: r for r in self.rules})

    def __len__(self) -> int:
        return len(self.rules)

    def get(self, rule_id: str) -> Rule:
        return self._by_id[rule_id]

    def extended(self, rule: Rule) -> "RuleSet":
        if rule.id in self._by_id:
            raise SchemaError(f"duplicate rule id {rule.id!r}")
        return RuleSet(self.rules + (rule,), self.schema)


def applicable_rules(rs: RuleSet, selector: bytes) -> list[Rule]:
    return [rs.get(rid) for rid in rs.index.get(bytes(selector), ())]


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<hex>0[xX][0-9a-fA-F]+)
  | (?P<int>[0-9][0-9_]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||==|!=|<=|>=|≤|≥|≠|[<>=!+\-*(),:\[\]])
  | (?P<bad>.)
    """,
    re.VERBOSE,
)

_OP_ALIASES = {"=": "==", "≤": "<=", "≥": ">=", "≠": "!="}


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize_statement(text: str, line: int, col: int) -> list[Token]:
    toks: list[Token] = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        t = m.group()
        if kind == "nl":
            line += 1
            col = 1
            continue
        if kind == "bad":
            raise ParseError(f"unexpected character {t!r}", line, col)
        if kind not in ("ws", "comment"):
            toks.append(Token(kind, t, line, col))
        col += len(t)
    toks.append(Token("eof", "", line, col))
    return toks


@dataclass
class _Statement:
    text: str
    line: int
    comments: list


def _split_statements(text: str) -> Iterator[_Statement]:
    pending_comments: list[str] = []
    current: _Statement | None = None
    for lineno, raw in enumerate(text.split("\n"), start=1):
        stripped = raw.strip()
        if raw[:1].isspace() or (current is not None and not stripped):
            if current is not None:
                current.text += "\n" + raw
                continue
            if not stripped or stripped.startswith("#"):
                continue
            raise ParseError("indented line outside of a statement", lineno, 1)
        if not stripped:
            pending_comments = []
            continue
        if stripped.startswith("#"):
            if current is not None:
                yield current
                current = None
            pending_comments.append(stripped.lstrip("#").strip())
            continue
        if current is not None:
            yield current
        current = _Statement(raw, lineno, pending_comments)
        pending_comments = []
    if current is not None:
        yield current


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def op(self) -> str | None:
        t = self.tok
        if t.kind != "op":
            return None
        return _OP_ALIASES.get(t.text, t.text)

    def expect_op(self, text: str) -> Token:
        if self.op() != text:
            self.error(f"expected {text!r}")
        return self.advance()

    def expect_ident(self, what: str = "identifier") -> Token:
        if self.tok.kind != "ident":
            self.error(f"expected {what}")
        return self.advance()

    def error(self, message: str):
        t = self.tok
        found = "end of statement" if t.kind == "eof" else repr(t.text)
        raise ParseError(f"{message}, found {found}", t.line, t.col)

    # expression grammar, lowest precedence first
    def parse_or(self):
        left = self.parse_and()
        while self.op() == "||":
            self.advance()
            left = Or(left, self.parse_and())
        return left

    def parse_and(self):
        left = self.parse_not()
        while self.op() == "&&":
            self.advance()
            left = And(left, self.parse_not())
        return left

    def parse_not(self):
        if self.op() == "!":
            self.advance()
            return Not(self.parse_not())
        return self.parse_cmp()

    def parse_cmp(self):
        left = self.parse_sum()
        op = self.op()
        if op in CMP_OPS:
            self.advance()
            right = self.parse_sum()
            if self.op() in CMP_OPS:
                self.error("comparisons do not chain")
            return Cmp(op, left, right)
        return left

    def parse_sum(self):
        terms = [self.parse_product()]
        while self.op() in ("+", "-"):
            sign = self.advance().text
            t = self.parse_product()
            if sign == "-":
                t = Const(-t.value) if isinstance(t, Const) else LinTerm(-1, t)
            terms.append(t)
        return terms[0] if len(terms) == 1 else Sum(tuple(terms))

    def parse_product(self):
        left = self.parse_unary()
        while self.op() == "*":
            star = self.advance()
            right = self.parse_unary()
            if isinstance(left, Const):
                left = LinTerm(left.value, right)
            elif isinstance(right, Const):
                left = LinTerm(right.value, left)
            else:
                raise LinearityError(
                    "product of two non-constant terms is outside the linear fragment",
                    star.line,
                    star.col,
                )
        return left

    def parse_unary(self):
        if self.op() == "-":
            self.advance()
            inner = self.parse_unary()
            if isinstance(inner, Const):
                return Const(-inner.value)
            return LinTerm(-1, inner)
        return self.parse_primary()

    def parse_primary(self):
        t = self.tok
        if t.kind == "int":
            self.advance()
            return Const(int(t.text.replace("_", "")))
        if t.kind == "hex":
            self.advance()
            digits = t.text[2:]
            if len(digits) == 40:
                return AddrConst(bytes.fromhex(digits))
            return Const(int(digits, 16))
        if t.kind == "ident":
            self.advance()
            if self.op() == "[":
                self.advance()
                key = self.parse_sum()
                self.expect_op("]")
                node = StateLookup(t.text, key)
            else:
                node = Param(t.text)
            self._positions[id(node)] = (t.line, t.col)
            return node
        if self.op() == "(":
            self.advance()
            inner = self.parse_or()
            self.expect_op(")")
            return inner
        self.error("expected an expression")

    _positions: dict = {}


_TYPE_RE = re.compile(r"^(address|bool|u?int(8|16|32|64|128|256)?|bytes32)$")


def _param_type(solidity_type: str) -> str:
    return ADDRESS if solidity_type == "address" else INT


def _parse_signature(p: _Parser) -> tuple[str, str, tuple]:
    name = p.expect_ident("function name").text
    p.expect_op("(")
    params: list[tuple[str, str, str]] = []
    if p.op() != ")":
        while True:
            ty = p.expect_ident("parameter type")
            if not _TYPE_RE.match(ty.text):
                raise ParseError(f"unsupported parameter type {ty.text!r}", ty.line, ty.col)
            pname = p.expect_ident("parameter name")
            if pname.text in IMPLICIT_PARAMS or any(pname.text == q[1] for q in params):
                raise SchemaError(f"duplicate parameter {pname.text!r}", pname.line, pname.col)
            params.append((ty.text, pname.text, _param_type(ty.text)))
            if p.op() == ",":
                p.advance()
                continue
            break
    p.expect_op(")")
    canonical = f"{name}({','.join(q[0] for q in params)})"
    pretty = f"{name}({', '.join(f'{q[0]} {q[1]}' for q in params)})"
    return canonical, pretty, tuple((q[1], q[2]) for q in params)


def _check_types(expr: Expr, params: Mapping[str, str], schema: Mapping[str, MapDecl], positions=None) -> str:
    """Return the static type of `expr`, raising SchemaError on mismatches."""
    positions = positions or {}

    def where(node):
        return positions.get(id(node), (0, 0))

    def ty(node) -> str:
        if isinstance(node, Const):
            if not INT64_MIN <= node.value <= INT64_MAX:
                raise SchemaError(f"literal {node.value} does not fit in 64 bits", *where(node))
            return INT
        if isinstance(node, AddrConst):
            if len(node.value) != 20:
                raise SchemaError("address literals are 20 bytes", *where(node))
            return ADDRESS
        if isinstance(node, Param):
            if node.name not in params:
                raise SchemaError(f"unknown parameter {node.name!r}", *where(node))
            return params[node.name]
        if isinstance(node, StateLookup):
            decl = schema.get(node.map_name)
            if decl is None:
                raise SchemaError(f"unknown state map {node.map_name!r}", *where(node))
            kt = ty(node.key)
            if kt != decl.key_type:
                raise SchemaError(
                    f"map {node.map_name!r} is keyed by {decl.key_type}, got {kt}", *where(node)
                )
            return INT
        if isinstance(node, LinTerm):
            if not isinstance(node.coeff, int):
                raise LinearityError("coefficients must be integer constants", *where(node))
            if ty(node.expr) != INT:
                raise SchemaError("arithmetic on a non-integer operand", *where(node.expr))
            return INT
        if isinstance(node, Sum):
            if len(node.terms) < 1:
                raise SchemaError("empty sum", *where(node))
            for t in node.terms:
                if ty(t) != INT:
                    raise SchemaError("arithmetic on a non-integer operand", *where(t))
            return INT
        if isinstance(node, Cmp):
            if node.op not in CMP_OPS:
                raise SchemaError(f"unknown comparison {node.op!r}", *where(node))
            lt, rt = ty(node.lhs), ty(node.rhs)
            if lt == BOOL or rt == BOOL:
                raise SchemaError("comparison operands must be terms, not conditions", *where(node.lhs))
            if lt != rt:
                raise SchemaError(f"cannot compare {lt} with {rt}", *where(node.lhs))
            if lt == ADDRESS and node.op not in ("==", "!="):
                raise SchemaError("addresses support only == and !=", *where(node.lhs))
            return BOOL
        if isinstance(node, (And, Or)):
            for side in (node.left, node.right):
                if ty(side) != BOOL:
                    raise SchemaError("connectives need conditions on both sides", *where(side))
            return BOOL
        if isinstance(node, Not):
            if ty(node.expr) != BOOL:
                raise SchemaError("'!' applies to a condition", *where(node.expr))
            return BOOL
        raise SchemaError(f"not a RegSpec node: {node!r}")

    return ty(expr)


def check_rule(rule: Rule, schema: Mapping[str, MapDecl] = DEFAULT_SCHEMA) -> None:
    """Static checks for a programmatically built rule."""
    params = dict(IMPLICIT_PARAMS)
    params.update(dict(rule.params))
    if _check_types(rule.expr, params, schema) != BOOL:
        raise SchemaError(f"rule {rule.id!r} is not a condition")


def _parse_statement(stmt: _Statement, schema: dict[str, MapDecl]) -> Rule | None:
    toks = _tokenize_statement(stmt.text, stmt.line, 1)
    p = _Parser(toks)
    p._positions = {}
    kw = p.expect_ident("'rule' or 'map'")
    if kw.text == "map":
        name = p.expect_ident("map name")
        p.expect_op("[")
        kt = p.expect_ident("key type")
        if kt.text not in (ADDRESS, INT):
            raise SchemaError("map keys are 'address' or 'int'", kt.line, kt.col)
        p.expect_op("]")
        if p.tok.kind != "eof":
            p.error("unexpected trailing input")
        if name.text in schema and schema[name.text].key_type != kt.text:
            raise SchemaError(f"map {name.text!r} redeclared with a different key type", name.line, name.col)
        schema[name.text] = MapDecl(name.text, kt.text)
        return None
    if kw.text != "rule":
        raise ParseError(f"expected 'rule' or 'map', found {kw.text!r}", kw.line, kw.col)
    rid = p.expect_ident("rule id")
    on = p.expect_ident("'on'")
    if on.text != "on":
        raise ParseError(f"expected 'on', found {on.text!r}", on.line, on.col)
    canonical, pretty, params = _parse_signature(p)
    p.expect_op(":")
    expr = p.parse_or()
    if p.tok.kind != "eof":
        p.error("unexpected trailing input")
    scope = dict(IMPLICIT_PARAMS)
    scope.update(dict(params))
    if _check_types(expr, scope, schema, p._positions) != BOOL:
        raise SchemaError("rule body must be a condition", stmt.line, 1)
    rule = Rule(
        id=rid.text,
        target_selector=function_selector(canonical),
        description="\n".join(stmt.comments),
        expr=expr,
        signature=pretty,
        params=params,
    )
    rule_pos = (rid.line, rid.col)
    return rule, rule_pos


def _parse(text: str, schema=None, collect: bool = False):
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    rules: list[Rule] = []
    positions: dict[str, tuple[int, int]] = {}
    errors: list[RuleError] = []
    try:
        statements = list(_split_statements(text))
    except RuleError as exc:
        if not collect:
            raise
        return None, [exc], positions
    for stmt in statements:
        try:
            out = _parse_statement(stmt, schema)
            if out is None:
                continue
            rule, pos = out
            if rule.id in positions:
                raise SchemaError(f"duplicate rule id {rule.id!r}", *pos)
            rules.append(rule)
            positions[rule.id] = pos
        except RuleError as exc:
            if not collect:
                raise
            errors.append(exc)
    rs = RuleSet(tuple(rules), schema)
    return rs, errors, positions


def parse_rules(text: str, schema: Mapping[str, MapDecl] | None = None) -> RuleSet:
    """Parse rule-file source into a RuleSet; raises the first RuleError."""
    rs, _, _ = _parse(text, schema)
    return rs


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.severity}:{self.line}:{self.col}:{self.message}"


def lint_rules(text: str, schema=None) -> tuple[RuleSet | None, list[Diagnostic]]:
    """Parse every statement, collecting all errors plus per-rule statistics."""
    rs, errors, positions = _parse(text, schema, collect=True)
    diags = [Diagnostic("error", e.line, e.col, f"{type(e).__name__}: {e.message}") for e in errors]
    if rs is None:
        return None, diags
    for r in rs.rules:
        line, col = positions[r.id]
        diags.append(Diagnostic("info", line, col, f"rule {r.id} L={r.complexity} selector=0x{r.target_selector.hex()}"))
        if not r.description:
            diags.append(Diagnostic("warning", line, col, f"rule {r.id} has no description comment"))
    for sel, ids in rs.index.items():
        sig = rs.get(ids[0]).signature
        diags.append(Diagnostic("info", 0, 0, f"selector 0x{sel.hex()} {sig} |R_f|={len(ids)}"))
    return (None if errors else rs), diags


# ---------------------------------------------------------------------------
# printer

_PREC = {Or: 1, And: 2, Not: 3, Cmp: 4, Sum: 5, LinTerm: 6}


def _prec(e) -> int:
    return _PREC.get(type(e), 7)


def format_expr(e: Expr) -> str:
    def wrap(child, min_prec, strict=False):
        s = format_expr(child)
        p = _prec(child)
        if p < min_prec or (strict and p == min_prec):
            return f"({s})"
        return s

    if isinstance(e, Const):
        return str(e.value)
    if isinstance(e, AddrConst):
        return "0x" + e.value.hex()
    if isinstance(e, Param):
        return e.name
    if isinstance(e, StateLookup):
        return f"{e.map_name}[{format_expr(e.key)}]"
    if isinstance(e, LinTerm):
        return f"{e.coeff} * {wrap(e.expr, 7)}"
    if isinstance(e, Sum):
        if len(e.terms) == 1:
            return f"({format_expr(e.terms[0])})"
        return " + ".join(wrap(t, 5, strict=True) for t in e.terms)
    if isinstance(e, Cmp):
        return f"{wrap(e.lhs, 5)} {e.op} {wrap(e.rhs, 5)}"
    if isinstance(e, And):
        return f"{wrap(e.left, 2)} && {wrap(e.right, 2, strict=True)}"
    if isinstance(e, Or):
        return f"{wrap(e.left, 1)} || {wrap(e.right, 1, strict=True)}"
    if isinstance(e, Not):
        return f"!{wrap(e.expr, 3)}"
    raise TypeError(f"not a RegSpec node: {e!r}")


def format_rules(rs: RuleSet) -> str:
    out = []
    for name, decl in rs.schema.items():
        if DEFAULT_SCHEMA.get(name) != decl:
            out.append(f"map {name}[{decl.key_type}]")
    for r in rs.rules:
        if out:
            out.append("")
        for line in r.description.split("\n") if r.description else ():
            out.append(f"# {line}".rstrip())
        out.append(f"rule {r.id} on {r.signature}: {format_expr(r.expr)}")
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------------------
# evaluation


class EvalStats:
    """Counts AST node visits across evaluations."""

    __slots__ = ("visits",)

    def __init__(self):
        self.visits = 0


def _checked(v: int) -> int:
    if v < INT64_MIN or v > INT64_MAX:
        raise ArithmeticOverflow("64-bit overflow")
    return v


def _lookup(state: Any, map_name: str, key) -> int:
    if hasattr(state, "lookup"):
        return state.lookup(map_name, key)
    return state.get(map_name, {}).get(key, 0)


def eval_predicate(expr: Expr, params: Mapping[str, Any], state: Any, stats: EvalStats | None = None) -> bool:
    """Evaluate a condition against transaction params and an L2 state view.

    `state` is anything with ``lookup(map_name, key) -> int`` or a plain mapping
    of map name to dict.  Missing keys read as 0.
    """
    counter = stats if stats is not None else EvalStats()

    def ev(e):
        counter.visits += 1
        t = type(e)
        if t is Const:
            return e.value
        if t is Param:
            try:
                return params[e.name]
            except KeyError:
                raise MissingParam(e.name) from None
        if t is StateLookup:
            return _checked(_lookup(state, e.map_name, ev(e.key)))
        if t is Sum:
            acc = 0
            for term in e.terms:
                acc = _checked(acc + ev(term))
            return acc
        if t is LinTerm:
            return _checked(e.coeff * ev(e.expr))
        if t is Cmp:
            a, b = ev(e.lhs), ev(e.rhs)
            op = e.op
            if op == "<=":
                return a <= b
            if op == "==":
                return a == b
            if op == "<":
                return a < b
            if op == ">=":
                return a >= b
            if op == ">":
                return a > b
            return a != b
        if t is And:
            return ev(e.left) and ev(e.right)
        if t is Or:
            return ev(e.left) or ev(e.right)
        if t is Not:
            return not ev(e.expr)
        if t is AddrConst:
            return e.value
        raise TypeError(f"not a RegSpec node: {e!r}")

    return bool(ev(expr))


@dataclass(frozen=True)
class SemanticDecision:
    accepted: bool
    rule_id: str | None = None
    reason: str = "ok"  # ok | violated | overflow | missing-param | eval-error
    visits: int = 0

    def __bool__(self) -> bool:
        return self.accepted

    def __str__(self) -> str:
        if self.accepted:
            return "Accept"
        if self.reason == "violated":
            return f"Reject{{{self.rule_id}}}"
        return f"Reject{{{self.rule_id}:{self.reason}}}"


def tx_params(tx) -> dict:
    params = dict(tx.msg.params)
    params["from"] = tx.meta.sender
    return params


def validate_semantic(tx, state, rs: RuleSet, stats: EvalStats | None = None) -> SemanticDecision:
    """Accept iff every rule targeting the transaction's function holds.

    Rules run in declaration order; the first false (or erroring) rule is
    reported.  Evaluation errors reject.
    """
    counter = stats if stats is not None else EvalStats()
    start = counter.visits
    rule_ids = rs.index.get(bytes(tx.msg.selector), ())
    if not rule_ids:
        return SemanticDecision(True)
    params = tx_params(tx)
    for rid in rule_ids:
        rule = rs.get(rid)
        try:
            ok = eval_predicate(rule.expr, params, state, counter)
        except EvalError as exc:
            return SemanticDecision(False, rid, exc.reason, counter.visits - start)
        except Exception:
            return SemanticDecision(False, rid, "eval-error", counter.visits - start)
        if not ok:
            return SemanticDecision(False, rid, "violated", counter.visits - start)
    return SemanticDecision(True, None, "ok", counter.visits - start)


def complexity_budget(rules: Sequence[Rule]) -> int:
    """Sum of rule sizes: the worst-case node visits for one validation."""
    return sum(r.complexity for r in rules)
