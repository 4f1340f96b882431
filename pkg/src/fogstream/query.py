"""Logical streams, operator algebra, and the SQL-like query dialect.

The dialect covers the shape of the three taxi queries:

    SELECT f1, f2, sum(f3) FROM stream(name, period_ms)
    [WHERE <boolean expression>]
    [GROUP BY ts [AHEADLIMIT n] [DELAYLIMIT n]]
    [ORDER BY field DESC LIMIT k]

Tumbling windows align at epoch multiples of the window length on event time
(field `ts`). GROUP BY ts is window-keyed aggregation; the emitted ts is the
window start. Top-k re-emits the current top k (latest value per key) every
source period.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import (QuerySyntaxError, TypeMismatch, UnknownField, UnknownOp,
                     UnknownStream)

I64, F64, BOOL, TEXT = "i64", "f64", "bool", "text"
NUMERIC = (I64, F64)


@dataclass(frozen=True)
class SchemaField:
    name: str
    kind: str


@dataclass
class LogicalStream:
    name: str
    schema: list           # [SchemaField]
    members: list          # sensor ids
    rate_hint: float = 1.0  # records/s per member

    def kinds(self) -> dict:
        return {f.name: f.kind for f in self.schema}


# ---------------------------------------------------------------------------
# Boolean predicate expressions
# ---------------------------------------------------------------------------

class Expr:
    def eval(self, rec: dict):
        raise NotImplementedError

    def fields(self) -> set:
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__

    def __repr__(self):
        return self.to_text()


class FieldRef(Expr):
    def __init__(self, name):
        self.name = name

    def eval(self, rec):
        return rec[self.name]

    def fields(self):
        return {self.name}

    def to_text(self):
        return self.name


class Const(Expr):
    def __init__(self, value):
        self.value = value

    def eval(self, rec):
        return self.value

    def fields(self):
        return set()

    def to_text(self):
        if isinstance(self.value, bool):
            return "TRUE" if self.value else "FALSE"
        return repr(self.value)


_CMP = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
}


class Cmp(Expr):
    def __init__(self, op, left, right):
        self.op = op
        self.left = left
        self.right = right

    def eval(self, rec):
        return _CMP[self.op](self.left.eval(rec), self.right.eval(rec))

    def fields(self):
        return self.left.fields() | self.right.fields()

    def to_text(self):
        return f"{self.left.to_text()}{self.op}{self.right.to_text()}"


class And(Expr):
    def __init__(self, items):
        self.items = list(items)

    def eval(self, rec):
        return all(i.eval(rec) for i in self.items)

    def fields(self):
        return set().union(*(i.fields() for i in self.items))

    def to_text(self):
        return " && ".join(_paren(i) for i in self.items)


class Or(Expr):
    def __init__(self, items):
        self.items = list(items)

    def eval(self, rec):
        return any(i.eval(rec) for i in self.items)

    def fields(self):
        return set().union(*(i.fields() for i in self.items))

    def to_text(self):
        return " || ".join(_paren(i) for i in self.items)


class Not(Expr):
    def __init__(self, item):
        self.item = item

    def eval(self, rec):
        return not self.item.eval(rec)

    def fields(self):
        return self.item.fields()

    def to_text(self):
        return f"!{_paren(self.item)}"


def _paren(e: Expr) -> str:
    if isinstance(e, (And, Or)):
        return f"({e.to_text()})"
    return e.to_text()


# ---------------------------------------------------------------------------
# Arithmetic expressions for map assignments
# ---------------------------------------------------------------------------

_ARITH = {"+": lambda a, b: a + b, "-": lambda a, b: a - b,
          "*": lambda a, b: a * b}


class Arith:
    """('field', name) | ('const', v) | (op, left, right)"""

    def __init__(self, node):
        self.node = node

    def eval(self, rec):
        return self._eval(self.node, rec)

    def _eval(self, node, rec):
        tag = node[0]
        if tag == "field":
            return rec[node[1]]
        if tag == "const":
            return node[1]
        return _ARITH[tag](self._eval(node[1], rec), self._eval(node[2], rec))

    def fields(self):
        out = set()

        def walk(node):
            if node[0] == "field":
                out.add(node[1])
            elif node[0] != "const":
                walk(node[1])
                walk(node[2])
        walk(self.node)
        return out

    def __eq__(self, other):
        return isinstance(other, Arith) and self.node == other.node

    def __repr__(self):
        return f"Arith({self.node})"


# ---------------------------------------------------------------------------
# Operators and plans
# ---------------------------------------------------------------------------

@dataclass
class SourceOp:
    kind = "source"
    stream: str
    period_ms: int
    ahead_ms: int = 0
    delay_ms: int = 0


@dataclass
class FilterOp:
    kind = "filter"
    predicate: Expr = None


@dataclass
class ProjectOp:
    kind = "project"
    fields: list = None


@dataclass
class MapOp:
    kind = "map"
    assignments: list = None  # [(target, Arith)]


@dataclass
class KeyAggregateOp:
    kind = "key_aggregate"
    keys: list = None          # group fields beyond the window key
    agg: str = "count"         # count | sum
    agg_field: Optional[str] = None
    window_ms: int = 1000

    @property
    def out_field(self) -> str:
        return f"{self.agg}_{self.agg_field}" if self.agg_field else "count"


@dataclass
class TopKOp:
    kind = "topk"
    order_field: str = ""
    k: int = 1
    period_ms: int = 1000
    key_field: Optional[str] = None  # None keys by record origin
    out_fields: list = None


@dataclass
class SnapshotJoinOp:
    kind = "snapshot_join"
    tolerance_ms: int = 100


@dataclass
class SinkOp:
    kind = "sink"
    target: str = "default"


STATEFUL_KINDS = ("key_aggregate", "topk", "snapshot_join")


@dataclass
class LogicalPlan:
    """Linear operator chain from one source to one sink.

    Multi-way ingress comes from logical streams with many member sensors,
    not from plan-level branching.
    """
    id: str
    ops: list                   # ordered Operator chain, source first
    streams: dict               # stream name -> LogicalStream
    sla_max_latency_ms: Optional[int] = None

    @property
    def source(self) -> SourceOp:
        return self.ops[0]

    @property
    def sink(self) -> SinkOp:
        return self.ops[-1]

    def op_ids(self) -> list:
        return [f"{self.id}/{i}:{op.kind}" for i, op in enumerate(self.ops)]

    def stream_of_source(self) -> LogicalStream:
        return self.streams[self.source.stream]

    def structurally_equal(self, other: "LogicalPlan") -> bool:
        if len(self.ops) != len(other.ops):
            return False
        return all(a == b for a, b in zip(self.ops, other.ops))


# ---------------------------------------------------------------------------
# Schema propagation / typecheck
# ---------------------------------------------------------------------------

def output_schema(plan: LogicalPlan, upto: Optional[int] = None) -> list:
    """Schema flowing out of op index `upto` (defaults to the whole plan)."""
    stream = plan.stream_of_source()
    schema = list(stream.schema)
    end = len(plan.ops) if upto is None else upto + 1
    for i, op in enumerate(plan.ops[:end]):
        kinds = {f.name: f.kind for f in schema}
        if op.kind in ("source", "filter", "sink", "snapshot_join"):
            continue
        if op.kind == "project":
            schema = [f for f in schema if f.name in op.fields]
        elif op.kind == "map":
            for target, expr in op.assignments:
                srcs = expr.fields()
                kind = F64 if any(kinds.get(s) == F64 for s in srcs) else I64
                if target not in kinds:
                    schema = schema + [SchemaField(target, kind)]
                kinds[target] = kind
        elif op.kind == "key_aggregate":
            out = [SchemaField("ts", I64)]
            out += [SchemaField(k, kinds[k]) for k in (op.keys or [])]
            out.append(SchemaField(op.out_field, I64 if op.agg == "count" else kinds.get(op.agg_field, F64)))
            schema = out
        elif op.kind == "topk":
            schema = [f for f in schema if f.name in op.out_fields]
    return schema


def typecheck(plan: LogicalPlan):
    """Verify field existence and kind compatibility along every edge."""
    stream = plan.stream_of_source()
    schema = list(stream.schema)
    for i, op in enumerate(plan.ops):
        kinds = {f.name: f.kind for f in schema}
        oid = f"{plan.id}/{i}:{op.kind}"

        def need(name, numeric=False):
            if name not in kinds:
                raise TypeMismatch(f"{oid}: unknown field {name!r}")
            if numeric and kinds[name] not in NUMERIC:
                raise TypeMismatch(f"{oid}: field {name!r} is {kinds[name]}, need numeric")

        if op.kind == "filter":
            _typecheck_expr(op.predicate, kinds, oid)
        elif op.kind == "project":
            for f in op.fields:
                need(f)
        elif op.kind == "map":
            for target, expr in op.assignments:
                for f in expr.fields():
                    need(f, numeric=True)
        elif op.kind == "key_aggregate":
            for k in op.keys or []:
                need(k)
            if op.agg == "sum":
                need(op.agg_field, numeric=True)
            elif op.agg != "count":
                raise TypeMismatch(f"{oid}: unsupported aggregate {op.agg!r}")
        elif op.kind == "topk":
            need(op.order_field, numeric=True)
            for f in op.out_fields:
                need(f)
            if op.key_field:
                need(op.key_field)
        schema = output_schema(plan, i)


def _typecheck_expr(expr: Expr, kinds: dict, oid: str):
    if isinstance(expr, (And, Or)):
        for item in expr.items:
            _typecheck_expr(item, kinds, oid)
    elif isinstance(expr, Not):
        _typecheck_expr(expr.item, kinds, oid)
    elif isinstance(expr, Cmp):
        sides = []
        for side in (expr.left, expr.right):
            if isinstance(side, FieldRef):
                if side.name not in kinds:
                    raise TypeMismatch(f"{oid}: unknown field {side.name!r}")
                sides.append(kinds[side.name])
            else:
                v = side.value
                sides.append(BOOL if isinstance(v, bool)
                             else TEXT if isinstance(v, str)
                             else F64 if isinstance(v, float) else I64)
        a, b = sides
        compatible = (a == b) or (a in NUMERIC and b in NUMERIC)
        if not compatible:
            raise TypeMismatch(f"{oid}: cannot compare {a} with {b}")
        if expr.op not in ("=", "!=") and (a == BOOL or b == BOOL):
            raise TypeMismatch(f"{oid}: ordering comparison on bool")
    elif isinstance(expr, FieldRef):
        if expr.name not in kinds:
            raise TypeMismatch(f"{oid}: unknown field {expr.name!r}")
        if kinds[expr.name] != BOOL:
            raise TypeMismatch(f"{oid}: bare field {expr.name!r} is not bool")
    elif not isinstance(expr, Const):
        raise TypeMismatch(f"{oid}: bad predicate node {expr!r}")


def required_fields(plan: LogicalPlan, op_index: int) -> set:
    """Minimal input fields for op_index and everything downstream."""
    if not 0 <= op_index < len(plan.ops):
        raise UnknownOp(str(op_index))
    req: set = set()
    for i in range(len(plan.ops) - 1, op_index - 1, -1):
        op = plan.ops[i]
        if op.kind == "sink":
            req = {f.name for f in output_schema(plan, i)}
        elif op.kind == "project":
            req = set(op.fields)
        elif op.kind == "filter":
            req = req | op.predicate.fields()
        elif op.kind == "map":
            targets = {t for t, _ in op.assignments}
            needed_srcs = set()
            for t, expr in op.assignments:
                if t in req:
                    needed_srcs |= expr.fields()
            req = (req - targets) | needed_srcs
        elif op.kind == "key_aggregate":
            req = set(op.keys or [])
            if op.agg_field:
                req.add(op.agg_field)
            in_fields = {f.name for f in output_schema(plan, i - 1)} if i else set()
            if "ts" in in_fields:
                req.add("ts")
        elif op.kind == "topk":
            req = set(op.out_fields) | {op.order_field}
            if op.key_field:
                req.add(op.key_field)
    return req


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    \s*(?:
      (?P<num>-?\d+\.\d+|-?\d+)
    | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
    | (?P<op><=|>=|!=|&&|\|\||[=<>(),;!*])
    )""", re.VERBOSE)

_KEYWORDS = {"select", "from", "where", "group", "by", "order", "limit",
             "aheadlimit", "delaylimit", "and", "or", "not", "true", "false",
             "stream", "desc", "asc", "sum", "count"}


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise QuerySyntaxError(f"bad token at {text[pos:pos+20]!r}")
        pos = m.end()
        if m.group("num"):
            s = m.group("num")
            out.append(("num", float(s) if "." in s else int(s)))
        elif m.group("ident"):
            word = m.group("ident")
            if word.lower() in _KEYWORDS:
                out.append(("kw", word.lower()))
            else:
                out.append(("ident", word))
        else:
            out.append(("op", m.group("op")))
    return out


class _Parser:
    def __init__(self, tokens, streams):
        self.toks = tokens
        self.i = 0
        self.streams = streams

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        k, v = self.next()
        if k != kind or (value is not None and v != value):
            raise QuerySyntaxError(f"expected {value or kind}, got {v!r}")
        return v

    def accept(self, kind, value=None):
        k, v = self.peek()
        if k == kind and (value is None or v == value):
            self.i += 1
            return True
        return False

    # select list: idents or sum(ident)/count(ident)
    def select_list(self):
        items = []
        while True:
            k, v = self.next()
            if k == "kw" and v in ("sum", "count"):
                self.expect("op", "(")
                _, f = self.next()
                self.expect("op", ")")
                items.append((v, f))
            elif k == "ident":
                items.append(("field", v))
            else:
                raise QuerySyntaxError(f"bad select item {v!r}")
            if not self.accept("op", ","):
                return items

    def stream_clause(self):
        self.expect("kw", "stream")
        self.expect("op", "(")
        name = self.expect("ident")
        self.expect("op", ",")
        k, period = self.next()
        if k != "num":
            raise QuerySyntaxError("stream() needs a numeric period")
        self.expect("op", ")")
        return name, int(period)

    # boolean expression grammar
    def expr(self):
        return self.or_expr()

    def or_expr(self):
        items = [self.and_expr()]
        while self.accept("op", "||") or self.accept("kw", "or"):
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else Or(items)

    def and_expr(self):
        items = [self.unary()]
        while self.accept("op", "&&") or self.accept("kw", "and"):
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(items)

    def unary(self):
        if self.accept("op", "!") or self.accept("kw", "not"):
            return Not(self.unary())
        if self.accept("op", "("):
            e = self.expr()
            self.expect("op", ")")
            return e
        return self.comparison()

    def operand(self):
        k, v = self.next()
        if k == "num":
            return Const(v)
        if k == "kw" and v in ("true", "false"):
            return Const(v == "true")
        if k == "ident":
            return FieldRef(v)
        raise QuerySyntaxError(f"bad operand {v!r}")

    def comparison(self):
        left = self.operand()
        k, v = self.peek()
        if k == "op" and v in _CMP:
            self.next()
            right = self.operand()
            return Cmp(v, left, right)
        # bare boolean field
        return left


def parse_query(text: str, streams: dict, query_id: str = "q") -> LogicalPlan:
    """Parse dialect text into a typechecked LogicalPlan."""
    p = _Parser(_tokenize(text), streams)
    p.expect("kw", "select")
    select = p.select_list()
    p.expect("kw", "from")
    stream_name, period = p.stream_clause()
    if stream_name not in streams:
        raise UnknownStream(stream_name)
    stream = streams[stream_name]
    kinds = stream.kinds()

    predicate = None
    if p.accept("kw", "where"):
        predicate = p.expr()

    group_field = None
    ahead = delay = 0
    if p.accept("kw", "group"):
        p.expect("kw", "by")
        group_field = p.expect("ident")
        if p.accept("kw", "aheadlimit"):
            ahead = int(p.next()[1])
        if p.accept("kw", "delaylimit"):
            delay = int(p.next()[1])

    order_field = None
    limit = None
    if p.accept("kw", "order"):
        p.expect("kw", "by")
        order_field = p.expect("ident")
        p.accept("kw", "desc") or p.accept("kw", "asc")
        p.expect("kw", "limit")
        limit = int(p.next()[1])
    p.accept("op", ";")
    if p.peek()[0] is not None:
        raise QuerySyntaxError(f"trailing tokens at {p.peek()[1]!r}")

    for tag, f in select:
        if tag == "field" and f not in kinds:
            raise UnknownField(f)

    ops: list = [SourceOp(stream=stream_name, period_ms=period,
                          ahead_ms=ahead, delay_ms=delay)]
    if predicate is not None:
        for f in sorted(predicate.fields()):
            if f not in kinds:
                raise UnknownField(f)
        ops.append(FilterOp(predicate=predicate))

    aggs = [(tag, f) for tag, f in select if tag in ("sum", "count")]
    plain = [f for tag, f in select if tag == "field"]
    if group_field is not None:
        if len(aggs) != 1:
            raise QuerySyntaxError("GROUP BY needs exactly one aggregate in SELECT")
        agg, agg_field = aggs[0]
        keys = [] if group_field == "ts" else [group_field]
        ops.append(KeyAggregateOp(keys=keys, agg=agg, agg_field=agg_field,
                                  window_ms=period))
    elif order_field is not None:
        key_field = "trip_id" if "trip_id" in kinds else None
        ops.append(TopKOp(order_field=order_field, k=limit, period_ms=period,
                          key_field=key_field, out_fields=plain))
    else:
        if aggs:
            raise QuerySyntaxError("aggregate in SELECT requires GROUP BY")
        ops.append(ProjectOp(fields=plain))
    ops.append(SinkOp())

    plan = LogicalPlan(id=query_id, ops=ops, streams=streams)
    typecheck(plan)
    return plan


def to_query_text(plan: LogicalPlan) -> str:
    """Canonical dialect text; parse(to_query_text(p)) reproduces p."""
    src = plan.source
    mids = plan.ops[1:-1]
    filt = next((o for o in mids if o.kind == "filter"), None)
    shaped = next((o for o in mids if o.kind in ("project", "key_aggregate", "topk")), None)
    if shaped is None:
        raise UnknownOp("plan is not dialect-expressible")
    if shaped.kind == "project":
        sel = ", ".join(shaped.fields)
        tail = ""
    elif shaped.kind == "key_aggregate":
        group = shaped.keys[0] if shaped.keys else "ts"
        args = shaped.agg_field or ("ts" if shaped.agg == "count" else "")
        sel = f"ts, {shaped.agg}({args})" if group == "ts" else f"{group}, {shaped.agg}({args})"
        tail = f" GROUP BY {group}"
        if src.ahead_ms or src.delay_ms:
            tail += f" AHEADLIMIT {src.ahead_ms} DELAYLIMIT {src.delay_ms}"
    else:
        sel = ", ".join(shaped.out_fields)
        tail = f" ORDER BY {shaped.order_field} DESC LIMIT {shaped.k}"
    where = f" WHERE {filt.predicate.to_text()}" if filt else ""
    return (f"SELECT {sel} FROM stream({src.stream}, {src.period_ms})"
            f"{where}{tail};")


def plan_to_text(plan: LogicalPlan) -> str:
    """One line per operator; the canonical serialization for golden tests
    and the deployment wire format."""
    lines = [f"plan {plan.id}"]
    for i, op in enumerate(plan.ops):
        lines.append(f"  {i} {op_to_text(op)}")
    return "\n".join(lines)


def op_to_text(op) -> str:
    if op.kind == "source":
        return (f"source stream={op.stream} period={op.period_ms}"
                f" ahead={op.ahead_ms} delay={op.delay_ms}")
    if op.kind == "filter":
        return f"filter {op.predicate.to_text()}"
    if op.kind == "project":
        return "project " + ",".join(op.fields)
    if op.kind == "map":
        parts = [f"{t}:={expr.node!r}" for t, expr in op.assignments]
        return "map " + "; ".join(parts)
    if op.kind == "key_aggregate":
        keys = ",".join(op.keys or []) or "-"
        return (f"key_aggregate keys={keys} agg={op.agg}"
                f" field={op.agg_field or '-'} window={op.window_ms}")
    if op.kind == "topk":
        return (f"topk order={op.order_field} k={op.k} period={op.period_ms}"
                f" key={op.key_field or '-'} out={','.join(op.out_fields)}")
    if op.kind == "snapshot_join":
        return f"snapshot_join tolerance={op.tolerance_ms}"
    if op.kind == "sink":
        return f"sink target={op.target}"
    raise UnknownOp(op.kind)


def op_from_text(text: str):
    """Inverse of op_to_text; lets operators travel inside deploy messages."""
    import ast

    kind, _, rest = text.partition(" ")
    if kind == "filter":
        p = _Parser(_tokenize(rest), {})
        expr = p.expr()
        if p.peek()[0] is not None:
            raise QuerySyntaxError(f"trailing tokens in filter text {rest!r}")
        return FilterOp(predicate=expr)
    if kind == "project":
        return ProjectOp(fields=rest.split(","))
    if kind == "map":
        assignments = []
        for part in rest.split("; "):
            target, _, node_repr = part.partition(":=")
            assignments.append((target, Arith(ast.literal_eval(node_repr))))
        return MapOp(assignments=assignments)
    kv = dict(item.split("=", 1) for item in rest.split())
    if kind == "source":
        return SourceOp(stream=kv["stream"], period_ms=int(kv["period"]),
                        ahead_ms=int(kv["ahead"]), delay_ms=int(kv["delay"]))
    if kind == "key_aggregate":
        keys = [] if kv["keys"] == "-" else kv["keys"].split(",")
        return KeyAggregateOp(keys=keys, agg=kv["agg"],
                              agg_field=None if kv["field"] == "-" else kv["field"],
                              window_ms=int(kv["window"]))
    if kind == "topk":
        return TopKOp(order_field=kv["order"], k=int(kv["k"]),
                      period_ms=int(kv["period"]),
                      key_field=None if kv["key"] == "-" else kv["key"],
                      out_fields=kv["out"].split(","))
    if kind == "snapshot_join":
        return SnapshotJoinOp(tolerance_ms=int(kv["tolerance"]))
    if kind == "sink":
        return SinkOp(target=kv["target"])
    raise UnknownOp(kind)
