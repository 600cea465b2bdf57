"""Quantitative temporal property language and steady-state estimation.

The language is the steady-state fragment: zero-argument function definitions
over arithmetic, comparisons, if-then-else and s.rval("NAME") state queries,
plus assertions  S [ f(), "C" ] < p;  asserting that the long-run average of
f against the clock C stays below p.  The estimate accumulates, over the
event stream, (C(t_i) - C(t_{i-1})) * F(x_{i-1}) normalized by the total
clock increment, evaluated with non-overlapping batch means on one long
trajectory after a warmup; the run stops when the relative 95% confidence
half-width reaches the target or the wall-clock budget runs out.
"""

from __future__ import annotations

import math
import re
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .simulate import Event, SimModel, Simulator


class PropertyError(ValueError):
    pass


class ParseError(PropertyError):
    def __init__(self, msg, line, col):
        super().__init__(f"{msg} at line {line}, column {col}")
        self.line = line
        self.col = col


class EvalError(PropertyError):
    pass


class UndefinedSample(Exception):
    """An rval returned the undefined sentinel; the sample is skipped."""


# --- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Rval:
    name: str


@dataclass(frozen=True)
class Call:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class IfThenElse:
    cond: object
    then: object
    other: object


@dataclass
class SteadyStateQuery:
    function: str
    clock: str
    threshold: float
    relation: str = "<"
    source: str = ""


@dataclass
class PropertyFile:
    functions: dict[str, object]
    assertions: list[SteadyStateQuery]


# --- lexer / parser ----------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>\d+\.\d*([eE][+-]?\d+)?|\.\d+([eE][+-]?\d+)?|\d+([eE][+-]?\d+)?)
  | (?P<rval>s\.rval)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<str>"[^"]*")
  | (?P<op><=|>=|==|[-+*/<>=(){},;\[\]])
""", re.VERBOSE)

_KEYWORDS = {"if", "then", "else", "fi", "S"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        lexeme = m.group()
        if kind != "ws":
            toks.append(_Tok(kind, lexeme, line, col))
        nl = lexeme.count("\n")
        if nl:
            line += nl
            col = len(lexeme) - lexeme.rfind("\n")
        else:
            col += len(lexeme)
        pos = m.end()
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.next()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}",
                             tok.line, tok.col)
        return tok

    def parse_file(self) -> PropertyFile:
        functions: dict[str, object] = {}
        assertions: list[SteadyStateQuery] = []
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.text == "S":
                assertions.append(self.parse_assertion())
            elif tok.kind == "ident":
                name, expr = self.parse_def()
                functions[name] = expr
            else:
                raise ParseError(f"expected a definition or assertion, found {tok.text!r}",
                                 tok.line, tok.col)
        self._check_calls(functions, assertions)
        return PropertyFile(functions, assertions)

    def parse_def(self):
        name = self.next().text
        self.expect("(")
        self.expect(")")
        self.expect("=")
        expr = self.parse_expr()
        self.expect(";")
        return name, expr

    def parse_assertion(self) -> SteadyStateQuery:
        self.expect("S")
        self.expect("[")
        ftok = self.next()
        if ftok.kind != "ident":
            raise ParseError("expected a function name", ftok.line, ftok.col)
        self.expect("(")
        self.expect(")")
        self.expect(",")
        ctok = self.next()
        if ctok.kind != "str":
            raise ParseError("expected a clock name string", ctok.line, ctok.col)
        self.expect("]")
        self.expect("<")
        ntok = self.next()
        sign = 1.0
        if ntok.text == "-":
            sign = -1.0
            ntok = self.next()
        if ntok.kind != "num":
            raise ParseError("expected a threshold number", ntok.line, ntok.col)
        self.expect(";")
        return SteadyStateQuery(ftok.text, ctok.text[1:-1], sign * float(ntok.text))

    # precedence: comparisons < additive < multiplicative < unary/atom
    def parse_expr(self):
        left = self.parse_additive()
        while self.peek().text in ("<", ">", "<=", ">=", "=="):
            op = self.next().text
            right = self.parse_additive()
            left = Binary(op, left, right)
        return left

    def parse_additive(self):
        left = self.parse_multiplicative()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            right = self.parse_multiplicative()
            left = Binary(op, left, right)
        return left

    def parse_multiplicative(self):
        left = self.parse_unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            right = self.parse_unary()
            left = Binary(op, left, right)
        return left

    def parse_unary(self):
        if self.peek().text == "-":
            self.next()
            return Unary("-", self.parse_unary())
        return self.parse_atom()

    def parse_atom(self):
        tok = self.next()
        if tok.kind == "num":
            return Num(float(tok.text))
        if tok.kind == "rval":
            self.expect("(")
            stok = self.next()
            if stok.kind != "str":
                raise ParseError("s.rval expects a quoted name", stok.line, stok.col)
            self.expect(")")
            return Rval(stok.text[1:-1])
        if tok.text == "if":
            self.expect("{")
            cond = self.parse_expr()
            self.expect("}")
            self.expect("then")
            then = self.parse_expr()
            self.expect("else")
            other = self.parse_expr()
            self.expect("fi")
            return IfThenElse(cond, then, other)
        if tok.text == "(":
            expr = self.parse_expr()
            self.expect(")")
            return expr
        if tok.kind == "ident" and tok.text not in _KEYWORDS:
            if self.peek().text == "(":
                self.next()
                self.expect(")")
                return Call(tok.text)
            return Rval(tok.text)  # bare identifier: model constant or state name
        raise ParseError(f"unexpected token {tok.text!r}", tok.line, tok.col)

    @staticmethod
    def _check_calls(functions, assertions):
        def calls_in(expr):
            if isinstance(expr, Call):
                yield expr.name
            elif isinstance(expr, Unary):
                yield from calls_in(expr.operand)
            elif isinstance(expr, Binary):
                yield from calls_in(expr.left)
                yield from calls_in(expr.right)
            elif isinstance(expr, IfThenElse):
                yield from calls_in(expr.cond)
                yield from calls_in(expr.then)
                yield from calls_in(expr.other)

        for name, expr in functions.items():
            for callee in calls_in(expr):
                if callee not in functions:
                    raise PropertyError(f"call to undefined function {callee!r}")
        # reject recursion: DFS over the call graph
        colors: dict[str, int] = {}

        def visit(fn):
            if colors.get(fn) == 1:
                raise PropertyError(f"recursive definition of {fn!r}")
            if colors.get(fn) == 2:
                return
            colors[fn] = 1
            for callee in calls_in(functions[fn]):
                visit(callee)
            colors[fn] = 2

        for fn in functions:
            visit(fn)
        for a in assertions:
            if a.function not in functions:
                raise PropertyError(f"assertion references undefined function {a.function!r}")


def parse_quatex(text: str) -> PropertyFile:
    return _Parser(text).parse_file()


def expand_per_patch(text: str, patches: list[int]) -> dict[int, str]:
    """Substitute the literal patch placeholder suffix `_j` (as in y_j, c_j,
    H_j, z_i_j) for each requested patch index."""
    out = {}
    for j in patches:
        out[j] = re.sub(r"\b(y|c|H)_j\b", lambda m: f"{m.group(1)}_{j}", text)
    return out


# --- evaluation ---------------------------------------------------------------

def evaluate_expr(expr, rval, constants: dict[str, float] | None = None,
                  functions: dict[str, object] | None = None) -> float:
    """Strict numeric evaluation; comparisons yield 1.0/0.0.  An infinite
    sentinel from rval raises UndefinedSample so the estimator can skip it."""
    constants = constants or {}
    functions = functions or {}

    def ev(e) -> float:
        if isinstance(e, Num):
            return e.value
        if isinstance(e, Rval):
            if e.name in constants:
                return constants[e.name]
            v = rval(e.name)
            if math.isinf(v):
                raise UndefinedSample(e.name)
            return v
        if isinstance(e, Call):
            return ev(functions[e.name])
        if isinstance(e, Unary):
            return -ev(e.operand)
        if isinstance(e, Binary):
            a = ev(e.left)
            b = ev(e.right)
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            if e.op == "/":
                if b == 0:
                    raise EvalError("division by zero")
                return a / b
            if e.op == "<":
                return 1.0 if a < b else 0.0
            if e.op == ">":
                return 1.0 if a > b else 0.0
            if e.op == "<=":
                return 1.0 if a <= b else 0.0
            if e.op == ">=":
                return 1.0 if a >= b else 0.0
            if e.op == "==":
                return 1.0 if a == b else 0.0
        if isinstance(e, IfThenElse):
            return ev(e.then) if ev(e.cond) != 0.0 else ev(e.other)
        raise EvalError(f"cannot evaluate node {e!r}")

    return ev(expr)


# --- steady-state estimation ---------------------------------------------------

@dataclass
class EstimatorConfig:
    warmup_time: float | None = None  # defaults to 10 * r
    batches: int = 32
    rel_halfwidth_target: float = 0.10
    wall_budget: float = 300.0
    min_samples: int = 64
    max_sim_time: float | None = None
    chunk_time: float | None = None  # defaults to 20 * r


@dataclass
class EstimateResult:
    estimate: float | None
    halfwidth: float
    rel_halfwidth: float
    batches: int
    total_clock: float
    sim_time: float
    verdict: str  # satisfied | violated | undecided
    event_observed: bool
    skipped_samples: int = 0
    truncated: bool = False
    query: SteadyStateQuery | None = None


class _Accumulator:
    """Weighted samples ((C increment, F value)) with pair-merging
    consolidation so memory stays bounded on long runs."""

    def __init__(self, limit: int = 1 << 20):
        self.w: list[float] = []
        self.wf: list[float] = []
        self.nonzero_f = False
        self.limit = limit

    def add(self, w: float, f: float):
        self.w.append(w)
        self.wf.append(w * f)
        if f != 0.0:
            self.nonzero_f = True
        if len(self.w) >= self.limit:
            self._consolidate()

    def _consolidate(self):
        w = np.asarray(self.w)
        wf = np.asarray(self.wf)
        if w.size % 2:
            w, wf = np.append(w, 0.0), np.append(wf, 0.0)
        self.w = list(w.reshape(-1, 2).sum(axis=1))
        self.wf = list(wf.reshape(-1, 2).sum(axis=1))

    def batch_means(self, batches: int):
        w = np.asarray(self.w)
        wf = np.asarray(self.wf)
        total = float(w.sum())
        if total <= 0 or w.size < batches:
            return None
        cum = np.cumsum(w)
        edges = np.searchsorted(cum, np.linspace(total / batches, total, batches))
        edges[-1] = w.size - 1
        starts = np.concatenate([[0], edges[:-1] + 1])
        sums_w = np.add.reduceat(w, starts)
        sums_wf = np.add.reduceat(wf, starts)
        ok = sums_w > 0
        if ok.sum() < batches * 3 // 4:
            return None
        return sums_wf[ok] / sums_w[ok], total


def _clock_value(sim: Simulator, clock: str, t: float) -> float:
    if clock == "time":
        return t
    return sim.rval(clock, at=t)


def estimate_steady_state(model: SimModel, query: SteadyStateQuery,
                          functions: dict[str, object], cfg: EstimatorConfig | None = None,
                          seed: int | None = None, replication: int = 0) -> EstimateResult:
    """Batch-means estimate of the steady-state value of query.function
    against query.clock on a single long trajectory."""
    cfg = cfg or EstimatorConfig()
    expr = functions[query.function]
    clock = query.clock
    if clock != "time" and not re.fullmatch(r"c_\d+", clock):
        raise PropertyError(f"clock must be 'time' or a departure counter, got {clock!r}")
    needs_ticks = _mentions_hour_counter(expr, functions)
    sim = Simulator(model, seed=seed, replication=replication, hour_ticks=needs_ticks)
    constants = {"mu_tot": model.mu_tot}
    warmup = cfg.warmup_time if cfg.warmup_time is not None else 10.0 * model.r
    chunk = cfg.chunk_time if cfg.chunk_time is not None else 20.0 * model.r
    acc = _Accumulator()
    state = {"t_prev": 0.0, "c_prev": 0.0, "skipped": 0, "warm": False}
    deadline = _time.monotonic() + cfg.wall_budget

    def observer(t_prev: float, ev: Event, s: Simulator):
        if not state["warm"]:
            if ev.t <= warmup:
                state["t_prev"] = ev.t
                state["c_prev"] = _clock_value(s, clock, ev.t) + (
                    1.0 if clock != "time" and ev.kind == "dep" and f"c_{ev.patch}" == clock else 0.0)
                return
            state["warm"] = True
            state["t_prev"] = max(t_prev, warmup)
            state["c_prev"] = _clock_value(s, clock, state["t_prev"])
        if clock == "time":
            w = ev.t - state["t_prev"]
            if w > 0:
                t_eval = state["t_prev"]
                try:
                    f = evaluate_expr(expr, lambda nm: s.rval(nm, at=t_eval), constants, functions)
                    acc.add(w, f)
                except UndefinedSample:
                    state["skipped"] += 1
            state["t_prev"] = ev.t
        else:
            inc = 1.0 if (ev.kind == "dep" and f"c_{ev.patch}" == clock) else 0.0
            if inc > 0:
                try:
                    f = evaluate_expr(expr, lambda nm: s.rval(nm, at=ev.t), constants, functions)
                    acc.add(inc, f)
                except UndefinedSample:
                    state["skipped"] += 1
            state["t_prev"] = ev.t

    truncated = False
    estimate = halfwidth = None
    used_batches = 0
    total_clock = 0.0
    while True:
        finished = sim.run(observer, until_time=sim.t + chunk, wall_deadline=deadline)
        bm = acc.batch_means(cfg.batches)
        if bm is not None:
            means, total_clock = bm
            used_batches = len(means)
            estimate = float(means.mean())
            sd = float(means.std(ddof=1)) if used_batches > 1 else math.inf
            tcrit = stats.t.ppf(0.975, used_batches - 1) if used_batches > 1 else math.inf
            halfwidth = tcrit * sd / math.sqrt(used_batches)
            rel = halfwidth / abs(estimate) if estimate not in (None, 0.0) else (
                0.0 if halfwidth == 0.0 else math.inf)
            # an all-zero F stream is "event not yet observed": keep simulating
            # until the time or wall budget runs out, as the tables do
            if acc.nonzero_f and len(acc.w) >= cfg.min_samples and rel <= cfg.rel_halfwidth_target:
                break
        if not finished:
            truncated = True
            break
        if cfg.max_sim_time is not None and sim.t >= cfg.max_sim_time:
            break
        if clock != "time" and sim.t > warmup + 100 * chunk and not acc.w:
            raise PropertyError(f"clock {clock!r} never advances")

    event_observed = acc.nonzero_f and bool(acc.w)
    if estimate is None:
        rel = math.inf
        halfwidth = math.inf
    else:
        rel = halfwidth / abs(estimate) if estimate != 0.0 else (0.0 if halfwidth == 0.0 else math.inf)
    verdict = _verdict(estimate, halfwidth, query.threshold, event_observed)
    return EstimateResult(estimate, halfwidth if halfwidth is not None else math.inf,
                          rel, used_batches, total_clock, sim.t, verdict,
                          event_observed, state["skipped"], truncated, query)


def _mentions_hour_counter(expr, functions) -> bool:
    def walk(e):
        if isinstance(e, Rval):
            return e.name.startswith("H_")
        if isinstance(e, Unary):
            return walk(e.operand)
        if isinstance(e, Binary):
            return walk(e.left) or walk(e.right)
        if isinstance(e, IfThenElse):
            return walk(e.cond) or walk(e.then) or walk(e.other)
        if isinstance(e, Call):
            return walk(functions[e.name])
        return False

    return walk(expr)


def _verdict(estimate, halfwidth, threshold, event_observed) -> str:
    if estimate is None or not event_observed:
        return "undecided"
    if estimate + halfwidth < threshold:
        return "satisfied"
    if estimate - halfwidth >= threshold:
        return "violated"
    return "undecided"


def check_assertions(model: SimModel, prop: PropertyFile, cfg: EstimatorConfig | None = None,
                     seed: int | None = None) -> list[EstimateResult]:
    """Evaluate every assertion, one independent trajectory per assertion."""
    results = []
    for idx, q in enumerate(prop.assertions):
        results.append(estimate_steady_state(model, q, prop.functions, cfg,
                                             seed=seed, replication=idx))
    return results


def ewt_query(patch: int, threshold: float = 75.0) -> str:
    return (f'ewt() = 0.5 * (s.rval("y_{patch}") - mu_tot) '
            f'* (s.rval("y_{patch}") - mu_tot) / mu_tot;\n'
            f'S [ ewt(), "c_{patch}" ] < {threshold};\n')


def evwt_query(patch: int, threshold: float = 0.05) -> str:
    return (f'evwt() = if {{s.rval("y_{patch}") > 900}} then 1 else 0 fi;\n'
            f'S [ evwt(), "c_{patch}" ] < {threshold};\n')


def bph_query(patch: int, threshold: float = 0.05) -> str:
    return (f'bph() = if {{s.rval("H_{patch}") < 6}} then 1 else 0 fi;\n'
            f'S [ bph(), "time" ] < {threshold};\n')


def headway_query(patch: int, threshold: float = 1e9) -> str:
    return (f'headway() = s.rval("y_{patch}");\n'
            f'S [ headway(), "c_{patch}" ] < {threshold};\n')


def write_results_tsv(results: list[EstimateResult], path: str,
                      labels: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("assertion\tpatch\testimate\thalfwidth\tverdict\tbatches\tsim_time\n")
        for i, r in enumerate(results):
            label = labels[i] if labels else (r.query.function if r.query else str(i))
            patch = ""
            if r.query and r.query.clock.startswith("c_"):
                patch = r.query.clock[2:]
            if r.event_observed and r.estimate is not None:
                fh.write(f"{label}\t{patch}\t{r.estimate:.6g}\t{r.halfwidth:.3g}\t"
                         f"{r.verdict}\t{r.batches}\t{r.sim_time:.0f}\n")
            else:
                fh.write(f"{label}\t{patch}\t-\t-\t-\t{r.batches}\t{r.sim_time:.0f}\n")
