"""Context query language: parser, canonical printer, validator and rewriter.

Two query classes are supported::

    SELECT friend_list FROM PERSON WHERE name = "Keith"
    SUBSCRIBE isVacant FROM OFFICE WHERE location = "S14 #06-20, NUS"
    SELECT CONT location FROM PERSON WHERE name = "Keith" SAMPLE PERIOD 1 min LIFETIME 2 hours

Keywords are case-insensitive. The hop budget (TTL) is not part of the
surface syntax; it is passed to :func:`parse` and carried by the AST.
"""
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import (
    TYPE_CHECKING,
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Tuple,
    Union,
)

from lark import Lark, Transformer, Token
from lark.exceptions import UnexpectedCharacters, UnexpectedEOF, UnexpectedInput, UnexpectedToken, VisitError

from cdms.core import CqlSyntaxError, KindMismatchError, QueryValidationError, UnsupportedOperatorError
from cdms.model import AttributeDef, AttributeValue, Comparison, GlobalSchema, compare, supports
from cdms.utils.logging import getLogger

if TYPE_CHECKING:  # pragma: no cover
    from cdms.matcher import SchemaMapping

logger = getLogger(__name__)

DEFAULT_TTL = 8

_KEYWORDS = ("select", "subscribe", "cont", "from", "where", "and", "sample", "period", "lifetime", "true", "false")

_GRAMMAR = r"""
?query: select | subscribe

select: _SELECT [CONT] projection _FROM IDENT [where] [cont_tail]
subscribe: SUBSCRIBE IDENT _FROM IDENT [where] [lifetime]

projection: IDENT ("," IDENT)*
where: _WHERE atom (_AND atom)*
atom: IDENT OP literal

cont_tail: SAMPLE _PERIOD duration _LIFETIME duration
lifetime: _LIFETIME duration
duration: NUMBER IDENT

?literal: STRING -> string
        | SIGNED_NUMBER -> number
        | _TRUE -> true
        | _FALSE -> false

_SELECT: "SELECT"i
SUBSCRIBE: "SUBSCRIBE"i
CONT: "CONT"i
_FROM: "FROM"i
_WHERE: "WHERE"i
_AND: "AND"i
SAMPLE: "SAMPLE"i
_PERIOD: "PERIOD"i
_LIFETIME: "LIFETIME"i
_TRUE: "true"i
_FALSE: "false"i

IDENT: /(?!(?i:KEYWORDS)\b)[A-Za-z_][A-Za-z0-9_]*/
OP: "!=" | "<=" | ">=" | "=" | "<" | ">"
STRING: /"(?:[^"\\]|\\.)*"/ | /“[^”]*”/

%import common.NUMBER
%import common.SIGNED_NUMBER
%import common.WS
%ignore WS
""".replace(
    "KEYWORDS", "|".join(_KEYWORDS)
)

# canonical unit -> (milliseconds, accepted spellings)
_UNITS: Dict[str, Tuple[int, Tuple[str, ...]]] = {
    "ms": (1, ("ms",)),
    "s": (1_000, ("s", "sec", "secs")),
    "min": (60_000, ("min", "mins")),
    "hour": (3_600_000, ("hour", "hours")),
}
_UNIT_ALIASES = {alias: unit for unit, (_, aliases) in _UNITS.items() for alias in aliases}

_TERMINAL_NAMES = {"COMMA": "','", "$END": "end of input", "IDENT": "identifier"}


class QueryKind(str, Enum):
    SELECT = "SELECT"
    SUBSCRIBE = "SUBSCRIBE"


@dataclass(frozen=True)
class Duration:
    magnitude: int
    unit: str = "ms"

    def __post_init__(self):
        assert self.magnitude >= 0, "Durations are non-negative"
        assert self.unit in _UNITS, f"Unknown duration unit {self.unit}"

    @property
    def millis(self) -> int:
        return self.magnitude * _UNITS[self.unit][0]

    def render(self) -> str:
        unit = "hours" if self.unit == "hour" and self.magnitude != 1 else self.unit
        return f"{self.magnitude} {unit}"


@dataclass(frozen=True)
class Atom:
    attribute: str
    op: Comparison
    literal: AttributeValue

    def render(self) -> str:
        return f"{self.attribute} {self.op.value} {self.literal.render()}"

    def holds(self, value: Optional[AttributeValue]) -> bool:
        """Atom outcome for a local value; missing or ill-typed values do not satisfy."""
        if value is None:
            return False
        try:
            return compare(value, self.op, self.literal)
        except (KindMismatchError, UnsupportedOperatorError):
            return False


@dataclass(frozen=True)
class Predicate:
    """Conjunction of comparison atoms. The empty conjunction matches everything."""

    atoms: Tuple[Atom, ...] = ()

    def __iter__(self) -> Iterator[Atom]:
        return iter(self.atoms)

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def is_trivial(self) -> bool:
        return not self.atoms

    def attributes(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(a.attribute for a in self.atoms))

    def render(self) -> str:
        return " AND ".join(a.render() for a in self.atoms)

    def evaluate(self, lookup: Callable[[str], Optional[AttributeValue]]) -> bool:
        return all(a.holds(lookup(a.attribute)) for a in self.atoms)


@dataclass(frozen=True)
class QueryAst:
    kind: QueryKind
    projection: Tuple[str, ...]
    domain: str
    predicate: Predicate = Predicate()
    continuous: bool = False
    sample_period: Optional[Duration] = None
    lifetime: Optional[Duration] = None
    ttl: int = DEFAULT_TTL
    unmapped: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        assert self.projection, "A query projects at least one attribute"
        assert self.ttl >= 1, "ttl must be at least 1"
        if self.kind is QueryKind.SELECT:
            has_tail = self.sample_period is not None and self.lifetime is not None
            assert has_tail == self.continuous, "SAMPLE PERIOD/LIFETIME go with CONT"
            assert has_tail or (self.sample_period is None and self.lifetime is None)
        else:
            assert len(self.projection) == 1, "SUBSCRIBE names exactly one event"
            assert not self.continuous and self.sample_period is None

    @property
    def event(self) -> str:
        assert self.kind is QueryKind.SUBSCRIBE
        return self.projection[0]

    def with_ttl(self, ttl: int) -> "QueryAst":
        return replace(self, ttl=ttl)


class _AstBuilder(Transformer):
    def projection(self, items):
        return tuple(str(t) for t in items)

    def atom(self, items):
        ident, op, literal = items
        return Atom(str(ident), Comparison(str(op)), literal)

    def where(self, atoms):
        return Predicate(tuple(atoms))

    def string(self, items):
        return AttributeValue.text(_decode_string(str(items[0])))

    def number(self, items):
        return AttributeValue.number(str(items[0]))

    def true(self, _):
        return AttributeValue.boolean(True)

    def false(self, _):
        return AttributeValue.boolean(False)

    def duration(self, items):
        magnitude, unit = items
        return _make_duration(magnitude, unit)

    def cont_tail(self, items):
        sample, period, lifetime = items
        return sample, period, lifetime

    def lifetime(self, items):
        return items[0]

    def select(self, items):
        cont, projection, domain, predicate, tail = items
        if cont is not None and tail is None:
            raise CqlSyntaxError(
                f"'{cont}' at line {cont.line}, column {cont.column} requires "
                "SAMPLE PERIOD ... LIFETIME ... at the end of the query",
                cont.line,
                cont.column,
                {"SAMPLE"},
                str(cont),
            )
        if tail is not None and cont is None:
            sample = tail[0]
            raise CqlSyntaxError(
                f"Unexpected '{sample}' at line {sample.line}, column {sample.column}: "
                "SAMPLE PERIOD is only allowed after SELECT CONT",
                sample.line,
                sample.column,
                {"end of input"},
                str(sample),
            )
        return QueryAst(
            kind=QueryKind.SELECT,
            projection=projection,
            domain=str(domain),
            predicate=predicate or Predicate(),
            continuous=cont is not None,
            sample_period=tail[1] if tail else None,
            lifetime=tail[2] if tail else None,
        )

    def subscribe(self, items):
        _, event, domain, predicate, lifetime = items
        return QueryAst(
            kind=QueryKind.SUBSCRIBE,
            projection=(str(event),),
            domain=str(domain),
            predicate=predicate or Predicate(),
            lifetime=lifetime,
        )


_ESCAPE_RE = re.compile(r'\\(["\\])')


def _decode_string(token: str) -> str:
    if token.startswith('"'):
        return _ESCAPE_RE.sub(r"\1", token[1:-1])
    # Typographic quotes carry no escapes
    return token[1:-1]


def _make_duration(magnitude: Union[str, Token], unit: Union[str, Token]) -> Duration:
    line = getattr(magnitude, "line", 1)
    column = getattr(magnitude, "column", 1)
    text = str(magnitude)
    if not text.isdigit():
        raise CqlSyntaxError(
            f"Duration magnitude must be a non-negative integer, got '{text}'",
            line,
            column,
            {"integer"},
            text,
        )
    canonical = _UNIT_ALIASES.get(str(unit).lower())
    if canonical is None:
        raise CqlSyntaxError(
            f"Unknown duration unit '{unit}'",
            getattr(unit, "line", line),
            getattr(unit, "column", column),
            sorted(_UNIT_ALIASES),
            str(unit),
        )
    return Duration(int(text), canonical)


@lru_cache(maxsize=None)
def _parser() -> Lark:
    return Lark(
        _GRAMMAR,
        start=["query", "duration"],
        parser="lalr",
        maybe_placeholders=True,
    )


def _friendly(names: Iterable[str]) -> List[str]:
    return sorted({_TERMINAL_NAMES.get(n, n.lstrip("_")) for n in names})


def _end_position(text: str) -> Tuple[int, int]:
    lines = text.split("\n")
    return len(lines), len(lines[-1]) + 1


def _syntax_error(text: str, e: UnexpectedInput) -> CqlSyntaxError:
    if isinstance(e, UnexpectedToken):
        if e.token.type == "$END":
            line, column = _end_position(text)
            token = "end of input"
        else:
            line, column, token = e.line, e.column, str(e.token)
        expected = e.expected
    elif isinstance(e, UnexpectedCharacters):
        line, column, token = e.line, e.column, e.char
        expected = e.allowed or set()
    elif isinstance(e, UnexpectedEOF):
        line, column = _end_position(text)
        token, expected = "end of input", e.expected
    else:  # pragma: no cover
        line, column, token, expected = getattr(e, "line", 0), getattr(e, "column", 0), "?", set()
    names = _friendly(expected)
    shown = token if token == "end of input" else repr(token)
    return CqlSyntaxError(
        f"Unexpected {shown} at line {line}, column {column}; expected one of: {', '.join(names)}",
        line,
        column,
        names,
        token,
    )


def _run(text: str, start: str):
    try:
        tree = _parser().parse(text, start=start)
        return _AstBuilder().transform(tree)
    except UnexpectedInput as e:
        raise _syntax_error(text, e) from None
    except VisitError as e:
        if isinstance(e.orig_exc, CqlSyntaxError):
            raise e.orig_exc from None
        raise


def parse(text: str, ttl: int = DEFAULT_TTL) -> QueryAst:
    """Parse a query string into a :class:`QueryAst`.

    Raises:
        CqlSyntaxError: with line, column, the offending token and the expected set.
    """
    if ttl < 1:
        raise ValueError(f"ttl must be at least 1, got {ttl}")
    ast = _run(text, "query")
    return ast.with_ttl(ttl) if ttl != ast.ttl else ast


def parse_duration(text: str) -> Duration:
    """Parse ``"<integer> <unit>"`` with units ms, s/sec/secs, min/mins, hour/hours."""
    return _run(text, "duration")


def render(ast: QueryAst) -> str:
    """Canonical pretty-printer; ``parse(render(ast)) == ast`` for default-ttl ASTs."""
    where = f" WHERE {ast.predicate.render()}" if ast.predicate.atoms else ""
    if ast.kind is QueryKind.SUBSCRIBE:
        tail = f" LIFETIME {ast.lifetime.render()}" if ast.lifetime else ""
        return f"SUBSCRIBE {ast.event} FROM {ast.domain}{where}{tail}"
    cont = "CONT " if ast.continuous else ""
    tail = ""
    if ast.continuous:
        assert ast.sample_period is not None and ast.lifetime is not None
        tail = f" SAMPLE PERIOD {ast.sample_period.render()} LIFETIME {ast.lifetime.render()}"
    return f"SELECT {cont}{', '.join(ast.projection)} FROM {ast.domain}{where}{tail}"


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code} {self.subject}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class TypedQuery:
    ast: QueryAst
    schema: GlobalSchema
    projection: Tuple[AttributeDef, ...]
    predicate: Tuple[Tuple[Atom, AttributeDef], ...]


GlobalCatalog = Union[Mapping[str, GlobalSchema], Iterable[GlobalSchema]]


def _catalog(globals_: GlobalCatalog) -> Mapping[str, GlobalSchema]:
    if isinstance(globals_, Mapping):
        return globals_
    return {g.domain_name: g for g in globals_}


def check(ast: QueryAst, globals_: GlobalCatalog) -> Tuple[Optional[TypedQuery], List[ValidationIssue]]:
    """Like :func:`validate` but returns the collected issues instead of raising."""
    schema = _catalog(globals_).get(ast.domain)
    if schema is None:
        return None, [ValidationIssue("unknown-domain", ast.domain)]

    issues: List[ValidationIssue] = []
    projection: List[AttributeDef] = []
    for name in ast.projection:
        attr = schema.attribute(name)
        if attr is None:
            issues.append(ValidationIssue("unknown-attribute", name, ast.domain))
            continue
        if ast.kind is QueryKind.SUBSCRIBE and not attr.is_event:
            issues.append(ValidationIssue("subscribe-on-non-event", name))
        projection.append(attr)

    predicate: List[Tuple[Atom, AttributeDef]] = []
    for atom in ast.predicate:
        attr = schema.attribute(atom.attribute)
        if attr is None:
            issues.append(ValidationIssue("unknown-attribute", atom.attribute, ast.domain))
        elif attr.kind is not atom.literal.kind:
            issues.append(
                ValidationIssue(
                    "kind-mismatch",
                    atom.attribute,
                    f"{attr.kind.value} attribute vs {atom.literal.kind.value} literal",
                )
            )
        elif not supports(attr.kind, atom.op):
            issues.append(
                ValidationIssue(
                    "unsupported-operator",
                    atom.attribute,
                    f"'{atom.op.value}' on {attr.kind.value}",
                )
            )
        else:
            predicate.append((atom, attr))

    if issues:
        return None, issues
    return TypedQuery(ast, schema, tuple(projection), tuple(predicate)), []


def validate(ast: QueryAst, globals_: GlobalCatalog) -> TypedQuery:
    """Resolve and type-check a parsed query against the global schemas.

    Raises:
        QueryValidationError: carrying every issue found, not only the first.
    """
    typed, issues = check(ast, globals_)
    if issues:
        logger.debug(f"Rejected query: {'; '.join(map(str, issues))}")
        raise QueryValidationError(issues)
    assert typed is not None
    return typed


def rewrite_to_local(ast: QueryAst, mapping: "SchemaMapping") -> QueryAst:
    """Replace global attribute names by a PSG's local names.

    Names the mapping does not cover pass through unchanged and are recorded
    in ``unmapped``; evaluators treat atoms over them as unsatisfied.
    """
    unmapped = set()

    def local(name: str) -> str:
        target = mapping.to_local(name)
        if target is None:
            unmapped.add(name)
            return name
        return target

    projection = tuple(local(n) for n in ast.projection)
    atoms = tuple(replace(a, attribute=local(a.attribute)) for a in ast.predicate)
    return replace(
        ast,
        projection=projection,
        predicate=Predicate(atoms),
        unmapped=frozenset(unmapped),
    )
