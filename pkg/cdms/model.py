"""Attribute-value context model shared by every other module.

Values come in four kinds (text, number, boolean, list-of-text). Schemas are
immutable; updated copies are produced with ``dataclasses.replace``.
"""
import math
import operator
import re
import xml.etree.ElementTree as ET
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)
from xml.sax.saxutils import escape, quoteattr

from cdms.core import KindMismatchError, SchemaTemplateError, UnsupportedOperatorError

if TYPE_CHECKING:  # pragma: no cover
    from cdms.cql import Predicate

TOKEN_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ValueKind(str, Enum):
    TEXT = "text"
    NUMBER = "number"
    BOOLEAN = "boolean"
    TEXT_LIST = "list-of-text"

    @classmethod
    def parse(cls, text: str) -> "ValueKind":
        try:
            return cls(text)
        except ValueError:
            raise SchemaTemplateError(
                f"Unknown attribute kind '{text}', expected one of {[k.value for k in cls]}"
            )


@dataclass(frozen=True)
class AttributeValue:
    kind: ValueKind
    value: Any

    def __post_init__(self):
        v = self.value
        if self.kind is ValueKind.TEXT:
            assert isinstance(v, str), f"text value must be str, got {type(v)}"
        elif self.kind is ValueKind.NUMBER:
            assert isinstance(v, Decimal), f"number value must be Decimal, got {type(v)}"
            if not v.is_finite():
                raise ValueError(f"Number values must be finite, got {v}")
        elif self.kind is ValueKind.BOOLEAN:
            assert isinstance(v, bool), f"boolean value must be bool, got {type(v)}"
        else:
            assert isinstance(v, tuple) and all(
                isinstance(x, str) for x in v
            ), "list-of-text value must be a tuple of str"

    @classmethod
    def text(cls, value: str) -> "AttributeValue":
        return cls(ValueKind.TEXT, value)

    @classmethod
    def number(cls, value: Union[int, float, str, Decimal]) -> "AttributeValue":
        if isinstance(value, float):
            if not math.isfinite(value):
                raise ValueError(f"Number values must be finite, got {value}")
            value = Decimal(repr(value))
        try:
            return cls(ValueKind.NUMBER, Decimal(value))
        except InvalidOperation:
            raise ValueError(f"Not a number: {value!r}")

    @classmethod
    def boolean(cls, value: bool) -> "AttributeValue":
        return cls(ValueKind.BOOLEAN, bool(value))

    @classmethod
    def text_list(cls, values: Iterable[str]) -> "AttributeValue":
        return cls(ValueKind.TEXT_LIST, tuple(values))

    @classmethod
    def of(cls, value: Any) -> "AttributeValue":
        """Infer the kind from a plain Python value."""
        if isinstance(value, AttributeValue):
            return value
        if isinstance(value, bool):
            return cls.boolean(value)
        if isinstance(value, (int, float, Decimal)):
            return cls.number(value)
        if isinstance(value, str):
            return cls.text(value)
        if isinstance(value, (list, tuple, set, frozenset)):
            return cls.text_list(sorted(value) if isinstance(value, (set, frozenset)) else value)
        raise TypeError(f"Cannot infer an attribute kind for {type(value)}")

    def render(self) -> str:
        """Literal form as written in a query."""
        if self.kind is ValueKind.TEXT:
            escaped = self.value.replace("\\", "\\\\").replace('"', '\\"')
            return f'"{escaped}"'
        if self.kind is ValueKind.NUMBER:
            return str(self.value)
        if self.kind is ValueKind.BOOLEAN:
            return "true" if self.value else "false"
        return "[" + ", ".join(AttributeValue.text(v).render() for v in self.value) + "]"

    def display(self) -> str:
        """Cell form used in CSV output."""
        if self.kind is ValueKind.BOOLEAN:
            return "true" if self.value else "false"
        if self.kind is ValueKind.TEXT_LIST:
            return ";".join(self.value)
        return str(self.value)

    def to_record(self) -> Dict[str, Any]:
        if self.kind is ValueKind.TEXT_LIST:
            return {"kind": self.kind.value, "value": list(self.value)}
        if self.kind is ValueKind.NUMBER:
            return {"kind": self.kind.value, "value": str(self.value)}
        return {"kind": self.kind.value, "value": self.value}


class Comparison(str, Enum):
    EQ = "="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="

    @property
    def is_ordering(self) -> bool:
        return self not in (Comparison.EQ, Comparison.NE)


_OPERATORS: Dict[Comparison, Callable[[Any, Any], bool]] = {
    Comparison.EQ: operator.eq,
    Comparison.NE: operator.ne,
    Comparison.LT: operator.lt,
    Comparison.LE: operator.le,
    Comparison.GT: operator.gt,
    Comparison.GE: operator.ge,
}


def supports(kind: ValueKind, op: Comparison) -> bool:
    """Whether ``op`` is defined on values of ``kind``."""
    return kind is ValueKind.NUMBER or not op.is_ordering


def compare(value: AttributeValue, op: Comparison, literal: AttributeValue) -> bool:
    """Typed comparison of an attribute value against a query literal.

    Text is compared exactly and case-sensitively. Lists of text only support
    ``=`` and ``!=``, as set equality.

    Raises:
        KindMismatchError: when the two kinds differ.
        UnsupportedOperatorError: for ordering operators on non-numbers.
    """
    op = Comparison(op)
    if value.kind is not literal.kind:
        raise KindMismatchError(
            f"Cannot compare {value.kind.value} with {literal.kind.value}"
        )
    if not supports(value.kind, op):
        raise UnsupportedOperatorError(
            f"Operator '{op.value}' is not defined on {value.kind.value} values"
        )
    lhs, rhs = value.value, literal.value
    if value.kind is ValueKind.TEXT_LIST:
        lhs, rhs = frozenset(lhs), frozenset(rhs)
    return _OPERATORS[op](lhs, rhs)


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: ValueKind
    is_event: bool = False
    is_private: bool = False


@dataclass(frozen=True)
class LocalSchema:
    domain_name: str
    attributes: Tuple[AttributeDef, ...] = ()
    parent_domain: Optional[str] = None

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> Optional[AttributeDef]:
        for a in self.attributes:
            if a.name == name:
                return a
        return None

    def __contains__(self, name: str) -> bool:
        return self.attribute(name) is not None


@dataclass(frozen=True)
class GlobalSchema:
    """The server's integrated catalog for one domain.

    Attributes are kept in creation order, which is also the order of the
    domain's semantic clusters on its ring.
    """

    domain_name: str
    attributes: Tuple[AttributeDef, ...] = ()
    member_count: int = 0

    def __post_init__(self):
        assert self.member_count >= 0, "member_count must be non-negative"

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> Optional[AttributeDef]:
        for a in self.attributes:
            if a.name == name:
                return a
        return None

    def __contains__(self, name: str) -> bool:
        return self.attribute(name) is not None

    def with_attributes(self, new: Iterable[AttributeDef]) -> "GlobalSchema":
        new = tuple(new)
        if not new:
            return self
        return replace(self, attributes=self.attributes + new)

    def with_member_count(self, member_count: int) -> "GlobalSchema":
        return replace(self, member_count=member_count)

    @classmethod
    def from_local(cls, local: LocalSchema, member_count: int = 0) -> "GlobalSchema":
        return cls(local.domain_name, local.attributes, member_count)

    def as_local(self) -> LocalSchema:
        return LocalSchema(self.domain_name, self.attributes)


@dataclass(frozen=True, order=True)
class PeerId:
    """Identity of a physical space gateway. Ordered and hashed by ``uid``."""

    uid: int
    address: str = field(default="", compare=False)

    def __str__(self) -> str:
        return self.address or f"peer-{self.uid}"


@dataclass(frozen=True)
class StepSignal:
    """Synthetic data provider: a piecewise-constant value over simulated time."""

    initial: AttributeValue
    changes: Tuple[Tuple[float, AttributeValue], ...] = ()

    def __post_init__(self):
        times = [t for t, _ in self.changes]
        assert times == sorted(times), "StepSignal changes must be time ordered"
        for _, v in self.changes:
            assert v.kind is self.initial.kind, "StepSignal must keep one kind"

    @property
    def kind(self) -> ValueKind:
        return self.initial.kind

    def value_at(self, t: float) -> AttributeValue:
        idx = bisect_right([ct for ct, _ in self.changes], t)
        return self.initial if idx == 0 else self.changes[idx - 1][1]

    def change_times(self) -> List[float]:
        return [t for t, _ in self.changes]


DataSource = Union[AttributeValue, StepSignal]


@dataclass(frozen=True)
class SpaceProfile:
    peer: PeerId
    schema: LocalSchema
    data: Mapping[str, DataSource] = field(default_factory=dict)
    event_rules: Mapping[str, "Predicate"] = field(default_factory=dict)


@dataclass(frozen=True)
class SchemaViolation:
    code: str
    subject: str = ""

    def __str__(self) -> str:
        return f"{self.code} {self.subject!r}" if self.subject else self.code


def _token_violations(what: str, name: Optional[str]) -> List[SchemaViolation]:
    if not name:
        return [SchemaViolation(f"empty-{what}")]
    if not TOKEN_RE.match(name):
        return [SchemaViolation("invalid-token", name)]
    return []


def validate_schema(schema: LocalSchema) -> List[SchemaViolation]:
    """Return every invariant violation of ``schema``; empty iff well-formed."""
    violations = _token_violations("domain", schema.domain_name)
    if schema.parent_domain is not None:
        violations += _token_violations("parent", schema.parent_domain)
        if schema.parent_domain == schema.domain_name:
            violations.append(SchemaViolation("parent-is-self", schema.parent_domain))
    seen = set()
    for a in schema.attributes:
        violations += _token_violations("attribute-name", a.name)
        if a.name in seen:
            violations.append(SchemaViolation("duplicate-attribute", a.name))
        seen.add(a.name)
        if a.is_event and a.kind is not ValueKind.BOOLEAN:
            violations.append(SchemaViolation("event-not-boolean", a.name))
    return violations


def validate_profile(profile: SpaceProfile) -> List[SchemaViolation]:
    """Schema violations plus the data/rule consistency of a space profile."""
    schema = profile.schema
    violations = validate_schema(schema)
    for name, source in profile.data.items():
        attr = schema.attribute(name)
        if attr is None:
            violations.append(SchemaViolation("unknown-data-attribute", name))
        elif source.kind is not attr.kind:
            violations.append(SchemaViolation("data-kind-mismatch", name))
    for name, rule in profile.event_rules.items():
        attr = schema.attribute(name)
        if attr is None:
            violations.append(SchemaViolation("unknown-event-rule", name))
            continue
        if not attr.is_event:
            violations.append(SchemaViolation("rule-on-non-event", name))
        for ref in rule.attributes():
            ref_attr = schema.attribute(ref)
            if ref_attr is None or ref_attr.is_event:
                violations.append(SchemaViolation("rule-references-event-or-unknown", ref))
    return violations


_ATTRIBUTE_FIELDS = {"name", "kind", "event", "private"}


def _parse_flag(element: ET.Element, key: str) -> bool:
    raw = element.get(key, "false").strip().lower()
    if raw not in {"true", "false"}:
        raise SchemaTemplateError(f"Attribute flag {key}='{raw}' must be 'true' or 'false'")
    return raw == "true"


def parse_schema_template(text: str) -> LocalSchema:
    """Parse the XML schema template carried in a registration request.

    Unknown elements and attributes are rejected; attribute order is kept.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise SchemaTemplateError(f"Malformed schema template: {e}")
    if root.tag != "schema":
        raise SchemaTemplateError(f"Expected <schema> root element, found <{root.tag}>")
    unknown = set(root.attrib) - {"domain"}
    if unknown:
        raise SchemaTemplateError(f"Unknown <schema> attributes: {sorted(unknown)}")
    domain = root.get("domain")
    if not domain:
        raise SchemaTemplateError("<schema> requires a 'domain' attribute")

    parent: Optional[str] = None
    attributes: List[AttributeDef] = []
    for child in root:
        if child.tag == "parent":
            if parent is not None:
                raise SchemaTemplateError("At most one <parent> element is allowed")
            if child.attrib or len(child):
                raise SchemaTemplateError("<parent> takes only text content")
            parent = (child.text or "").strip()
        elif child.tag == "attribute":
            unknown = set(child.attrib) - _ATTRIBUTE_FIELDS
            if unknown:
                raise SchemaTemplateError(f"Unknown <attribute> attributes: {sorted(unknown)}")
            if len(child):
                raise SchemaTemplateError("<attribute> takes no child elements")
            name, kind = child.get("name"), child.get("kind")
            if not name or not kind:
                raise SchemaTemplateError("<attribute> requires 'name' and 'kind'")
            attributes.append(
                AttributeDef(
                    name=name,
                    kind=ValueKind.parse(kind),
                    is_event=_parse_flag(child, "event"),
                    is_private=_parse_flag(child, "private"),
                )
            )
        else:
            raise SchemaTemplateError(f"Unknown element <{child.tag}>")
    return LocalSchema(domain, tuple(attributes), parent)


def render_schema_template(schema: Union[LocalSchema, GlobalSchema]) -> str:
    if isinstance(schema, GlobalSchema):
        schema = schema.as_local()
    lines = [f"<schema domain={quoteattr(schema.domain_name)}>"]
    if schema.parent_domain:
        lines.append(f"  <parent>{escape(schema.parent_domain)}</parent>")
    for a in schema.attributes:
        flags = ""
        if a.is_event:
            flags += ' event="true"'
        if a.is_private:
            flags += ' private="true"'
        lines.append(
            f"  <attribute name={quoteattr(a.name)} kind={quoteattr(a.kind.value)}{flags}/>"
        )
    lines.append("</schema>")
    return "\n".join(lines) + "\n"


def schema_of(
    domain: str,
    attributes: Sequence[Tuple[str, str]],
    event: Iterable[str] = (),
    private: Iterable[str] = (),
    parent: Optional[str] = None,
) -> LocalSchema:
    """Shorthand used by fixtures and generators.

    Example::

        schema_of("PERSON", [("name", "text"), ("location", "text")], private=["location"])
    """
    events, hidden = set(event), set(private)
    return LocalSchema(
        domain,
        tuple(
            AttributeDef(n, ValueKind.parse(k), n in events, n in hidden)
            for n, k in attributes
        ),
        parent,
    )
