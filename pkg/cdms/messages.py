"""Wire messages between the server, the CSGs and the PSGs.

Each message is a frozen dataclass tagged with ``kind``. ``to_record`` gives
the tagged record a networked build would put on the wire and ``digest`` a
short stable fingerprint of it, used in event traces.
"""
import hashlib
import json
from dataclasses import dataclass, fields, is_dataclass
from decimal import Decimal
from enum import Enum
from typing import Any, ClassVar, Dict, Optional, Tuple

from cdms.cql import Predicate, QueryAst, render
from cdms.matcher import SchemaMapping
from cdms.model import AttributeValue, PeerId
from cdms.overlay import LookupRequest


def _plain(value: Any) -> Any:
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    if isinstance(value, PeerId):
        return {"uid": value.uid, "address": value.address}
    if isinstance(value, AttributeValue):
        return value.to_record()
    if isinstance(value, Predicate):
        return value.render()
    if isinstance(value, QueryAst):
        return render(value)
    if isinstance(value, SchemaMapping):
        return {"domain": value.domain, "pairs": [list(p) for p in value.pairs]}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    raise TypeError(f"No wire form for {type(value)}")


class Message:
    kind: ClassVar[str] = ""

    def to_record(self) -> Dict[str, Any]:
        record = {"kind": self.kind}
        record.update({f.name: _plain(getattr(self, f.name)) for f in fields(self)})  # type: ignore
        return record

    def digest(self) -> str:
        blob = json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class Register(Message):
    kind: ClassVar[str] = "REGISTER"
    address: str
    template: str


@dataclass(frozen=True)
class RegisterAck(Message):
    kind: ClassVar[str] = "REGISTER_ACK"
    peer: PeerId
    sc_list: Tuple[Tuple[str, str, Optional[PeerId]], ...]
    mapping: SchemaMapping


@dataclass(frozen=True)
class Update(Message):
    kind: ClassVar[str] = "UPDATE"
    peer: PeerId
    template: str


@dataclass(frozen=True)
class MappingUpdate(Message):
    kind: ClassVar[str] = "MAPPING_UPDATE"
    mapping: SchemaMapping


@dataclass(frozen=True)
class Join(Message):
    kind: ClassVar[str] = "JOIN"
    cluster: Tuple[str, str]
    peer: PeerId


@dataclass(frozen=True)
class Ping(Message):
    kind: ClassVar[str] = "PING"
    nonce: int


@dataclass(frozen=True)
class Pong(Message):
    kind: ClassVar[str] = "PONG"
    nonce: int
    peer: PeerId


@dataclass(frozen=True)
class Lookup(Message):
    kind: ClassVar[str] = "LOOKUP"
    request: LookupRequest
    sender: Optional[PeerId] = None

    def to_record(self) -> Dict[str, Any]:
        r = self.request
        return {
            "kind": self.kind,
            "query_id": r.query_id,
            "domain": r.domain,
            "predicate": r.predicate.render(),
            "projection": list(r.projection),
            "ttl": r.ttl,
            "hops": r.hops,
            "origin": r.origin,
            "cluster": r.cluster,
            "sender": _plain(self.sender),
        }


@dataclass(frozen=True)
class Result(Message):
    kind: ClassVar[str] = "RESULT"
    query_id: int
    peer: PeerId
    values: Tuple[Tuple[str, Optional[AttributeValue]], ...]
    timestamp: float
    seq: int = 0

    @property
    def all_null(self) -> bool:
        return all(v is None for _, v in self.values)


@dataclass(frozen=True)
class Subscribe(Message):
    kind: ClassVar[str] = "SUBSCRIBE"
    query_id: int
    event: str
    predicate: Predicate
    lifetime_ms: Optional[int]
    origin: str


@dataclass(frozen=True)
class Notify(Message):
    kind: ClassVar[str] = "NOTIFY"
    query_id: int
    peer: PeerId
    value: bool
    timestamp: float
