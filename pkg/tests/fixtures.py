import heapq
from itertools import count
from typing import Callable, Dict, Iterable, List, Tuple

from cdms.cql import parse
from cdms.matcher import MatcherState, SynonymDictionary
from cdms.messages import Message
from cdms.model import GlobalSchema, PeerId, schema_of
from cdms.overlay import SemanticCluster
from cdms.simnet import SimConfig

QUERY_1 = 'SELECT friend_list FROM PERSON WHERE name = "Keith"'
QUERY_2 = 'SUBSCRIBE isVacant FROM OFFICE WHERE location = "S14 #06-20, NUS"'
QUERY_3 = 'SELECT CONT location FROM PERSON WHERE name = "Keith" SAMPLE PERIOD 1 min LIFETIME 2 hours'

# Small enough for a world to build in well under a second
SMALL_CONFIG = SimConfig(
    spaces_per_run=30,
    background_spaces=6,
    attrs_per_space=5,
    domain_attr_pool_size=10,
    runs=2,
)

PERSON = schema_of("PERSON", [("name", "text"), ("friend_list", "list-of-text"), ("location", "text")])
OFFICE = schema_of(
    "OFFICE",
    [("location", "text"), ("occupancy", "number"), ("isVacant", "boolean")],
    event=["isVacant"],
)
HOME = schema_of("HOME", [("temperature", "number"), ("light", "number"), ("humidity", "number")])
HOUSE = schema_of(
    "HOUSE",
    [("temperature", "number"), ("light", "number"), ("humidity", "number"), ("noise", "number")],
)

VACANT_RULE = parse("SELECT isVacant FROM OFFICE WHERE occupancy = 0").predicate


def seeded_globals() -> Dict[str, GlobalSchema]:
    return {s.domain_name: GlobalSchema.from_local(s) for s in (PERSON, OFFICE)}


def total_degree(cluster: SemanticCluster, peers: Iterable[PeerId]) -> int:
    """Upper bound on the LOOKUP copies a flood over ``peers`` can send."""
    return sum(cluster.graph.degree(p) for p in peers if p in cluster)


def matcher_state(**kwargs) -> MatcherState:
    return MatcherState.create(SynonymDictionary.builtin(), **kwargs)


class ManualTransport:
    """In-memory transport with a fixed per-message delay; run() drains it in time order."""

    def __init__(self, delay: float = 1.0):
        self.delay = delay
        self.time = 0.0
        self.endpoints: Dict[str, Callable[[str, Message], None]] = {}
        self.sent: List[Tuple[str, str, Message]] = []
        self._queue: List[Tuple[float, int, Callable[[], None]]] = []
        self._order = count()

    def now(self) -> float:
        return self.time

    def send(self, src: str, dst: str, message: Message):
        self.sent.append((src, dst, message))
        endpoint = self.endpoints.get(dst)
        if endpoint is not None:
            self.call_later(self.delay, lambda: endpoint(src, message))

    def call_later(self, delay: float, callback: Callable[[], None]):
        assert delay >= 0
        heapq.heappush(self._queue, (self.time + delay, next(self._order), callback))

    def run(self, until: float = float("inf")):
        while self._queue and self._queue[0][0] <= until:
            t, _, callback = heapq.heappop(self._queue)
            self.time = t
            callback()

    def of_kind(self, kind: str) -> List[Message]:
        return [m for _, _, m in self.sent if m.kind == kind]
