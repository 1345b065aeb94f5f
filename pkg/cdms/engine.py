"""Server and physical space gateway (PSG) state machines.

The server runs the registration pipeline, plans queries as a fixed
``Project -> Scan`` tree and collects the results PSGs send back. A PSG
evaluates lookups locally, pushes continuous samples, notifies event
subscribers and keeps its own history store.

Both sides only react to delivered messages and timer callbacks through a
:class:`Transport`; given the same delivery order they behave the same.
"""
from bisect import bisect_left
from dataclasses import dataclass, field, replace
from functools import partial
from typing import (
    Callable,
    Dict,
    Generator,
    Iterable,
    List,
    Optional,
    Protocol,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np

from cdms.core import (
    DecisionError,
    EmptyEntryError,
    MappingConflictError,
    RegistrationError,
    UnknownAttributeError,
    UnknownPeerError,
    UserError,
)
from cdms.cql import Predicate, QueryAst, QueryKind, TypedQuery, parse, rewrite_to_local, validate
from cdms.matcher import (
    Decision,
    DecisionLine,
    IntegrationProposal,
    MatchCandidate,
    MatcherState,
    SchemaMapping,
    Status,
    apply_decision,
    enqueue,
    integrate,
    match_schema,
    provisional_decisions,
)
from cdms.messages import (
    Lookup,
    MappingUpdate,
    Message,
    Join,
    Notify,
    Ping,
    Pong,
    RegisterAck,
    Result,
    Subscribe,
    Update,
)
from cdms.model import (
    AttributeValue,
    GlobalSchema,
    LocalSchema,
    PeerId,
    SpaceProfile,
    StepSignal,
    parse_schema_template,
    validate_schema,
)
from cdms.overlay import (
    DEFAULT_DEGREE,
    ContextSpaceManager,
    DomainRing,
    LookupRequest,
    PeerOverlayState,
    flood_step,
    join,
    leave,
    route_to_entry,
)
from cdms.utils.logging import getLogger

logger = getLogger(__name__)

SERVER_ADDRESS = "server"
REGISTRATION_PHASES = (
    "registration_request",
    "schema_matching",
    "return_sc_list",
    "p2p_connection_establishment",
)
QUERY_PHASES = ("parse", "space_lookup", "cluster_lookup", "p2p_search")


@dataclass(frozen=True)
class CostModel:
    """Simulated processing time per pipeline step, in ms."""

    registration_request_ms: float = 20.0
    schema_matching_ms: float = 1.0  # per local attribute
    return_sc_list_ms: float = 40.0
    cluster_create_ms: float = 10.0  # per cluster generated by the CSG
    join_processing_ms: float = 5.0  # per cluster joined
    query_parse_ms: float = 2.0
    space_lookup_ms: float = 1.0
    cluster_lookup_ms: float = 2.0  # per ring position walked
    psg_eval_ms: float = 1.0
    result_ingest_ms: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            assert value >= 0, f"{name} must be non-negative, got {value}"

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(**{k: 0.0 for k in vars(cls())})


@dataclass
class PhaseTiming:
    spans: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def of(cls, labels: Sequence[str]) -> "PhaseTiming":
        return cls({label: 0.0 for label in labels})

    def add(self, label: str, span: float):
        assert span >= 0, f"Negative span for {label}: {span}"
        self.spans[label] = self.spans.get(label, 0.0) + span

    @property
    def total(self) -> float:
        return sum(self.spans.values())

    def rows(self) -> List[Tuple[str, float]]:
        return list(self.spans.items())


class Transport(Protocol):
    """What a state machine needs from the network it runs on."""

    def now(self) -> float:
        ...

    def send(self, src: str, dst: str, message: Message) -> None:
        ...

    def call_later(self, delay: float, callback: Callable[[], None]) -> None:
        ...


def run_steps(steps: Generator[Tuple[str, float], None, RegisterAck]) -> Tuple[RegisterAck, PhaseTiming]:
    """Drive a phase generator without a clock, adding up its spans."""
    timing = PhaseTiming.of(REGISTRATION_PHASES)
    try:
        while True:
            phase, span = next(steps)
            timing.add(phase, span)
    except StopIteration as stop:
        return stop.value, timing


# Query plans ###################################################################


@dataclass(frozen=True)
class Scan:
    """Leaf operator: floods one domain; the predicate is evaluated at the PSGs."""

    domain: str
    predicate: Predicate
    projection: Tuple[str, ...]
    ttl: int
    kind: QueryKind = QueryKind.SELECT
    sample_period_ms: Optional[int] = None
    lifetime_ms: Optional[int] = None

    def render(self) -> str:
        pred = self.predicate.render() or "true"
        extra = ""
        if self.sample_period_ms is not None:
            extra = f", every {self.sample_period_ms} ms for {self.lifetime_ms} ms"
        elif self.lifetime_ms is not None:
            extra = f", for {self.lifetime_ms} ms"
        return f"Scan({self.domain}, {pred}, ttl={self.ttl}{extra})"


@dataclass(frozen=True)
class Project:
    names: Tuple[str, ...]
    child: Scan

    def render(self) -> str:
        return f"Project[{', '.join(self.names)}] -> {self.child.render()}"


@dataclass(frozen=True)
class QueryPlan:
    root: Project
    query: QueryAst

    @property
    def scan(self) -> Scan:
        return self.root.child

    @property
    def scans(self) -> Tuple[Scan, ...]:
        return (self.root.child,)

    def operators(self) -> List[str]:
        return [type(self.root).__name__, type(self.root.child).__name__]

    def render(self) -> str:
        return self.root.render()


def plan(typed: TypedQuery) -> QueryPlan:
    """Project over a single Scan; selection is pushed into the Scan."""
    ast = typed.ast
    scan = Scan(
        domain=ast.domain,
        predicate=ast.predicate,
        projection=ast.projection,
        ttl=ast.ttl,
        kind=ast.kind,
        sample_period_ms=ast.sample_period.millis if ast.sample_period else None,
        lifetime_ms=ast.lifetime.millis if ast.lifetime else None,
    )
    return QueryPlan(Project(ast.projection, scan), ast)


# Collectors ####################################################################


@dataclass
class Collector:
    """Server-side end of a scan: gathers RESULT/NOTIFY messages until quiescent."""

    query_id: int
    query: QueryAst
    issued_at: float
    quiescence_ms: float
    results: List[Result] = field(default_factory=list)
    notifications: List[Notify] = field(default_factory=list)
    marks: Dict[str, float] = field(default_factory=dict)
    last_activity: float = 0.0
    first_arrival: Optional[float] = None
    pending: int = 0
    closed_at: Optional[float] = None
    injected_at: Optional[float] = None
    entry: Optional[PeerId] = None
    empty_entry: bool = False
    truncated: Set[PeerId] = field(default_factory=set)
    late: int = 0
    lookup_messages: int = 0
    on_close: List[Callable[["Collector"], None]] = field(default_factory=list, repr=False, compare=False)
    on_row: Optional[Callable[[List[str]], None]] = field(default=None, repr=False, compare=False)

    @property
    def closed(self) -> bool:
        return self.closed_at is not None

    @property
    def continuous(self) -> bool:
        return self.query.continuous

    @property
    def expected_samples(self) -> Optional[int]:
        q = self.query
        if not q.continuous:
            return None
        assert q.sample_period is not None and q.lifetime is not None
        period = q.sample_period.millis
        return q.lifetime.millis // period + 1 if period else 1

    @property
    def responders(self) -> Set[PeerId]:
        if self.query.kind is QueryKind.SUBSCRIBE:
            return {n.peer for n in self.notifications}
        return {r.peer for r in self.results}

    @property
    def response_time(self) -> float:
        assert self.closed_at is not None, "Collector still open"
        return self.closed_at - self.issued_at

    def deadline(self) -> Optional[float]:
        quiet = self.last_activity + self.quiescence_ms
        lifetime = self.query.lifetime
        if lifetime is None:
            if self.query.kind is QueryKind.SUBSCRIBE:
                return None
            return quiet
        if self.first_arrival is None:
            return quiet
        return max(quiet, self.first_arrival + lifetime.millis + self.quiescence_ms)

    def mark(self, phase: str, at: float):
        self.marks[phase] = at

    def timing(self) -> PhaseTiming:
        timing = PhaseTiming.of(QUERY_PHASES)
        prev = self.issued_at
        for phase in QUERY_PHASES:
            if phase in self.marks:
                timing.add(phase, self.marks[phase] - prev)
                prev = self.marks[phase]
        return timing

    def close(self, at: float):
        if self.closed:
            return
        self.closed_at = at
        self.mark("p2p_search", at)
        expected = self.expected_samples
        if expected is not None:
            counts: Dict[PeerId, int] = {}
            for r in self.results:
                counts[r.peer] = counts.get(r.peer, 0) + 1
            self.truncated = {p for p, n in counts.items() if n < expected}
            if self.truncated:
                logger.warning(
                    f"Query {self.query_id}: {len(self.truncated)} continuous stream(s) "
                    f"ended before {expected} samples"
                )
        for r in self.results:
            if r.all_null:
                logger.debug(f"Query {self.query_id}: {r.peer} qualified without any projected attribute")
        for callback in self.on_close:
            callback(self)

    def header(self) -> List[str]:
        if self.query.kind is QueryKind.SUBSCRIBE:
            return ["query_id", "peer", self.query.event, "timestamp"]
        head = ["query_id", "peer", *self.query.projection]
        if self.continuous:
            head += ["seq", "timestamp"]
        return head

    def row(self, message: Union[Result, Notify]) -> List[str]:
        if isinstance(message, Notify):
            value = "true" if message.value else "false"
            return [str(message.query_id), str(message.peer), value, _ms(message.timestamp)]
        row = [str(message.query_id), str(message.peer)]
        row += ["" if v is None else v.display() for _, v in message.values]
        if self.continuous:
            row += [str(message.seq), _ms(message.timestamp)]
        return row

    def rows(self) -> List[List[str]]:
        if self.query.kind is QueryKind.SUBSCRIBE:
            return [self.row(n) for n in self.notifications]
        return [self.row(r) for r in self.results]


def _ms(t: float) -> str:
    return f"{t:.3f}".rstrip("0").rstrip(".")


# Server ########################################################################


@dataclass
class PeerRecord:
    peer: PeerId
    address: str
    template: str
    schema: LocalSchema
    mapping: SchemaMapping
    candidates: List[MatchCandidate] = field(default_factory=list)


@dataclass
class ServerState:
    globals: Dict[str, GlobalSchema]
    manager: ContextSpaceManager
    matcher: MatcherState
    active: Dict[int, Collector] = field(default_factory=dict)
    peers: Dict[PeerId, PeerRecord] = field(default_factory=dict)
    by_address: Dict[str, PeerId] = field(default_factory=dict)
    next_uid: int = 1
    next_query_id: int = 1
    busy_until: float = 0.0

    def check(self) -> List[str]:
        problems = []
        if set(self.globals) != set(self.manager.rings):
            problems.append("Domain index keys differ from the global schema names")
        for ring in self.manager:
            problems += ring.check()
        for rec in self.peers.values():
            ring = self.manager.rings.get(rec.mapping.domain)
            if ring is None:
                continue
            if set(ring.memberships(rec.peer)) != set(rec.mapping.global_names):
                problems.append(f"{rec.peer}: cluster memberships differ from its mapping")
        return problems


@dataclass(frozen=True)
class SchemaDiff:
    peer: PeerId
    added: Tuple[str, ...]
    removed: Tuple[str, ...]
    joined: Tuple[str, ...]
    left: Tuple[str, ...]
    mapping: SchemaMapping


@dataclass
class ReviewReport:
    applied: List[Tuple[MatchCandidate, Decision]] = field(default_factory=list)
    refused: List[Tuple[MatchCandidate, str]] = field(default_factory=list)
    unmatched: List[str] = field(default_factory=list)


class Server:
    """The system server: schema manager, context space manager and query processor."""

    address = SERVER_ADDRESS

    def __init__(
        self,
        costs: Optional[CostModel] = None,
        degree: int = DEFAULT_DEGREE,
        matcher: Optional[MatcherState] = None,
        rng: Optional[np.random.Generator] = None,
        latency_max_ms: float = 20.0,
        quiescence_ms: float = 0.0,
    ):
        self.costs = costs or CostModel()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.latency_max_ms = latency_max_ms
        self.quiescence_ms = quiescence_ms
        self.state = ServerState(
            globals={},
            manager=ContextSpaceManager(degree),
            matcher=matcher or MatcherState.create(),
        )
        self.transport: Optional[Transport] = None

    # Schema and registration ###################################################

    @property
    def globals(self) -> Dict[str, GlobalSchema]:
        return self.state.globals

    def ring(self, domain: str) -> DomainRing:
        return self.state.manager[domain]

    def predefine(self, schema: Union[GlobalSchema, LocalSchema]) -> DomainRing:
        """Seed a global schema before any space registers."""
        if isinstance(schema, LocalSchema):
            schema = GlobalSchema.from_local(schema)
        current = self.state.globals.get(schema.domain_name)
        if current is not None:
            extra = [a for a in schema.attributes if a.name not in current]
            schema = current.with_attributes(extra)
        self.state.globals[schema.domain_name] = schema
        return self.state.manager.ensure_ring(schema)

    def _sync_rings(self, globals_: Dict[str, GlobalSchema]) -> Dict[str, List[str]]:
        self.state.globals = globals_
        created = {}
        for name, schema in globals_.items():
            before = len(self.state.manager.rings[name].clusters) if name in self.state.manager else 0
            ring = self.state.manager.ensure_ring(schema)
            created[name] = list(ring.clusters)[before:]
        return created

    def _parse_template(self, template: str) -> LocalSchema:
        local = parse_schema_template(template)
        violations = validate_schema(local)
        if violations:
            raise RegistrationError(
                f"Schema template rejected: {', '.join(str(v) for v in violations)}"
            )
        return local

    def _decide_provisionally(self, proposal: IntegrationProposal) -> Dict[int, Decision]:
        decisions, conflicts = provisional_decisions(proposal)
        for c in conflicts:
            c.status, c.conflict = Status.PENDING, True
            decisions[c.id] = Decision.REJECT
        if conflicts:
            logger.warning(
                f"{proposal.peer}: conflicting exact matches {[c.pair for c in conflicts]} "
                "flagged for review"
            )
        return decisions

    def registration_steps(
        self,
        template: str,
        address: str,
        latency: Callable[[], float] = lambda: 0.0,
    ) -> Generator[Tuple[str, float], None, RegisterAck]:
        """The registration pipeline, one ``(phase, span)`` pair per phase.

        Server state changes as the phases run; the ack is the generator's
        return value. A malformed template raises before anything changes.
        """
        costs = self.costs
        local = self._parse_template(template)
        existing = self.state.by_address.get(address)
        if existing is not None:
            rec = self.state.peers[existing]
            if rec.template == template:
                yield "registration_request", latency() + costs.registration_request_ms
                return self._ack(rec)
            logger.info(f"{address} registers a new schema; replacing {existing}")
            self.remove_peer(existing)

        peer = PeerId(self.state.next_uid, address)
        self.state.next_uid += 1
        yield "registration_request", latency() + costs.registration_request_ms

        proposal = match_schema(local, self.state.globals, self.state.matcher, peer)
        decisions = self._decide_provisionally(proposal)
        globals_, mapping = integrate(proposal, decisions, self.state.globals)
        enqueue(self.state.matcher, proposal)
        rec = PeerRecord(peer, address, template, local, mapping, list(proposal.candidates))
        self.state.peers[peer] = rec
        self.state.by_address[address] = peer
        yield "schema_matching", costs.schema_matching_ms * len(local.attributes)

        created = self._sync_rings(globals_)[mapping.domain]
        ack = self._ack(rec)
        yield "return_sc_list", latency() + costs.return_sc_list_ms + costs.cluster_create_ms * len(created)

        report = join(self.ring(mapping.domain), peer, mapping.global_names, self.rng)
        span = 0.0
        for name in report.joined:
            handshakes = [2 * latency() for _ in report.neighbors[name]]
            span += max(handshakes, default=0.0) + costs.join_processing_ms
        yield "p2p_connection_establishment", span
        logger.debug(f"Registered {peer} in {mapping.domain} ({len(report.joined)} clusters)")
        return ack

    def _ack(self, rec: PeerRecord) -> RegisterAck:
        ring = self.ring(rec.mapping.domain)
        sc_list = tuple(
            (ring.domain, name, ring.clusters[name].head) for name in rec.mapping.global_names
        )
        return RegisterAck(rec.peer, sc_list, rec.mapping)

    def register_space(
        self, template: str, address: str, latency: Callable[[], float] = lambda: 0.0
    ) -> Tuple[RegisterAck, PhaseTiming]:
        return run_steps(self.registration_steps(template, address, latency))

    def record(self, peer: PeerId) -> PeerRecord:
        try:
            return self.state.peers[peer]
        except KeyError:
            raise UnknownPeerError(f"{peer} is not registered")

    def _move(self, rec: PeerRecord, mapping: SchemaMapping) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        ring = self.ring(mapping.domain)
        old, new = set(rec.mapping.global_names), set(mapping.global_names)
        left = leave(ring, rec.peer, [n for n in ring.positions[1:] if n in old - new]).left
        joined = join(ring, rec.peer, [n for n in mapping.global_names if n not in old], self.rng).joined
        rec.mapping = mapping
        return joined, left

    def _send(self, dst: str, message: Message):
        if self.transport is None:
            logger.debug(f"No transport; {message.kind} to {dst} not sent")
            return
        self.transport.send(self.address, dst, message)

    def update_schema(self, peer: PeerId, template: str) -> SchemaDiff:
        """Apply a PSG's changed local schema within its current domain."""
        rec = self.record(peer)
        local = self._parse_template(template)
        domain = rec.mapping.domain
        proposal = match_schema(local, self.state.globals, self.state.matcher, peer, target=domain)
        decisions = self._decide_provisionally(proposal)
        globals_, mapping = integrate(proposal, decisions, self.state.globals, count_member=False)
        self._drop_candidates(rec)
        enqueue(self.state.matcher, proposal)
        self._sync_rings(globals_)

        before = rec.schema
        joined, left = self._move(rec, mapping)
        rec.schema, rec.template, rec.candidates = local, template, list(proposal.candidates)
        self._send(rec.address, MappingUpdate(mapping))
        diff = SchemaDiff(
            peer,
            tuple(n for n in local.names if n not in before),
            tuple(n for n in before.names if n not in local),
            joined,
            left,
            mapping,
        )
        logger.info(f"Updated {peer}: +{list(diff.added)} -{list(diff.removed)}")
        return diff

    def _drop_candidates(self, rec: PeerRecord):
        stale = {id(c) for c in rec.candidates}
        self.state.matcher.queue = [c for c in self.state.matcher.queue if id(c) not in stale]

    def remove_peer(self, peer: PeerId):
        """Forget a departed peer: memberships, mapping and its review candidates."""
        rec = self.state.peers.pop(peer, None)
        if rec is None:
            return
        if self.state.by_address.get(rec.address) == peer:
            del self.state.by_address[rec.address]
        ring = self.state.manager.rings.get(rec.mapping.domain)
        if ring is not None:
            leave(ring, peer)
        self._drop_candidates(rec)
        schema = self.state.globals.get(rec.mapping.domain)
        if schema is not None and schema.member_count > 0:
            self.state.globals[schema.domain_name] = schema.with_member_count(schema.member_count - 1)

    # Review ####################################################################

    def remap(self, peer: PeerId) -> Optional[SchemaMapping]:
        """Recompute a peer's mapping from its candidates' current statuses.

        Returns the new mapping if it changed; the PSG gets a MAPPING_UPDATE and
        its cluster memberships follow.
        """
        rec = self.record(peer)
        live = [c for c in rec.candidates if c.status is not Status.REJECTED]
        proposal = IntegrationProposal(rec.schema, rec.mapping.domain, live, peer=peer)
        decisions, conflicts = provisional_decisions(proposal)
        for c in conflicts:
            decisions[c.id] = Decision.REJECT
            c.status = Status.PENDING
        globals_, mapping = integrate(proposal, decisions, self.state.globals, count_member=False)
        if mapping == rec.mapping:
            return None
        self._sync_rings(globals_)
        joined, left = self._move(rec, mapping)
        self._send(rec.address, MappingUpdate(mapping))
        logger.info(f"Remapped {peer}: joined {list(joined)}, left {list(left)}")
        return mapping

    def decide(self, candidate: Union[int, MatchCandidate], decision: Union[str, Decision]) -> Optional[SchemaMapping]:
        """Apply one administrator decision and propagate it to the peer's mapping.

        Raises:
            DecisionError: when the candidate is not pending.
            MappingConflictError: when a confirmation collides with a confirmed pair of the same peer.
        """
        matcher = self.state.matcher
        c = matcher.candidate(candidate) if isinstance(candidate, int) else candidate
        decision = Decision.parse(decision) if not isinstance(decision, Decision) else decision
        if c.status is not Status.PENDING:
            raise DecisionError(f"{c!r} is no longer pending")
        rec = self.state.peers.get(c.peer) if c.peer is not None else None
        if decision is Decision.CONFIRM and rec is not None:
            clashing = [
                x
                for x in rec.candidates
                if x is not c
                and x.status is Status.CONFIRMED
                and (x.local_name == c.local_name or x.global_name == c.global_name)
            ]
            if clashing:
                raise MappingConflictError([x.pair for x in clashing] + [c.pair])
        apply_decision(matcher, c, decision)
        if rec is None:
            return None
        return self.remap(rec.peer)

    def review(self, lines: Iterable[DecisionLine]) -> ReviewReport:
        """Apply the lines of an edited review queue.

        Each line decides every pending candidate with that pair; refused
        decisions are reported, not raised.
        """
        report = ReviewReport()
        for line in lines:
            local_name, global_ref, decision = line.local_name, line.global_ref, line.decision
            matching = [
                c
                for c in list(self.state.matcher.queue)
                if c.local_name == local_name and c.global_ref == global_ref
            ]
            if not matching:
                report.unmatched.append(f"{local_name}\t{global_ref}")
            for c in matching:
                try:
                    self.decide(c, decision)
                    report.applied.append((c, decision))
                except (MappingConflictError, DecisionError) as e:
                    report.refused.append((c, str(e)))
        return report

    def accept_all(self) -> ReviewReport:
        """Settle the queue as provisionally assigned: used pairs confirmed, the rest rejected."""
        report = ReviewReport()
        for c in list(self.state.matcher.queue):
            if c.status is not Status.PENDING:
                continue
            rec = self.state.peers.get(c.peer) if c.peer is not None else None
            used = rec is not None and rec.mapping.to_global(c.local_name) == c.global_name
            decision = Decision.CONFIRM if used else Decision.REJECT
            try:
                self.decide(c, decision)
                report.applied.append((c, decision))
            except (MappingConflictError, DecisionError) as e:
                report.refused.append((c, str(e)))
        return report

    # Queries ###################################################################

    def quiescence(self, ttl: int) -> float:
        if self.quiescence_ms > 0:
            return self.quiescence_ms
        return 3 * (self.latency_max_ms + self.costs.psg_eval_ms) * ttl

    def submit(self, query: Union[str, QueryAst], ttl: Optional[int] = None) -> Collector:
        """Parse, validate and plan a query, then start its scan after the parse cost.

        Raises:
            CqlSyntaxError, QueryValidationError: before anything is scheduled.
        """
        assert self.transport is not None, "Queries need a transport"
        ast = parse(query) if isinstance(query, str) else query
        if ttl is not None:
            ast = ast.with_ttl(ttl)
        query_plan = plan(validate(ast, self.state.globals))
        now = self.transport.now()
        qid = self.state.next_query_id
        self.state.next_query_id += 1
        collector = Collector(qid, ast, now, self.quiescence(ast.ttl), last_activity=now)
        self.state.active[qid] = collector
        logger.debug(f"Query {qid}: {query_plan.render()}")
        self.transport.call_later(self.costs.query_parse_ms, partial(self.exec_scan, query_plan, collector))
        return collector

    def exec_scan(self, query_plan: QueryPlan, collector: Collector):
        """Step 1: find the domain's CSG in the index and hand it the request."""
        assert self.transport is not None
        collector.mark("parse", self.transport.now())
        ring = self.ring(query_plan.scan.domain)
        assert ring.csg is not None
        request = LookupRequest(collector.query_id, query_plan.query, query_plan.scan.ttl, self.address)
        self.transport.call_later(
            self.costs.space_lookup_ms,
            partial(self._send, ring.csg.address, Lookup(request)),
        )

    def ping_heads(self, nonce: int):
        """Each ring's CSG pings its cluster heads; heads answer with PONG."""
        assert self.transport is not None
        for ring in self.state.manager:
            assert ring.csg is not None and ring.csg.liveness is not None
            for cluster in ring.clusters.values():
                if cluster.head is None:
                    continue
                ring.csg.liveness.ping(cluster.head, nonce)
                self.transport.send(ring.csg.address, cluster.head.address, Ping(nonce))

    def handle_csg(self, address: str, message: Message):
        """Steps 2 and 3 at a CSG: route to the entry cluster and inject the request."""
        assert self.transport is not None
        ring = self.state.manager.csg_of(address)
        if ring is None:
            return
        if isinstance(message, Pong):
            assert ring.csg is not None and ring.csg.liveness is not None
            ring.csg.liveness.pong(message.peer, message.nonce, self.transport.now())
            return
        if not isinstance(message, Lookup):
            return
        request = message.request
        collector = self.state.active.get(request.query_id)
        if collector is None or collector.closed:
            return
        now = self.transport.now()
        collector.mark("space_lookup", now)
        try:
            entry = route_to_entry(ring, request)
        except EmptyEntryError as e:
            logger.info(f"Query {request.query_id}: {e}")
            collector.empty_entry = True
            collector.mark("cluster_lookup", now)
            collector.close(now)
            return
        walk = ring.position(entry.attribute)
        self.transport.call_later(
            self.costs.cluster_lookup_ms * walk,
            partial(self._inject, collector, replace(request, cluster=entry.attribute), entry.head),
        )

    def _inject(self, collector: Collector, request: LookupRequest, head: Optional[PeerId]):
        assert self.transport is not None
        now = self.transport.now()
        collector.mark("cluster_lookup", now)
        collector.injected_at = collector.last_activity = now
        collector.entry = head
        if head is None:
            collector.empty_entry = True
            collector.close(now)
            return
        self._send(head.address, Lookup(request))
        self._arm(collector)

    def _arm(self, collector: Collector):
        assert self.transport is not None
        deadline = collector.deadline()
        if deadline is None:
            return
        delay = max(deadline - self.transport.now(), 0.0)
        self.transport.call_later(delay, partial(self._maybe_close, collector))

    def _maybe_close(self, collector: Collector):
        assert self.transport is not None
        if collector.closed:
            return
        now = self.transport.now()
        deadline = collector.deadline()
        if deadline is None:
            return
        if collector.pending == 0 and now >= deadline:
            collector.close(now)
            logger.debug(f"Query {collector.query_id} closed at t={now:.1f} with {len(collector.results)} results")
        elif collector.pending and now >= deadline:
            self.transport.call_later(max(self.state.busy_until - now, 0.0), partial(self._maybe_close, collector))
        else:
            self._arm(collector)

    def close(self, query_id: int):
        assert self.transport is not None
        collector = self.state.active[query_id]
        collector.close(self.transport.now())

    def handle(self, src: str, message: Message):
        if isinstance(message, (Result, Notify)):
            self._ingest(message)
        elif isinstance(message, Update):
            try:
                self.update_schema(message.peer, message.template)
            except UserError as e:
                logger.warning(f"Update from {src} rejected: {e}")

    def _ingest(self, message: Union[Result, Notify]):
        """Results are ingested one at a time by the server's single writer."""
        assert self.transport is not None
        collector = self.state.active.get(message.query_id)
        if collector is None or collector.closed:
            if collector is not None:
                collector.late += 1
            return
        now = self.transport.now()
        start = max(now, self.state.busy_until)
        self.state.busy_until = start + self.costs.result_ingest_ms
        collector.pending += 1
        collector.last_activity = max(collector.last_activity, now)
        if collector.first_arrival is None:
            collector.first_arrival = now
        self.transport.call_later(self.state.busy_until - now, partial(self._accept, collector, message))

    def _accept(self, collector: Collector, message: Union[Result, Notify]):
        assert self.transport is not None
        collector.pending -= 1
        collector.last_activity = max(collector.last_activity, self.transport.now())
        if collector.closed:
            collector.late += 1
            return
        if isinstance(message, Result):
            collector.results.append(message)
        else:
            collector.notifications.append(message)
        if collector.on_row is not None:
            collector.on_row(collector.row(message))


# PSG ###########################################################################


class ContextStore:
    """Append-only history of ``(attribute, value, timestamp)`` records at a PSG."""

    def __init__(self):
        self._times: Dict[str, List[float]] = {}
        self._values: Dict[str, List[AttributeValue]] = {}

    def append(self, attribute: str, value: AttributeValue, timestamp: float):
        times = self._times.setdefault(attribute, [])
        assert not times or times[-1] <= timestamp, f"{attribute}: history must be time ordered"
        times.append(timestamp)
        self._values.setdefault(attribute, []).append(value)

    def range(self, attribute: str, start: float, end: float) -> List[Tuple[AttributeValue, float]]:
        """Records with ``start <= timestamp < end``, in time order."""
        times = self._times.get(attribute, [])
        lo, hi = bisect_left(times, start), bisect_left(times, end)
        return list(zip(self._values[attribute][lo:hi], times[lo:hi])) if hi > lo else []

    def __len__(self) -> int:
        return sum(len(t) for t in self._times.values())


@dataclass
class ContinuousJob:
    query_id: int
    projection: Tuple[Tuple[str, str], ...]  # (global, local)
    period_ms: int
    lifetime_ms: int
    origin: str
    started_at: float
    pushed: int = 0
    cancelled: bool = False

    @property
    def expected(self) -> int:
        return self.lifetime_ms // self.period_ms + 1 if self.period_ms else 1

    def sample_times(self) -> List[float]:
        return [self.started_at + k * self.period_ms for k in range(self.expected)]


@dataclass
class Subscription:
    sub: Subscribe
    started_at: float
    last_value: Optional[bool] = None
    sent: int = 0
    cancelled: bool = False


@dataclass
class PsgState:
    profile: SpaceProfile
    mapping: SchemaMapping
    jobs: Dict[int, ContinuousJob] = field(default_factory=dict)
    subscriptions: Dict[int, Subscription] = field(default_factory=dict)
    store: ContextStore = field(default_factory=ContextStore)

    @property
    def peer(self) -> PeerId:
        return self.profile.peer

    @property
    def schema(self) -> LocalSchema:
        return self.profile.schema

    def value(self, name: str, t: float) -> Optional[AttributeValue]:
        """Data service: the current local value of ``name``, rules included."""
        rule = self.profile.event_rules.get(name)
        if rule is not None:
            return AttributeValue.boolean(rule.evaluate(lambda n: self.value(n, t)))
        source = self.profile.data.get(name)
        if source is None:
            return None
        if isinstance(source, StepSignal):
            return source.value_at(t)
        return source

    def visible(self, name: str, t: float, unmapped: Iterable[str] = ()) -> Optional[AttributeValue]:
        """Value a query may see: nothing for unknown, unmapped or private attributes."""
        if name in unmapped:
            return None
        attr = self.schema.attribute(name)
        if attr is None or attr.is_private:
            return None
        return self.value(name, t)

    def change_times(self, names: Iterable[str]) -> List[float]:
        times: Set[float] = set()
        for name in names:
            rule = self.profile.event_rules.get(name)
            if rule is not None:
                times.update(self.change_times(rule.attributes()))
                continue
            source = self.profile.data.get(name)
            if isinstance(source, StepSignal):
                times.update(source.change_times())
        return sorted(times)


def psg_evaluate(psg: PsgState, request: LookupRequest, now: float) -> Optional[Result]:
    """Local query processor: a RESULT if every predicate atom holds right now."""
    local = rewrite_to_local(request.query, psg.mapping)
    lookup = partial(psg.visible, t=now, unmapped=local.unmapped)
    if not local.predicate.evaluate(lookup):
        return None
    values = tuple((g, lookup(loc)) for g, loc in zip(request.projection, local.projection))
    return Result(request.query_id, psg.peer, values, now)


def event_timeline(psg: PsgState, sub: Subscribe, start: float) -> List[Tuple[float, bool]]:
    """NOTIFY instants of a subscription: the initial value, then every transition."""
    end = start + sub.lifetime_ms if sub.lifetime_ms is not None else float("inf")

    def current(t: float) -> bool:
        v = psg.value(sub.event, t)
        return bool(v is not None and v.value)

    out = [(start, current(start))]
    for t in psg.change_times([sub.event]):
        if start < t < end:
            v = current(t)
            if v != out[-1][1]:
                out.append((t, v))
    return out


def history_query(psg: PsgState, attribute: str, start: float, end: float) -> List[Tuple[AttributeValue, float]]:
    if attribute not in psg.schema:
        raise UnknownAttributeError(f"{psg.peer} has no attribute '{attribute}'")
    return psg.store.range(attribute, start, end)


class SpaceGateway:
    """A PSG as a message-driven state machine."""

    def __init__(
        self,
        profile: SpaceProfile,
        costs: Optional[CostModel] = None,
        neighbors: Callable[[str], Iterable[PeerId]] = lambda cluster: (),
        mapping: Optional[SchemaMapping] = None,
    ):
        self.costs = costs or CostModel()
        self.state = PsgState(profile, mapping or SchemaMapping.identity(profile.schema, profile.peer))
        self.overlay = PeerOverlayState(profile.peer)
        self.neighbors = neighbors
        self.transport: Optional[Transport] = None
        self.monitor = None
        self.alive = True

    @property
    def peer(self) -> PeerId:
        return self.state.peer

    @property
    def address(self) -> str:
        return self.peer.address

    def depart(self):
        """Silent departure: nothing is sent and pending work stops."""
        self.alive = False
        for job in self.state.jobs.values():
            job.cancelled = True
        for s in self.state.subscriptions.values():
            s.cancelled = True

    def announce(self, clusters: Iterable[str]):
        """Send JOIN to the neighbors the server linked this PSG to in ``clusters``."""
        assert self.transport is not None
        domain = self.state.mapping.domain
        for cluster in clusters:
            for neighbor in sorted(self.neighbors(cluster)):
                self.transport.send(self.address, neighbor.address, Join((domain, cluster), self.peer))

    def ping(self, neighbor: PeerId, nonce: int):
        assert self.transport is not None
        self.overlay.ping(neighbor, nonce)
        self.transport.send(self.address, neighbor.address, Ping(nonce))

    def change_schema(self, template: str):
        """Adopt a new local schema and report it to the server, which answers with MAPPING_UPDATE.

        Data of attributes the new schema drops is discarded.
        """
        assert self.transport is not None
        if not self.alive:
            return
        schema = parse_schema_template(template)
        profile = self.state.profile
        data = {k: v for k, v in profile.data.items() if k in schema}
        self.state.profile = replace(profile, schema=schema, data=data)
        self.transport.send(self.address, SERVER_ADDRESS, Update(self.peer, template))

    def handle(self, src: str, message: Message):
        if not self.alive:
            return
        if isinstance(message, Lookup):
            self.on_lookup(message)
        elif isinstance(message, Ping):
            assert self.transport is not None
            self.transport.send(self.address, src, Pong(message.nonce, self.peer))
        elif isinstance(message, Pong):
            assert self.transport is not None
            self.overlay.pong(message.peer, message.nonce, self.transport.now())
        elif isinstance(message, Join):
            assert self.transport is not None
            self.overlay.last_heard[message.peer] = self.transport.now()
        elif isinstance(message, MappingUpdate):
            before = set(self.state.mapping.global_names)
            self.state.mapping = message.mapping
            self.announce([n for n in message.mapping.global_names if n not in before])
        elif isinstance(message, RegisterAck):
            self.state.mapping = message.mapping

    def on_lookup(self, message: Lookup):
        assert self.transport is not None
        request = message.request
        step = flood_step(self.overlay, request, message.sender, self.neighbors(request.cluster))
        for neighbor, fwd in step.forwards:
            self.transport.send(self.address, neighbor.address, Lookup(fwd, self.peer))
        if self.monitor is not None:
            self.monitor.on_flood(request, self.peer, step)
        if step.evaluate:
            self.transport.call_later(self.costs.psg_eval_ms, partial(self.evaluate, request))

    def evaluate(self, request: LookupRequest):
        if not self.alive:
            return
        assert self.transport is not None
        now = self.transport.now()
        query = request.query
        if query.kind is QueryKind.SUBSCRIBE:
            local = rewrite_to_local(query, self.state.mapping)
            lookup = partial(self.state.visible, t=now, unmapped=local.unmapped)
            event = local.projection[0]
            if local.predicate.evaluate(lookup) and lookup(event) is not None:
                sub = Subscribe(
                    request.query_id,
                    event,
                    local.predicate,
                    query.lifetime.millis if query.lifetime else None,
                    request.origin,
                )
                handle_subscription(self, sub)
            return
        result = psg_evaluate(self.state, request, now)
        if result is None:
            return
        if query.continuous:
            assert query.sample_period is not None and query.lifetime is not None
            local = rewrite_to_local(query, self.state.mapping)
            job = ContinuousJob(
                request.query_id,
                tuple(zip(query.projection, local.projection)),
                query.sample_period.millis,
                query.lifetime.millis,
                request.origin,
                now,
            )
            run_continuous(self, job)
            return
        self.transport.send(self.address, request.origin, result)


def run_continuous(gateway: SpaceGateway, job: ContinuousJob):
    """Schedule ``floor(lifetime / period) + 1`` samples starting now."""
    assert gateway.transport is not None
    psg = gateway.state
    psg.jobs[job.query_id] = job
    now = gateway.transport.now()
    for seq, t in enumerate(job.sample_times()):
        gateway.transport.call_later(t - now, partial(_push_sample, gateway, job, seq))


def _push_sample(gateway: SpaceGateway, job: ContinuousJob, seq: int):
    if job.cancelled or not gateway.alive:
        return
    assert gateway.transport is not None
    psg = gateway.state
    now = gateway.transport.now()
    values = []
    for global_name, local_name in job.projection:
        v = psg.visible(local_name, now)
        if v is not None:
            psg.store.append(local_name, v, now)
        values.append((global_name, v))
    job.pushed += 1
    gateway.transport.send(gateway.address, job.origin, Result(job.query_id, psg.peer, tuple(values), now, seq))
    if job.pushed == job.expected:
        del psg.jobs[job.query_id]


def handle_subscription(gateway: SpaceGateway, sub: Subscribe):
    """Send the initial NOTIFY now and one per event transition until the lifetime ends."""
    assert gateway.transport is not None
    psg = gateway.state
    assert sub.query_id not in psg.subscriptions, f"Duplicate subscription {sub.query_id}"
    now = gateway.transport.now()
    record = psg.subscriptions[sub.query_id] = Subscription(sub, now)
    for t, value in event_timeline(psg, sub, now):
        gateway.transport.call_later(t - now, partial(_notify, gateway, record, value))


def _notify(gateway: SpaceGateway, record: Subscription, value: bool):
    if record.cancelled or not gateway.alive:
        return
    assert gateway.transport is not None
    now = gateway.transport.now()
    record.last_value = value
    record.sent += 1
    gateway.state.store.append(record.sub.event, AttributeValue.boolean(value), now)
    gateway.transport.send(
        gateway.address, record.sub.origin, Notify(record.sub.query_id, gateway.peer, value, now)
    )
