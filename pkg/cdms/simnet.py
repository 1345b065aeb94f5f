"""Deterministic discrete-event simulator and experiment harness.

A :class:`SimWorld` owns a ``simpy.Environment``, the server and one
:class:`~cdms.engine.SpaceGateway` per registered space. Messages travel
through :class:`SimNetwork`, which delays them by the configured latency model
and feeds every delivery into a running trace digest. Each world draws all of
its randomness from ``SeedSequence([seed, run])``, split per subsystem.
"""
import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np
import simpy
from dotenv import dotenv_values
from joblib import Parallel, delayed

from cdms.core import ConfigError, Configs, InvariantViolation
from cdms.cql import DEFAULT_TTL, Predicate, QueryAst, parse, rewrite_to_local
from cdms.engine import (
    REGISTRATION_PHASES,
    SERVER_ADDRESS,
    Collector,
    CostModel,
    PhaseTiming,
    Server,
    SpaceGateway,
)
from cdms.matcher import DEFAULT_WINDOW, MatcherState, SchemaMapping
from cdms.messages import Lookup, Message, Register
from cdms.metrics import Metrics, is_non_decreasing, mean_timing, recall, summarize
from cdms.model import (
    AttributeValue,
    PeerId,
    SpaceProfile,
    StepSignal,
    parse_schema_template,
    render_schema_template,
    schema_of,
    validate_profile,
)
from cdms.overlay import (
    DEFAULT_DEGREE,
    DEFAULT_MAX_MISSED,
    FloodStep,
    LookupRequest,
    bfs_reachable,
    detect_failure,
    route_to_entry,
)
from cdms.utils.logging import getLogger

logger = getLogger(__name__)

VOCABULARY: Dict[str, Tuple[str, ...]] = {
    "HOME": (
        "temperature", "humidity", "light", "noise", "smoke", "motion", "door", "window",
        "heater", "boiler", "kettle", "oven", "fridge", "freezer", "toaster", "stove",
        "curtain", "blind", "carpet", "sofa", "bed", "pillow", "lamp", "socket",
        "meter", "radiator", "garage", "garden", "sprinkler", "faucet", "shower", "bathtub",
        "laundry", "dryer", "vacuum", "alarm", "chimney", "attic", "basement", "mailbox",
    ),
    "OFFICE": (
        "printer", "scanner", "projector", "whiteboard", "desk", "chair", "cabinet", "shredder",
        "router", "server", "badge", "elevator", "stairwell", "corridor", "pantry", "copier",
        "monitor", "keyboard", "webcam", "microphone", "speaker", "thermostat", "ventilation",
        "sunlight", "occupancy", "vending", "reception", "parking", "cubicle", "partition",
        "plant", "clock", "calendar", "headset", "telephone", "fax", "stapler", "binder",
        "folder", "envelope",
    ),
    "SHOP": (
        "shelf", "checkout", "cashier", "basket", "trolley", "barcode", "receipt", "discount",
        "price", "inventory", "aisle", "mannequin", "hanger", "mirror", "fitting", "entrance",
        "escalator", "banner", "poster", "coupon", "wallet", "queue", "turnstile", "footfall",
        "refund", "delivery", "warehouse", "pallet", "forklift", "label", "scale", "display",
        "counter", "till", "voucher", "membership", "loyalty", "promotion", "cart", "gift",
    ),
}
DOMAINS = tuple(VOCABULARY)

# Four links per join keep the head's eccentricity well below 7 hops at 1000 peers.
CALIBRATED_DEGREE = DEFAULT_DEGREE
SIZE_RANGE = (200, 1000)
QUALIFYING_MIN = 100
STREAMS = ("topology", "spaces", "data", "renames", "latency", "waves", "churn")
COST_FIELDS = tuple(f.name for f in fields(CostModel))

_DESCRIPTIONS = {
    "num_domains": "Number of context domains in generated worlds",
    "spaces_per_run": "Number of spaces in the query cluster",
    "attrs_per_space": "Attributes per generated space",
    "domain_attr_pool_size": "Attribute pool size per domain",
    "background_spaces": "Extra spaces registered outside the query cluster",
    "degree": "Neighbors sampled when a peer joins a semantic cluster",
    "latency_min_ms": "Lower bound of the uniform per-hop latency",
    "latency_max_ms": "Upper bound of the uniform per-hop latency",
    "ttl": "Default query TTL",
    "seed": "Base random seed",
    "runs": "Independent runs per sweep point",
    "quiescence_ms": "Collector quiescence window. If `0`, 3 x (latency_max_ms + psg_eval_ms) x ttl is used",
    "qualifying_fraction": "Share of query-cluster peers holding a qualifying value",
    "rename_fraction": "Probability that a generated attribute gets a local name variant",
    "predefine_globals": "Whether experiment domains start with predefined global schemas",
    "match_threshold": "Share of attributes that must match for schema integration",
    "accuracy_window": "Decisions kept per criterion for weight estimation",
    "ping_period_ms": "Interval between liveness ping rounds",
    "ping_max_missed": "Consecutive missed pongs before a neighbor is dropped",
    "churn_fraction": "Share of the query cluster departing in the churn experiment",
    "registration_request_ms": "Server cost of receiving a registration request",
    "schema_matching_ms": "Schema matching cost per local attribute",
    "return_sc_list_ms": "Cost of building and returning the SC list",
    "cluster_create_ms": "Cost per semantic cluster generated by a CSG",
    "join_processing_ms": "Processing cost per joined cluster",
    "query_parse_ms": "Query parsing and planning cost",
    "space_lookup_ms": "Domain index lookup cost",
    "cluster_lookup_ms": "CSG routing cost per ring position walked",
    "psg_eval_ms": "Local query evaluation cost at a PSG",
    "result_ingest_ms": "Server cost of ingesting one result",
}


@dataclass(frozen=True)
class SimConfig:
    num_domains: int = 3
    spaces_per_run: int = 1000
    attrs_per_space: int = 30
    domain_attr_pool_size: int = 40
    background_spaces: int = 60
    degree: int = CALIBRATED_DEGREE
    latency_min_ms: float = 5.0
    latency_max_ms: float = 20.0
    ttl: int = DEFAULT_TTL
    seed: int = 42
    runs: int = 30
    quiescence_ms: float = 0.0
    qualifying_fraction: float = 0.2
    rename_fraction: float = 0.1
    predefine_globals: int = 1
    match_threshold: float = 0.5
    accuracy_window: int = DEFAULT_WINDOW
    ping_period_ms: float = 30000.0
    ping_max_missed: int = DEFAULT_MAX_MISSED
    churn_fraction: float = 0.1
    registration_request_ms: float = 20.0
    schema_matching_ms: float = 1.0
    return_sc_list_ms: float = 40.0
    cluster_create_ms: float = 10.0
    join_processing_ms: float = 5.0
    query_parse_ms: float = 2.0
    space_lookup_ms: float = 1.0
    cluster_lookup_ms: float = 2.0
    psg_eval_ms: float = 1.0
    result_ingest_ms: float = 1.0

    @staticmethod
    def configs() -> Configs:
        c = Configs()
        for f in fields(SimConfig):
            kwargs: Dict[str, Any] = {}
            if f.name == "predefine_globals":
                kwargs["choices"] = [0, 1]
            c.add(
                name=f.name,
                type=f.type,
                default=f.default,
                description=_DESCRIPTIONS[f.name],
                **kwargs,
            )
        return c

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: Optional["SimConfig"] = None) -> "SimConfig":
        """Apply ``values`` (strings or typed) on top of ``base``; unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(unknown)}")
        coerced = {}
        for key, raw in values.items():
            if raw is None:
                raise ConfigError(f"Config key '{key}' has no value")
            try:
                coerced[key] = types[key](raw)
            except (TypeError, ValueError):
                raise ConfigError(f"Config key '{key}' expects {types[key].__name__}, got '{raw}'")
        return replace(base or cls(), **coerced)

    @classmethod
    def from_file(cls, path, base: Optional["SimConfig"] = None) -> "SimConfig":
        """Read a flat ``key=value`` file."""
        try:
            with open(path, "r") as f:
                values = dotenv_values(stream=f)
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        return cls.from_mapping(values, base)

    @property
    def costs(self) -> CostModel:
        return CostModel(**{k: getattr(self, k) for k in COST_FIELDS})

    def problems(self) -> List[str]:
        out = []
        if not 1 <= self.num_domains <= len(DOMAINS):
            out.append(f"num_domains must be within 1..{len(DOMAINS)}")
        pool_max = min(len(v) for v in VOCABULARY.values())
        if not 1 <= self.domain_attr_pool_size <= pool_max:
            out.append(f"domain_attr_pool_size must be within 1..{pool_max}")
        if not 1 <= self.attrs_per_space <= self.domain_attr_pool_size:
            out.append("attrs_per_space must be within 1..domain_attr_pool_size")
        if self.spaces_per_run < 1:
            out.append("spaces_per_run must be at least 1")
        if self.background_spaces < 0:
            out.append("background_spaces must be non-negative")
        if self.background_spaces and self.attrs_per_space >= self.domain_attr_pool_size:
            out.append("background spaces need an attribute pool larger than attrs_per_space")
        for name in ("degree", "ttl", "runs", "accuracy_window", "ping_max_missed"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be at least 1")
        for name in ("latency_min_ms", "quiescence_ms") + COST_FIELDS:
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if self.latency_max_ms < self.latency_min_ms:
            out.append("latency_max_ms must not be below latency_min_ms")
        for name in ("qualifying_fraction", "rename_fraction", "churn_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} must be within [0, 1]")
        if not 0.0 < self.match_threshold <= 1.0:
            out.append("match_threshold must be within (0, 1]")
        if not 2 * self.latency_max_ms < self.ping_period_ms:
            out.append("ping_period_ms must exceed a round trip (2 x latency_max_ms)")
        return out

    def validate(self) -> "SimConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("Invalid simulation config: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# Network #######################################################################


class SimNetwork:
    """Simulated transport over a simpy environment.

    LOOKUP forwards inside a cluster share one latency draw per (query, hop)
    so a flood advances in synchronous waves; every other message draws its
    own latency. Simultaneous events run in scheduling order. A query's wave
    and forward count are kept until :meth:`forget` drops them.
    """

    def __init__(
        self,
        env: simpy.Environment,
        latency_rng: np.random.Generator,
        wave_rng: np.random.Generator,
        latency_min_ms: float = 5.0,
        latency_max_ms: float = 20.0,
        keep_trace: bool = False,
    ):
        self.env = env
        self.latency_rng = latency_rng
        self.wave_rng = wave_rng
        self.latency_min_ms = latency_min_ms
        self.latency_max_ms = latency_max_ms
        self.endpoints: Dict[str, Callable[[str, Message], None]] = {}
        self.departed: Set[str] = set()
        self.sent: Counter = Counter()
        self.lookup_forwards: Counter = Counter()
        self.dropped = 0
        self.events = 0
        self.last_time = 0.0
        self.trace: Optional[List[str]] = [] if keep_trace else None
        self.trace_digest = hashlib.sha256(b"cdms").hexdigest()
        # query_id -> (hops, delay) of the wave in flight
        self._waves: Dict[int, Tuple[int, float]] = {}

    def __getstate__(self):
        d = dict(self.__dict__)
        d["env"] = None
        return d

    def now(self) -> float:
        return float(self.env.now)

    def latency(self) -> float:
        if self.latency_max_ms == self.latency_min_ms:
            return self.latency_min_ms
        return float(self.latency_rng.uniform(self.latency_min_ms, self.latency_max_ms))

    def wave_latency(self, request: LookupRequest) -> float:
        # Every copy of hop h is sent before the first copy of hop h + 1
        wave = self._waves.get(request.query_id)
        if wave is not None and wave[0] == request.hops:
            return wave[1]
        if self.latency_max_ms == self.latency_min_ms:
            delay = self.latency_min_ms
        else:
            delay = float(self.wave_rng.uniform(self.latency_min_ms, self.latency_max_ms))
        self._waves[request.query_id] = (request.hops, delay)
        return delay

    def forget(self, query_id: int) -> int:
        """Drop a finished query's wave; returns how many LOOKUP forwards it sent."""
        self._waves.pop(query_id, None)
        return self.lookup_forwards.pop(query_id, 0)

    def send(self, src: str, dst: str, message: Message):
        if isinstance(message, Lookup) and message.sender is not None:
            delay = self.wave_latency(message.request)
            self.lookup_forwards[message.request.query_id] += 1
        else:
            delay = self.latency()
        self.sent[message.kind] += 1
        self.call_later(delay, partial(self._deliver, src, dst, message))

    def _deliver(self, src: str, dst: str, message: Message):
        self.record(message.kind, message.digest())
        endpoint = self.endpoints.get(dst)
        if endpoint is None or dst in self.departed:
            self.dropped += 1
            return
        endpoint(src, message)

    def call_later(self, delay: float, callback: Callable[[], None]):
        assert delay >= 0, f"Cannot schedule into the past ({delay})"
        event = self.env.timeout(delay)
        event.callbacks.append(partial(self._fire, callback))

    def _fire(self, callback: Callable[[], None], _event=None):
        now = self.now()
        if now < self.last_time:
            raise InvariantViolation(f"Clock moved backward: {now} < {self.last_time}")
        self.last_time = now
        self.events += 1
        callback()

    def note(self, message: Message):
        """Account for a message exchanged outside the event queue."""
        self.sent[message.kind] += 1
        self.record(message.kind, message.digest())

    def record(self, kind: str, digest: str):
        line = f"t={_fmt(self.now())} {kind} {digest}"
        self.trace_digest = hashlib.sha256((self.trace_digest + line).encode("utf-8")).hexdigest()
        if self.trace is not None:
            self.trace.append(line)


def _fmt(t: float) -> str:
    return f"{t:.3f}".rstrip("0").rstrip(".")


def _drive(env: simpy.Environment, steps, timing: PhaseTiming):
    """Turn a ``(phase, span)`` generator into simulated waiting."""
    try:
        while True:
            phase, span = next(steps)
            timing.add(phase, span)
            yield env.timeout(span)
    except StopIteration as stop:
        return stop.value


@dataclass
class FloodMonitor:
    """Which peers evaluated which query, as observed by the gateways."""

    evaluated: Dict[int, Set[PeerId]] = field(default_factory=dict)
    duplicates: int = 0

    def on_flood(self, request: LookupRequest, peer: PeerId, step: FloodStep):
        if not step.evaluate:
            return
        seen = self.evaluated.setdefault(request.query_id, set())
        if peer in seen:
            self.duplicates += 1
        seen.add(peer)


# World #########################################################################


class SimWorld:
    def __init__(self, config: SimConfig, run: int = 0, keep_trace: bool = False):
        self.config = config
        self.run = run
        seq = np.random.SeedSequence([config.seed, run])
        self.rngs: Dict[str, np.random.Generator] = {
            name: np.random.default_rng(s) for name, s in zip(STREAMS, seq.spawn(len(STREAMS)))
        }
        self.env = simpy.Environment()
        self.clock = 0.0
        self.network = SimNetwork(
            self.env,
            self.rngs["latency"],
            self.rngs["waves"],
            config.latency_min_ms,
            config.latency_max_ms,
            keep_trace,
        )
        self.server = Server(
            costs=config.costs,
            degree=config.degree,
            matcher=MatcherState.create(window=config.accuracy_window, theta=config.match_threshold),
            rng=self.rngs["topology"],
            latency_max_ms=config.latency_max_ms,
            quiescence_ms=config.quiescence_ms,
        )
        self.server.transport = self.network
        self.network.endpoints[SERVER_ADDRESS] = self.server.handle
        self.gateways: Dict[PeerId, SpaceGateway] = {}
        self.monitor = FloodMonitor()
        self.registrations: Dict[PeerId, PhaseTiming] = {}
        self.query_domain: Optional[str] = None
        self.query_attribute: Optional[str] = None
        self.purged: List[PeerId] = []
        self._next_address = 1

    def __getstate__(self):
        d = dict(self.__dict__)
        d["clock"] = float(self.env.now)
        d["env"] = None
        return d

    def rebind(self, env: Optional[simpy.Environment] = None):
        """Attach a fresh event loop after unpickling; pending events are not kept."""
        self.env = env or simpy.Environment(initial_time=self.clock)
        self.network.env = self.env
        self.network.last_time = float(self.env.now)

    @property
    def now(self) -> float:
        return float(self.env.now)

    def new_address(self) -> str:
        address = f"psg-{self._next_address:04d}"
        self._next_address += 1
        return address

    # Registration ##############################################################

    def _csg_endpoint(self, address: str, src: str, message: Message):
        self.server.handle_csg(address, message)

    def _sync_csgs(self):
        for ring in self.server.state.manager:
            assert ring.csg is not None
            if ring.csg.address not in self.network.endpoints:
                self.network.endpoints[ring.csg.address] = partial(self._csg_endpoint, ring.csg.address)

    def neighbors(self, peer: PeerId, cluster: str) -> Set[PeerId]:
        gateway = self.gateways.get(peer)
        if gateway is None:
            return set()
        ring = self.server.state.manager.rings.get(gateway.state.mapping.domain)
        if ring is None or cluster not in ring.clusters:
            return set()
        return ring.clusters[cluster].neighbors(peer)

    def _register(self, template: str, address: str, data, rules):
        timing = PhaseTiming.of(REGISTRATION_PHASES)
        self.network.note(Register(address, template))
        steps = self.server.registration_steps(template, address, self.network.latency)
        ack = yield from _drive(self.env, steps, timing)
        self.network.note(ack)
        self._attach(ack, template, data, rules)
        self.registrations[ack.peer] = timing
        return ack, timing

    def register_space(
        self,
        template: str,
        data: Optional[Mapping[str, Any]] = None,
        rules: Optional[Mapping[str, Predicate]] = None,
        address: Optional[str] = None,
    ):
        """Run the registration pipeline in simulated time; returns ``(ack, timing)``."""
        proc = self.env.process(self._register(template, address or self.new_address(), data or {}, rules or {}))
        return self.env.run(until=proc)

    def _attach(self, ack, template: str, data, rules):
        for peer in [p for p, g in self.gateways.items() if g.address == ack.peer.address and p != ack.peer]:
            del self.gateways[peer]
        existing = self.gateways.get(ack.peer)
        if existing is not None:
            existing.handle(SERVER_ADDRESS, ack)
            return
        schema = parse_schema_template(template)
        profile = SpaceProfileBuilder.build(ack.peer, schema, data, rules)
        gateway = SpaceGateway(profile, self.config.costs, partial(self.neighbors, ack.peer), ack.mapping)
        gateway.transport = self.network
        gateway.monitor = self.monitor
        self.gateways[ack.peer] = gateway
        self.network.endpoints[gateway.address] = gateway.handle
        self.network.departed.discard(gateway.address)
        self._sync_csgs()
        gateway.announce(ack.mapping.global_names)

    def update_space(self, peer: PeerId, template: str) -> SchemaMapping:
        """The PSG sends UPDATE with its new template; returns the mapping it holds afterwards."""
        gateway = self.gateways[peer]
        gateway.change_schema(template)
        self.run_until_idle()
        self._sync_csgs()
        return gateway.state.mapping

    # Queries ###################################################################

    def submit(self, query: Union[str, QueryAst], ttl: Optional[int] = None) -> Collector:
        if ttl is None and isinstance(query, str):
            ttl = self.config.ttl
        collector = self.server.submit(query, ttl)
        collector.on_close.append(self._forget_query)
        return collector

    def _forget_query(self, collector: Collector):
        collector.lookup_messages = self.network.forget(collector.query_id)

    def run_until_closed(self, collector: Collector):
        while not collector.closed and self.env.peek() != float("inf"):
            self.env.step()
        if not collector.closed:
            self.server.close(collector.query_id)

    def run_until_idle(self):
        self.env.run()

    def query(self, query: Union[str, QueryAst], ttl: Optional[int] = None) -> Collector:
        collector = self.submit(query, ttl)
        self.run_until_closed(collector)
        return collector

    def experiment_query(self) -> str:
        assert self.query_domain and self.query_attribute, "World has no query cluster"
        a = self.query_attribute
        return f"SELECT {a} FROM {self.query_domain} WHERE {a} >= {QUALIFYING_MIN}"

    def live_gateways(self, domain: Optional[str] = None) -> List[SpaceGateway]:
        return [
            g
            for p, g in sorted(self.gateways.items())
            if g.alive and (domain is None or g.state.mapping.domain == domain)
        ]

    def qualifying(self, query: QueryAst, at: float) -> Set[PeerId]:
        """Brute-force oracle: live peers of the domain whose data satisfy the predicate."""
        out = set()
        for g in self.live_gateways(query.domain):
            local = rewrite_to_local(query, g.state.mapping)
            if local.predicate.evaluate(partial(g.state.visible, t=at, unmapped=local.unmapped)):
                out.add(g.peer)
        return out

    def reach(self, collector: Collector) -> Set[PeerId]:
        """BFS oracle: peers within ttl - 1 hops of the entry head."""
        if collector.entry is None:
            return set()
        ring = self.server.ring(collector.query.domain)
        request = LookupRequest(collector.query_id, collector.query, collector.query.ttl, SERVER_ADDRESS)
        cluster = route_to_entry(ring, request)
        if collector.entry not in cluster:
            return set()
        return bfs_reachable(cluster, collector.entry, collector.query.ttl)

    # Churn #####################################################################

    def depart(self, peer: PeerId):
        """Silent departure: the peer stops answering; nobody is told."""
        gateway = self.gateways[peer]
        gateway.depart()
        self.network.departed.add(gateway.address)

    def _ping_all(self, nonce: int):
        self._sync_csgs()
        pairs: Set[Tuple[PeerId, PeerId]] = set()
        for ring in self.server.state.manager:
            for cluster in ring.clusters.values():
                for u, v in cluster.graph.edges:
                    pairs.add((u, v))
                    pairs.add((v, u))
        for u, v in sorted(pairs):
            g = self.gateways.get(u)
            if g is not None and g.alive:
                g.ping(v, nonce)
        self.server.ping_heads(nonce)

    def _detect_all(self) -> List[PeerId]:
        failed: List[PeerId] = []
        states = [g.overlay for g in self.live_gateways()]
        for ring in self.server.state.manager:
            assert ring.csg is not None and ring.csg.liveness is not None
            states.append(ring.csg.liveness)
        for state in states:
            for peer in detect_failure(state, self.now, self.config.ping_max_missed):
                if peer in self.server.state.peers:
                    self.server.remove_peer(peer)
                    self.purged.append(peer)
                    failed.append(peer)
                    logger.info(f"{state.peer} reported {peer} as failed; purged")
        return failed

    def _liveness(self, rounds: int):
        detected: List[PeerId] = []
        for k in range(rounds):
            nonce = k + 1
            self._ping_all(nonce)
            yield self.env.timeout(self.config.ping_period_ms)
            detected += self._detect_all()
        return detected

    def run_liveness(self, rounds: Optional[int] = None) -> List[PeerId]:
        """Run ping rounds; returns the peers found failed and purged."""
        rounds = rounds if rounds is not None else self.config.ping_max_missed + 1
        proc = self.env.process(self._liveness(rounds))
        return self.env.run(until=proc)

    def check(self) -> List[str]:
        problems = self.server.state.check()
        registered = set(self.server.state.peers)
        for ring in self.server.state.manager:
            for name, cluster in ring.clusters.items():
                for peer in cluster.graph.nodes:
                    if peer not in registered:
                        problems.append(f"{ring.domain}.{name}: {peer} is a member but not registered")
                    for other in cluster.neighbors(peer):
                        if peer not in cluster.neighbors(other):
                            problems.append(f"{ring.domain}.{name}: asymmetric link {peer}-{other}")
        for peer in self.purged:
            if any(peer in c for ring in self.server.state.manager for c in ring.clusters.values()):
                problems.append(f"{peer} was purged but is still a cluster member")
        return problems

    def describe(self) -> Dict[str, Any]:
        state = self.server.state
        return {
            "clock_ms": self.now,
            "peers": len(state.peers),
            "departed": sorted(str(p) for p, g in self.gateways.items() if not g.alive),
            "domains": {
                ring.domain: {
                    "clusters": len(ring.clusters),
                    "members": len(ring.peers),
                    "global_attributes": len(state.globals[ring.domain].attributes),
                    "member_count": state.globals[ring.domain].member_count,
                }
                for ring in state.manager
            },
            "query_cluster": {
                "domain": self.query_domain,
                "attribute": self.query_attribute,
                "size": len(self.query_members()),
            },
            "review_queue": len(state.matcher.queue),
        }

    def query_members(self) -> List[PeerId]:
        if not self.query_domain or not self.query_attribute:
            return []
        ring = self.server.state.manager.rings.get(self.query_domain)
        if ring is None or self.query_attribute not in ring.clusters:
            return []
        return sorted(ring.clusters[self.query_attribute].members)


class SpaceProfileBuilder:
    """Wraps plain values into the data sources a PSG serves."""

    @staticmethod
    def source(value: Any):
        if isinstance(value, (AttributeValue, StepSignal)):
            return value
        return AttributeValue.of(value)

    @classmethod
    def build(cls, peer: PeerId, schema, data: Mapping[str, Any], rules: Mapping[str, Predicate]):
        profile = SpaceProfile(peer, schema, {k: cls.source(v) for k, v in data.items()}, dict(rules))
        violations = validate_profile(profile)
        if violations:
            raise InvariantViolation(f"Inconsistent profile for {peer}: {', '.join(map(str, violations))}")
        return profile


def _source_key(source) -> str:
    if isinstance(source, StepSignal):
        return source.initial.render() + "".join(f"@{t}:{v.render()}" for t, v in source.changes)
    return source.render()


def world_digest(world: SimWorld) -> str:
    """Fingerprint of schemas, overlay topology, mappings and space data."""
    h = hashlib.sha256()

    def put(*parts):
        h.update(("\t".join(str(p) for p in parts) + "\n").encode("utf-8"))

    state = world.server.state
    put("config", sorted(world.config.to_dict().items()), world.run)
    put("query", world.query_domain, world.query_attribute)
    for name in sorted(state.globals):
        put(render_schema_template(state.globals[name]), state.globals[name].member_count)
    for ring in sorted(state.manager, key=lambda r: r.domain):
        for name, cluster in ring.clusters.items():
            edges = sorted(tuple(sorted((u.uid, v.uid))) for u, v in cluster.graph.edges)
            put(ring.domain, name, cluster.head.uid if cluster.head else None, edges)
    for peer in sorted(state.peers):
        rec = state.peers[peer]
        put(peer.uid, rec.address, rec.mapping.domain, rec.mapping.pairs)
    for peer in sorted(world.gateways):
        data = world.gateways[peer].state.profile.data
        put(peer.uid, sorted((k, _source_key(v)) for k, v in data.items()))
    return h.hexdigest()


# World generation ##############################################################


def local_variant(name: str) -> str:
    return "local" + name[:1].upper() + name[1:]


def _draw_attributes(
    pool: Sequence[str], k: int, rng: np.random.Generator, include: Optional[str] = None, exclude: Optional[str] = None
) -> List[str]:
    others = [w for w in pool if w != include and w != exclude]
    need = k - (1 if include else 0)
    picked = [others[int(i)] for i in rng.choice(len(others), size=need, replace=False)]
    if include:
        picked.append(include)
    order = {w: i for i, w in enumerate(pool)}
    return sorted(picked, key=order.__getitem__)


def _space(
    world: SimWorld, domain: str, attrs: List[str], qualifies: bool, query_attribute: Optional[str]
) -> Tuple[str, Dict[str, AttributeValue]]:
    renames = world.rngs["renames"].random(len(attrs)) < world.config.rename_fraction
    values = world.rngs["data"].integers(0, QUALIFYING_MIN, size=len(attrs))
    local_names, data = [], {}
    for name, renamed, value in zip(attrs, renames, values):
        local = local_variant(name) if renamed else name
        if qualifies and name == query_attribute:
            value = world.rngs["data"].integers(QUALIFYING_MIN, 2 * QUALIFYING_MIN)
        local_names.append(local)
        data[local] = AttributeValue.number(int(value))
    template = render_schema_template(schema_of(domain, [(n, "number") for n in local_names]))
    return template, data


def build_world(config: SimConfig, run: int = 0, keep_trace: bool = False) -> SimWorld:
    """Generate and register every space of one experiment run.

    ``spaces_per_run`` spaces of the query domain all hold the query attribute
    and form the query cluster; an exact share of them hold qualifying values.
    Background spaces draw a domain at random and never hold the query
    attribute.
    """
    config.validate()
    world = SimWorld(config, run, keep_trace)
    domains = DOMAINS[: config.num_domains]
    pools = {d: VOCABULARY[d][: config.domain_attr_pool_size] for d in domains}
    if config.predefine_globals:
        for d in domains:
            world.server.predefine(schema_of(d, [(w, "number") for w in pools[d]]))
        world._sync_csgs()

    spaces = world.rngs["spaces"]
    qd = domains[int(spaces.integers(len(domains)))]
    qa = pools[qd][int(spaces.integers(len(pools[qd])))]
    n_qualifying = int(round(config.qualifying_fraction * config.spaces_per_run))
    qualifiers = set(int(i) for i in spaces.choice(config.spaces_per_run, size=n_qualifying, replace=False))
    plan: List[Tuple[str, Optional[int]]] = [(qd, i) for i in range(config.spaces_per_run)]
    plan += [(domains[int(spaces.integers(len(domains)))], None) for _ in range(config.background_spaces)]
    order = spaces.permutation(len(plan))

    logger.debug(f"Building world run={run}: query cluster {qd}.{qa}, {len(plan)} spaces")
    first_member: Optional[PeerId] = None
    for idx in order:
        domain, member = plan[int(idx)]
        if member is not None:
            attrs = _draw_attributes(pools[domain], config.attrs_per_space, spaces, include=qa)
        else:
            exclude = qa if domain == qd else None
            attrs = _draw_attributes(pools[domain], config.attrs_per_space, spaces, exclude=exclude)
        template, data = _space(world, domain, attrs, member in qualifiers, qa)
        ack, _ = world.register_space(template, data)
        if member is not None and first_member is None:
            first_member = ack.peer
            local = qa if qa in data else local_variant(qa)
            world.query_attribute = ack.mapping.to_global(local)
    world.query_domain = qd
    if config.predefine_globals:
        world.query_attribute = qa

    members = world.query_members()
    if len(members) != config.spaces_per_run:
        raise InvariantViolation(
            f"Query cluster {qd}.{world.query_attribute} has {len(members)} members, "
            f"expected {config.spaces_per_run}"
        )
    return world


# Experiments ###################################################################


def run_query_experiment(
    world: SimWorld, query: Optional[Union[str, QueryAst]] = None, ttl: Optional[int] = None
) -> Metrics:
    """Issue one query, run to collector close and score it against the oracle."""
    query = query if query is not None else world.experiment_query()
    dropped = world.network.dropped
    collector = world.submit(query, ttl if ttl is not None else world.config.ttl)
    world.run_until_closed(collector)
    at = collector.injected_at if collector.injected_at is not None else collector.issued_at
    qualifying = world.qualifying(collector.query, at)
    responding = collector.responders
    reached = world.monitor.evaluated.get(collector.query_id, set())
    return Metrics(
        recall=recall(responding, qualifying),
        response_time=collector.response_time,
        timing=collector.timing(),
        message_count=collector.lookup_messages,
        reached_count=len(reached),
        qualifying_count=len(qualifying),
        responding_count=len(responding),
        dropped_count=world.network.dropped - dropped,
    )


@dataclass
class TtlSweep:
    ttls: List[int]
    per_run: List[List[float]]

    @property
    def rows(self) -> List[Tuple[int, float, float, int]]:
        out = []
        for i, ttl in enumerate(self.ttls):
            s = summarize([r[i] for r in self.per_run])
            out.append((ttl, s.mean, s.stdev, s.runs))
        return out

    def mean_recall(self, ttl: int) -> float:
        return summarize([r[self.ttls.index(ttl)] for r in self.per_run]).mean

    @property
    def monotone_per_run(self) -> bool:
        return all(is_non_decreasing(r) for r in self.per_run)


def _ttl_run(config: SimConfig, run: int, ttls: List[int]) -> List[float]:
    world = build_world(config, run)
    return [run_query_experiment(world, ttl=t).recall for t in ttls]


def sweep_ttl(config: SimConfig, ttls: Iterable[int], runs: Optional[int] = None, jobs: int = 1) -> TtlSweep:
    """Mean recall per ttl. Each run builds one world and queries it at every ttl."""
    ttls = sorted(set(ttls))
    runs = runs or config.runs
    assert runs >= 1, "At least one run per point"
    per_run = Parallel(n_jobs=jobs)(delayed(_ttl_run)(config, r, ttls) for r in range(runs))
    sweep = TtlSweep(ttls, list(per_run))
    if not sweep.monotone_per_run:
        logger.warning("Recall is not monotone in ttl for some run")
    return sweep


@dataclass
class SizeSweep:
    sizes: List[int]
    response: Dict[int, List[float]]
    recalls: Dict[int, List[float]]

    @property
    def rows(self) -> List[Tuple[int, float, float, int]]:
        out = []
        for size in self.sizes:
            s = summarize(self.response[size])
            out.append((size, s.mean, s.stdev, s.runs))
        return out

    def mean_recall(self, size: int) -> float:
        return summarize(self.recalls[size]).mean


def _size_run(config: SimConfig, size: int, run: int, ttl: int) -> Tuple[float, float]:
    world = build_world(replace(config, spaces_per_run=size), run)
    m = run_query_experiment(world, ttl=ttl)
    return m.response_time, m.recall


def sweep_size(
    config: SimConfig, sizes: Iterable[int], ttl: Optional[int] = None, runs: Optional[int] = None, jobs: int = 1
) -> SizeSweep:
    """Mean response time per query-cluster size."""
    sizes = sorted(set(sizes))
    ttl = ttl or config.ttl
    runs = runs or config.runs
    lo, hi = SIZE_RANGE
    outside = [s for s in sizes if not lo <= s <= hi]
    if outside:
        logger.warning(f"Sizes {outside} lie outside {lo}..{hi}; results are extrapolations")
    jobs_list = [(s, r) for s in sizes for r in range(runs)]
    out = Parallel(n_jobs=jobs)(delayed(_size_run)(config, s, r, ttl) for s, r in jobs_list)
    response: Dict[int, List[float]] = {s: [] for s in sizes}
    recalls: Dict[int, List[float]] = {s: [] for s in sizes}
    for (s, _), (rt, rc) in zip(jobs_list, out):
        response[s].append(rt)
        recalls[s].append(rc)
    sweep = SizeSweep(sizes, response, recalls)
    if not is_non_decreasing([row[1] for row in sweep.rows]):
        logger.warning("Mean response time is not monotone in size")
    return sweep


def extra_space(world: SimWorld) -> Tuple[str, Dict[str, AttributeValue]]:
    """A fresh query-domain space, drawn from the world's own streams."""
    assert world.query_domain is not None
    pool = VOCABULARY[world.query_domain][: world.config.domain_attr_pool_size]
    attrs = _draw_attributes(pool, world.config.attrs_per_space, world.rngs["spaces"])
    return _space(world, world.query_domain, attrs, False, None)


def _registration_run(config: SimConfig, run: int) -> PhaseTiming:
    world = build_world(config, run)
    template, data = extra_space(world)
    _, timing = world.register_space(template, data)
    return timing


def registration_breakdown(config: SimConfig, runs: Optional[int] = None, jobs: int = 1) -> List[Tuple[str, float]]:
    """Mean span of each registration phase for a space joining a built world."""
    runs = runs or config.runs
    timings = Parallel(n_jobs=jobs)(delayed(_registration_run)(config, r) for r in range(runs))
    return mean_timing(timings).rows()


def _query_run(config: SimConfig, run: int, ttl: int) -> PhaseTiming:
    world = build_world(config, run)
    return run_query_experiment(world, ttl=ttl).timing


def query_breakdown(
    config: SimConfig, ttl: Optional[int] = None, runs: Optional[int] = None, jobs: int = 1
) -> List[Tuple[str, float]]:
    """Mean span of each query phase for the experiment query."""
    runs = runs or config.runs
    ttl = ttl or config.ttl
    timings = Parallel(n_jobs=jobs)(delayed(_query_run)(config, r, ttl) for r in range(runs))
    return mean_timing(timings).rows()


@dataclass
class ChurnReport:
    cluster_size: int
    departed: List[PeerId]
    detected: List[PeerId]
    head_before: Optional[PeerId]
    head_after: Optional[PeerId]
    problems: List[str]
    connected: bool
    components: int
    metrics: Optional[Metrics] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cluster_size": self.cluster_size,
            "departed": [str(p) for p in self.departed],
            "detected": [str(p) for p in self.detected],
            "undetected": [str(p) for p in self.departed if p not in self.detected],
            "head_before": str(self.head_before),
            "head_after": str(self.head_after),
            "problems": list(self.problems),
            "connected": self.connected,
            "components": self.components,
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }


def churn_experiment(config: SimConfig, run: int = 0, ttl: Optional[int] = None) -> ChurnReport:
    """Scripted silent departure of part of the query cluster, head included."""
    world = build_world(config, run)
    assert world.query_domain and world.query_attribute
    cluster = world.server.ring(world.query_domain).clusters[world.query_attribute]
    members = sorted(cluster.members)
    head = cluster.head
    assert head is not None
    k = max(1, int(round(config.churn_fraction * len(members))))
    others = [p for p in members if p != head]
    picked = world.rngs["churn"].choice(len(others), size=min(k - 1, len(others)), replace=False)
    departed = sorted([head] + [others[int(i)] for i in picked])
    for peer in departed:
        world.depart(peer)
    logger.info(f"{len(departed)} of {len(members)} query-cluster peers left silently, head {head} included")

    detected = world.run_liveness()
    problems = world.check()
    graph = cluster.graph
    components = nx.number_connected_components(graph) if len(graph) else 0
    connected = components <= 1
    if not connected:
        logger.warning(f"Residual query cluster is disconnected ({components} components)")
    if problems:
        logger.warning(f"{len(problems)} overlay invariant(s) broken after churn")
    metrics = run_query_experiment(world, ttl=ttl or config.ttl)
    return ChurnReport(
        len(members), departed, sorted(set(detected)), head, cluster.head, problems, connected, components, metrics
    )


# Demo world ####################################################################

OFFICE_LOCATION = "S14 #06-20, NUS"


def build_demo_world(seed: int = 42, keep_trace: bool = False) -> SimWorld:
    """A small hand-written world for interactive queries.

    PERSON spaces (one using local names), two OFFICE spaces with an
    ``isVacant`` event derived from occupancy, and HOME/HOUSE spaces that end
    up in one domain.
    """
    config = SimConfig(seed=seed, spaces_per_run=1, background_spaces=0, predefine_globals=0, rename_fraction=0.0)
    world = SimWorld(config, 0, keep_trace)
    text, number = AttributeValue.text, AttributeValue.number
    vacant = parse("SELECT isVacant FROM OFFICE WHERE occupancy = 0").predicate

    person = schema_of("PERSON", [("name", "text"), ("friend_list", "list-of-text"), ("location", "text")])
    world.register_space(
        render_schema_template(person),
        {
            "name": text("Keith"),
            "friend_list": AttributeValue.text_list(["Alice", "Bob"]),
            "location": StepSignal(text(OFFICE_LOCATION), ((3_600_000.0, text("COM1 #02-12, NUS")),)),
        },
    )
    world.register_space(
        render_schema_template(
            schema_of(
                "PERSON",
                [("personName", "text"), ("friendList", "list-of-text"), ("location", "text")],
                private=["location"],
            )
        ),
        {"personName": text("Alice"), "friendList": AttributeValue.text_list(["Keith"]), "location": text("UTown")},
    )
    world.register_space(
        render_schema_template(person),
        {"name": text("Bob"), "friend_list": AttributeValue.text_list(["Keith", "Alice"]), "location": text("UTown")},
    )

    office = render_schema_template(
        schema_of(
            "OFFICE", [("location", "text"), ("occupancy", "number"), ("isVacant", "boolean")], event=["isVacant"]
        )
    )
    world.register_space(
        office,
        {
            "location": text(OFFICE_LOCATION),
            "occupancy": StepSignal(number(3), ((60_000.0, number(0)), (180_000.0, number(2)))),
        },
        {"isVacant": vacant},
    )
    world.register_space(
        office,
        {"location": text("COM1 #02-12, NUS"), "occupancy": number(1)},
        {"isVacant": vacant},
    )

    home = schema_of("HOME", [("temperature", "number"), ("light", "number"), ("humidity", "number")])
    house = schema_of(
        "HOUSE", [("temperature", "number"), ("light", "number"), ("humidity", "number"), ("noise", "number")]
    )
    world.register_space(
        render_schema_template(home), {"temperature": number(21), "light": number(300), "humidity": number(40)}
    )
    world.register_space(
        render_schema_template(house),
        {"temperature": number(24), "light": number(120), "humidity": number(55), "noise": number(35)},
    )
    world.query_domain, world.query_attribute = "PERSON", "name"
    return world
