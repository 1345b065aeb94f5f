"""Semantic overlay: per-domain rings of per-attribute clusters.

Each context domain is a ring. Position 0 is the context space gateway (CSG),
followed by one semantic cluster per global attribute in creation order. A
cluster is an unstructured P2P network of the PSGs holding that attribute and
lookups spread through it Gnutella 0.4 style: every hop decrements the TTL and
a peer drops query ids it has already seen.
"""
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple

import networkx as nx
import numpy as np

from cdms.core import EmptyEntryError, UnknownAttributeError, UnknownDomainError
from cdms.cql import Predicate, QueryAst
from cdms.model import GlobalSchema, PeerId
from cdms.utils.logging import getLogger

logger = getLogger(__name__)

CSG = "CSG"
DEFAULT_DEGREE = 4
SEEN_CACHE_SIZE = 4096
DEFAULT_MAX_MISSED = 2


@dataclass(frozen=True)
class LookupRequest:
    """A parsed query on its way through one domain's overlay."""

    query_id: int
    query: QueryAst
    ttl: int
    origin: str
    cluster: str = ""
    hops: int = 0

    def __post_init__(self):
        assert self.ttl >= 0, "ttl must be non-negative"

    @property
    def domain(self) -> str:
        return self.query.domain

    @property
    def predicate(self) -> Predicate:
        return self.query.predicate

    @property
    def projection(self) -> Tuple[str, ...]:
        return self.query.projection

    def forwarded(self) -> "LookupRequest":
        return replace(self, ttl=self.ttl - 1, hops=self.hops + 1)


@dataclass
class PeerOverlayState:
    """Per-peer protocol state: duplicate suppression and neighbor liveness."""

    peer: PeerId
    seen_limit: int = SEEN_CACHE_SIZE
    seen: "OrderedDict[int, None]" = field(default_factory=OrderedDict)
    outstanding: Dict[PeerId, int] = field(default_factory=dict)
    missed: Dict[PeerId, int] = field(default_factory=dict)
    last_heard: Dict[PeerId, float] = field(default_factory=dict)

    def has_seen(self, query_id: int) -> bool:
        return query_id in self.seen

    def remember(self, query_id: int) -> bool:
        """Cache ``query_id``; False if it was already there."""
        if query_id in self.seen:
            return False
        self.seen[query_id] = None
        while len(self.seen) > self.seen_limit:
            self.seen.popitem(last=False)
        return True

    def ping(self, neighbor: PeerId, nonce: int):
        self.outstanding[neighbor] = nonce
        self.missed.setdefault(neighbor, 0)

    def pong(self, neighbor: PeerId, nonce: int, now: float):
        if self.outstanding.get(neighbor) == nonce:
            del self.outstanding[neighbor]
            self.missed[neighbor] = 0
            self.last_heard[neighbor] = now

    def forget(self, neighbor: PeerId):
        for d in (self.outstanding, self.missed, self.last_heard):
            d.pop(neighbor, None)


def detect_failure(
    state: PeerOverlayState, now: float, max_missed: int = DEFAULT_MAX_MISSED
) -> List[PeerId]:
    """Close a ping round: every unanswered ping counts as a miss.

    Returns the neighbors that missed ``max_missed`` consecutive pongs; they
    are dropped from the liveness bookkeeping.
    """
    failed = []
    for neighbor in sorted(state.outstanding):
        del state.outstanding[neighbor]
        state.missed[neighbor] = state.missed.get(neighbor, 0) + 1
        if state.missed[neighbor] >= max_missed:
            failed.append(neighbor)
    for neighbor in failed:
        state.forget(neighbor)
        logger.debug(f"{state.peer} lost {neighbor} at t={now:.0f}")
    return failed


@dataclass
class SemanticCluster:
    """The P2P network of all PSGs sharing one attribute of a domain."""

    attribute: str
    degree: int = DEFAULT_DEGREE
    graph: nx.Graph = field(default_factory=nx.Graph, repr=False)
    head: Optional[PeerId] = None

    @property
    def members(self) -> Set[PeerId]:
        return set(self.graph.nodes)

    def __contains__(self, peer: PeerId) -> bool:
        return peer in self.graph

    def __len__(self) -> int:
        return self.graph.number_of_nodes()

    def neighbors(self, peer: PeerId) -> Set[PeerId]:
        if peer not in self.graph:
            return set()
        return set(self.graph.adj[peer])

    def add(self, peer: PeerId, rng: np.random.Generator) -> Optional[Tuple[PeerId, ...]]:
        """Link ``peer`` to ``min(degree, |members|)`` uniformly sampled members.

        Returns the sampled neighbors, or None when the peer already is a member.
        """
        if peer in self.graph:
            return None
        existing = list(self.graph.nodes)
        self.graph.add_node(peer)
        k = min(self.degree, len(existing))
        picked: Tuple[PeerId, ...] = ()
        if k:
            picked = tuple(existing[int(i)] for i in rng.choice(len(existing), size=k, replace=False))
            self.graph.add_edges_from((peer, other) for other in picked)
        if self.head is None:
            self.head = peer
        return picked

    def remove(self, peer: PeerId) -> bool:
        """Purge ``peer``; re-elect the lowest id as head if it was the head."""
        if peer not in self.graph:
            return False
        self.graph.remove_node(peer)
        if self.head == peer:
            self.head = min(self.graph.nodes) if len(self.graph) else None
        return True


@dataclass
class CsgState:
    domain: str
    directory: Dict[str, Optional[PeerId]] = field(default_factory=dict)
    cluster_log: List[str] = field(default_factory=list)
    liveness: Optional[PeerOverlayState] = None

    def __post_init__(self):
        if self.liveness is None:
            self.liveness = PeerOverlayState(PeerId(0, f"csg/{self.domain}"))

    @property
    def address(self) -> str:
        assert self.liveness is not None
        return self.liveness.peer.address


@dataclass
class DomainRing:
    domain: str
    degree: int = DEFAULT_DEGREE
    clusters: Dict[str, SemanticCluster] = field(default_factory=dict)
    csg: Optional[CsgState] = None

    def __post_init__(self):
        if self.csg is None:
            self.csg = CsgState(self.domain)

    @property
    def positions(self) -> List[str]:
        """Ring order: the CSG, then the clusters."""
        return [CSG] + list(self.clusters)

    def position(self, attribute: str) -> int:
        return self.positions.index(attribute)

    def cluster(self, attribute: str) -> SemanticCluster:
        try:
            return self.clusters[attribute]
        except KeyError:
            raise UnknownAttributeError(f"Domain {self.domain} has no cluster for '{attribute}'")

    def links(self) -> List[Tuple[str, str]]:
        """Ring links between consecutive positions, including the closing link."""
        pos = self.positions
        return [(pos[i], pos[(i + 1) % len(pos)]) for i in range(len(pos))]

    def head_links(self) -> List[Tuple[Optional[PeerId], Optional[PeerId]]]:
        def endpoint(name: str) -> Optional[PeerId]:
            assert self.csg is not None
            return self.csg.liveness.peer if name == CSG else self.clusters[name].head  # type: ignore

        return [(endpoint(a), endpoint(b)) for a, b in self.links()]

    def memberships(self, peer: PeerId) -> List[str]:
        return [name for name, c in self.clusters.items() if peer in c]

    @property
    def peers(self) -> Set[PeerId]:
        out: Set[PeerId] = set()
        for c in self.clusters.values():
            out.update(c.graph.nodes)
        return out

    def sync(self, schema: GlobalSchema) -> List[str]:
        """Append a cluster for every attribute added to the domain since the last sync."""
        assert schema.domain_name == self.domain
        assert self.csg is not None
        created = []
        for name in schema.names:
            if name not in self.clusters:
                self.clusters[name] = SemanticCluster(name, self.degree)
                self.csg.directory[name] = None
                self.csg.cluster_log.append(name)
                created.append(name)
        return created

    def check(self) -> List[str]:
        """Every broken overlay invariant, as readable lines; empty when healthy."""
        assert self.csg is not None
        problems = []
        if set(self.csg.directory) != set(self.clusters):
            problems.append(f"{self.domain}: CSG directory keys differ from the ring's clusters")
        for name, c in self.clusters.items():
            if nx.number_of_selfloops(c.graph):
                problems.append(f"{self.domain}.{name}: self-loop")
            if len(c.graph) and c.head not in c.graph:
                problems.append(f"{self.domain}.{name}: head {c.head} is not a member")
            if not len(c.graph) and c.head is not None:
                problems.append(f"{self.domain}.{name}: empty cluster keeps head {c.head}")
            if self.csg.directory.get(name) != c.head:
                problems.append(f"{self.domain}.{name}: CSG directory has a stale head")
        return problems


def ensure_ring(
    index: Dict[str, DomainRing], domain: GlobalSchema, degree: int = DEFAULT_DEGREE
) -> DomainRing:
    """Create the ring of ``domain`` on first call; afterwards grow it at the tail."""
    ring = index.get(domain.domain_name)
    if ring is None:
        ring = index[domain.domain_name] = DomainRing(domain.domain_name, degree)
        logger.debug(f"Created ring for {domain.domain_name}")
    created = ring.sync(domain)
    if created and len(created) < len(ring.clusters):
        logger.debug(f"{domain.domain_name} ring grew by {created}")
    return ring


class ContextSpaceManager:
    """Domain index of the server: domain name to ring (and its CSG)."""

    def __init__(self, degree: int = DEFAULT_DEGREE):
        assert degree >= 1, "Cluster degree must be at least 1"
        self.degree = degree
        self.rings: Dict[str, DomainRing] = {}

    def ensure_ring(self, domain: GlobalSchema) -> DomainRing:
        return ensure_ring(self.rings, domain, self.degree)

    def __getitem__(self, domain: str) -> DomainRing:
        try:
            return self.rings[domain]
        except KeyError:
            raise UnknownDomainError(f"No context domain named '{domain}'")

    def __contains__(self, domain: str) -> bool:
        return domain in self.rings

    def __iter__(self):
        return iter(self.rings.values())

    def __len__(self) -> int:
        return len(self.rings)

    def csg_of(self, address: str) -> Optional[DomainRing]:
        for ring in self.rings.values():
            assert ring.csg is not None
            if ring.csg.address == address:
                return ring
        return None


@dataclass(frozen=True)
class JoinReport:
    peer: PeerId
    joined: Tuple[str, ...] = ()
    already: Tuple[str, ...] = ()
    neighbors: Mapping[str, Tuple[PeerId, ...]] = field(default_factory=dict)


def join(
    ring: DomainRing, peer: PeerId, attrs: Iterable[str], rng: np.random.Generator
) -> JoinReport:
    """Add ``peer`` to exactly the clusters named in ``attrs`` (global names)."""
    assert ring.csg is not None
    joined, already, neighbors = [], [], {}
    for name in attrs:
        cluster = ring.cluster(name)
        picked = cluster.add(peer, rng)
        if picked is None:
            already.append(name)
            continue
        joined.append(name)
        neighbors[name] = picked
        ring.csg.directory[name] = cluster.head
    return JoinReport(peer, tuple(joined), tuple(already), neighbors)


@dataclass(frozen=True)
class LeaveReport:
    peer: PeerId
    left: Tuple[str, ...] = ()
    new_heads: Mapping[str, Optional[PeerId]] = field(default_factory=dict)


def leave(ring: DomainRing, peer: PeerId, attrs: Optional[Iterable[str]] = None) -> LeaveReport:
    """Purge ``peer`` from the given clusters (default: all of its clusters).

    A departing head is replaced by the lowest remaining PeerId and the CSG
    directory follows.
    """
    assert ring.csg is not None
    names = ring.memberships(peer) if attrs is None else list(attrs)
    left, new_heads = [], {}
    for name in names:
        cluster = ring.cluster(name)
        was_head = cluster.head == peer
        if not cluster.remove(peer):
            continue
        left.append(name)
        ring.csg.directory[name] = cluster.head
        if was_head:
            new_heads[name] = cluster.head
    if new_heads:
        logger.debug(f"{ring.domain}: {peer} left, new heads {new_heads}")
    return LeaveReport(peer, tuple(left), new_heads)


def route_to_entry(ring: DomainRing, request: LookupRequest) -> SemanticCluster:
    """First cluster after the CSG, in ring order, whose attribute is projected.

    Raises:
        EmptyEntryError: when no cluster carries a projected attribute.
    """
    wanted = set(request.projection)
    for name in ring.positions[1:]:
        if name in wanted:
            return ring.clusters[name]
    raise EmptyEntryError(f"No cluster of {ring.domain} carries any of {sorted(wanted)}")


@dataclass(frozen=True)
class FloodStep:
    evaluate: bool
    forwards: Tuple[Tuple[PeerId, LookupRequest], ...] = ()


def flood_step(
    state: PeerOverlayState,
    request: LookupRequest,
    sender: Optional[PeerId],
    neighbors: Iterable[PeerId],
) -> FloodStep:
    """Gnutella 0.4 handling of one LOOKUP copy at one peer.

    A fresh query id is cached and evaluated locally; while ``ttl > 1`` copies
    with ``ttl - 1`` go to every neighbor except the sender. Duplicates are
    dropped without evaluation.
    """
    if not state.remember(request.query_id):
        return FloodStep(False)
    if request.ttl <= 1:
        return FloodStep(True)
    fwd = request.forwarded()
    targets = sorted(n for n in neighbors if n != sender and n != state.peer)
    return FloodStep(True, tuple((n, fwd) for n in targets))


def bfs_reachable(cluster: SemanticCluster, entry: PeerId, ttl: int) -> Set[PeerId]:
    """Peers within ``ttl - 1`` hops of ``entry``, entry included."""
    assert entry in cluster, f"{entry} is not a member of {cluster.attribute}"
    assert ttl >= 1, "ttl must be at least 1"
    return set(nx.single_source_shortest_path_length(cluster.graph, entry, cutoff=ttl - 1))
