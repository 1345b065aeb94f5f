"""Name-based schema matching with adaptive criterion weights.

Attribute names are normalized into lowercase tokens (camelCase and
snake_case are split) and compared with four linguistic criteria. Each
criterion's weight tracks the administrator's recent confirm/reject
decisions, so the criteria are tried in the order of their observed
precision. Exact matches are pinned at weight 1 and never need review.
"""
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import (
    Deque,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

from nltk.stem import PorterStemmer

from cdms.core import DecisionError, MappingConflictError
from cdms.model import AttributeDef, GlobalSchema, LocalSchema, PeerId
from cdms.utils.logging import getLogger
from cdms.utils.utils import camel_to_snake

logger = getLogger(__name__)

BUILTIN_SYNONYMS = Path(__file__).parent / "data" / "synonyms.tsv"
DEFAULT_WINDOW = 50
DEFAULT_THETA = Fraction(1, 2)
MIN_PREFIX = 3
MEMO_LIMIT = 200_000


class CriterionId(str, Enum):
    EXACT = "exact"
    STEM = "stem"
    SUBSTRING = "substring"
    SYNONYM = "synonym"


PRECEDENCE = {c: i for i, c in enumerate(CriterionId)}


class Status(str, Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    REJECTED = "rejected"


class Decision(str, Enum):
    CONFIRM = "confirm"
    REJECT = "reject"

    @classmethod
    def parse(cls, text: str) -> "Decision":
        t = text.strip().lower()
        if t in {"y", "yes", "confirm", "confirmed"}:
            return cls.CONFIRM
        if t in {"n", "no", "reject", "rejected"}:
            return cls.REJECT
        raise DecisionError(f"Not a decision: '{text}'")


_STEMMER = PorterStemmer()


@lru_cache(maxsize=65536)
def tokenize(name: str) -> Tuple[str, ...]:
    """Lowercase tokens of an identifier: ``"personName" -> ("person", "name")``."""
    return tuple(t for t in camel_to_snake(name).split("_") if t)


@lru_cache(maxsize=65536)
def stem(token: str) -> str:
    return _STEMMER.stem(token)


class SynonymDictionary:
    """Symmetric relation over lowercase tokens, loaded from ``a<TAB>b`` lines."""

    def __init__(self, pairs: Iterable[Tuple[str, str]] = ()):
        self._pairs: Set[FrozenSet[str]] = set()
        for a, b in pairs:
            self.add(a, b)

    def add(self, a: str, b: str):
        a, b = a.strip().lower(), b.strip().lower()
        if a and b and a != b:
            self._pairs.add(frozenset((a, b)))

    def __contains__(self, pair: Tuple[str, str]) -> bool:
        a, b = pair
        return frozenset((a, b)) in self._pairs

    def __len__(self) -> int:
        return len(self._pairs)

    def pairs(self) -> List[Tuple[str, str]]:
        return sorted(tuple(sorted(p)) for p in self._pairs)  # type: ignore

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SynonymDictionary":
        d = cls()
        with open(path, "r", encoding="utf-8") as f:
            for num, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise ValueError(f"{path}:{num}: expected 'tokenA<TAB>tokenB'")
                d.add(*parts)
        return d

    @classmethod
    def builtin(cls) -> "SynonymDictionary":
        return cls.load(BUILTIN_SYNONYMS)


def _prefix_or_equal(small: str, big: str) -> bool:
    return small == big or (len(small) >= MIN_PREFIX and big.startswith(small))


def _contained(small: Sequence[str], big: Sequence[str]) -> bool:
    return all(any(_prefix_or_equal(s, b) for b in big) for s in small)


def fired_criteria(
    local: str, global_: str, synonyms: SynonymDictionary
) -> FrozenSet[CriterionId]:
    """Every criterion that fires for a pair of names, independent of weights."""
    ta, tb = tokenize(local), tokenize(global_)
    if not ta or not tb:
        return frozenset()
    fired = set()
    if ta == tb:
        fired.add(CriterionId.EXACT)
    if tuple(map(stem, ta)) == tuple(map(stem, tb)):
        fired.add(CriterionId.STEM)
    if _contained(ta, tb) or _contained(tb, ta):
        fired.add(CriterionId.SUBSTRING)
    if ("".join(ta), "".join(tb)) in synonyms:
        fired.add(CriterionId.SYNONYM)
    elif len(ta) == len(tb):
        pairwise = [a == b or (a, b) in synonyms for a, b in zip(ta, tb)]
        if all(pairwise) and ta != tb:
            fired.add(CriterionId.SYNONYM)
    return frozenset(fired)


def domain_similarity(a: str, b: str, synonyms: SynonymDictionary) -> int:
    """0 for identical names, 1 for synonyms, 2 otherwise (lower is closer)."""
    fired = fired_criteria(a, b, synonyms)
    if CriterionId.EXACT in fired:
        return 0
    if CriterionId.SYNONYM in fired:
        return 1
    return 2


@dataclass
class Criterion:
    id: CriterionId
    weight: Fraction = Fraction(1, 2)
    hits: int = 0
    confirms: int = 0
    rejects: int = 0
    window: Deque[bool] = field(default_factory=deque)

    def __post_init__(self):
        if self.id is CriterionId.EXACT:
            self.weight = Fraction(1)

    def record(self, confirmed: bool, window_size: int):
        if confirmed:
            self.confirms += 1
        else:
            self.rejects += 1
        if self.id is CriterionId.EXACT:
            return
        if self.window.maxlen != window_size:
            self.window = deque(self.window, maxlen=window_size)
        self.window.append(confirmed)
        self.weight = Fraction(sum(self.window) + 1, len(self.window) + 2)


@dataclass(eq=False)
class MatchCandidate:
    local_name: str
    global_domain: str
    global_name: str
    criterion: CriterionId
    score: Fraction
    status: Status = Status.PENDING
    peer: Optional[PeerId] = None
    id: int = -1
    conflict: bool = False

    @property
    def global_ref(self) -> str:
        return f"{self.global_domain}.{self.global_name}"

    @property
    def pair(self) -> Tuple[str, str]:
        return self.local_name, self.global_name

    def rank_key(self):
        return (-self.score, PRECEDENCE[self.criterion], self.global_domain, self.global_name)

    def line(self) -> str:
        return "\t".join(
            [
                self.local_name,
                self.global_ref,
                self.criterion.value,
                f"{float(self.score):.4f}",
                self.status.value,
            ]
        )

    def __repr__(self) -> str:
        return f"MatchCandidate({self.local_name} -> {self.global_ref} via {self.criterion.value}, {self.status.value})"


@dataclass(frozen=True)
class SchemaMapping:
    """Bijection between a PSG's local attribute names and global names."""

    peer: Optional[PeerId]
    domain: str
    pairs: Tuple[Tuple[str, str], ...] = ()  # (global, local)

    def __post_init__(self):
        globals_ = [g for g, _ in self.pairs]
        locals_ = [loc for _, loc in self.pairs]
        assert len(set(globals_)) == len(globals_), f"Mapping not injective on globals: {self.pairs}"
        assert len(set(locals_)) == len(locals_), f"Mapping not injective on locals: {self.pairs}"

    def to_local(self, global_name: str) -> Optional[str]:
        for g, loc in self.pairs:
            if g == global_name:
                return loc
        return None

    def to_global(self, local_name: str) -> Optional[str]:
        for g, loc in self.pairs:
            if loc == local_name:
                return g
        return None

    @property
    def global_names(self) -> Tuple[str, ...]:
        return tuple(g for g, _ in self.pairs)

    @property
    def local_names(self) -> Tuple[str, ...]:
        return tuple(loc for _, loc in self.pairs)

    def inverse(self) -> "SchemaMapping":
        return replace(self, pairs=tuple((loc, g) for g, loc in self.pairs))

    @classmethod
    def identity(cls, schema: Union[LocalSchema, GlobalSchema], peer: Optional[PeerId] = None):
        return cls(peer, schema.domain_name, tuple((n, n) for n in schema.names))


@dataclass
class MatcherState:
    criteria: Dict[CriterionId, Criterion]
    synonyms: SynonymDictionary
    queue: List[MatchCandidate] = field(default_factory=list)
    window: int = DEFAULT_WINDOW
    theta: Fraction = DEFAULT_THETA
    next_id: int = 0
    _fired: Dict[Tuple[str, str], FrozenSet[CriterionId]] = field(default_factory=dict, repr=False)
    _memo: Dict[tuple, tuple] = field(default_factory=dict, repr=False)

    @classmethod
    def create(
        cls,
        synonyms: Optional[SynonymDictionary] = None,
        window: int = DEFAULT_WINDOW,
        theta: Union[Fraction, float, str] = DEFAULT_THETA,
    ) -> "MatcherState":
        assert window >= 1, "The accuracy window holds at least one decision"
        return cls(
            criteria={c: Criterion(c) for c in CriterionId},
            synonyms=SynonymDictionary.builtin() if synonyms is None else synonyms,
            window=window,
            theta=Fraction(str(theta)) if isinstance(theta, float) else Fraction(theta),
        )

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_fired"], d["_memo"] = {}, {}
        return d

    def ranked_criteria(self) -> List[Criterion]:
        """Criteria in the order they are tried: weight, then precedence."""
        return sorted(self.criteria.values(), key=lambda c: (-c.weight, PRECEDENCE[c.id]))

    def fired(self, local: str, global_: str) -> FrozenSet[CriterionId]:
        key = (local, global_)
        got = self._fired.get(key)
        if got is None:
            got = self._fired[key] = fired_criteria(local, global_, self.synonyms)
        return got

    def candidate(self, candidate_id: int) -> MatchCandidate:
        for c in self.queue:
            if c.id == candidate_id:
                return c
        raise DecisionError(f"No pending candidate with id {candidate_id}")

    def _issue_id(self) -> int:
        self.next_id += 1
        return self.next_id


def _ranked_candidates(
    name: str,
    hits: Iterable[Tuple[str, str, FrozenSet[CriterionId]]],
    order: Sequence[Criterion],
) -> List[MatchCandidate]:
    out = []
    for domain, gname, fired in hits:
        best = next(c for c in order if c.id in fired)
        out.append(
            MatchCandidate(
                local_name=name,
                global_domain=domain,
                global_name=gname,
                criterion=best.id,
                score=best.weight,
                status=Status.CONFIRMED if best.id is CriterionId.EXACT else Status.PENDING,
            )
        )
    out.sort(key=MatchCandidate.rank_key)
    return out


def match_attribute(
    local: Union[str, AttributeDef],
    globals_: Iterable[Tuple[str, AttributeDef]],
    state: MatcherState,
) -> List[MatchCandidate]:
    """Rank candidate global attributes for one local attribute.

    For each global attribute the criteria are tried in decreasing weight
    order and the first that fires produces a candidate scored with its
    weight. Kinds must agree when ``local`` is an :class:`AttributeDef`.
    """
    name = local if isinstance(local, str) else local.name
    kind = None if isinstance(local, str) else local.kind
    assert name, "Attribute names are non-empty"
    hits = []
    for domain, gattr in globals_:
        if kind is not None and gattr.kind is not kind:
            continue
        fired = state.fired(name, gattr.name)
        if fired:
            hits.append((domain, gattr.name, fired))
    return _ranked_candidates(name, hits, state.ranked_criteria())


@dataclass
class IntegrationProposal:
    local: LocalSchema
    target: Optional[str]
    candidates: List[MatchCandidate] = field(default_factory=list)
    matched: int = 0
    peer: Optional[PeerId] = None

    @property
    def create_new(self) -> bool:
        return self.target is None

    @property
    def pending(self) -> List[MatchCandidate]:
        return [c for c in self.candidates if c.status is Status.PENDING]


def _schema_candidates(local: LocalSchema, schema: GlobalSchema, state: MatcherState):
    # Global schemas only ever grow, so the attribute count identifies a revision.
    order = state.ranked_criteria()
    revision = len(schema.attributes)
    out = {}
    for a in local.attributes:
        key = (a.name, a.kind, schema.domain_name, revision)
        hits = state._memo.get(key)
        if hits is None:
            if len(state._memo) > MEMO_LIMIT:
                state._memo.clear()
            hits = state._memo[key] = tuple(
                (schema.domain_name, g.name, fired)
                for g in schema.attributes
                if g.kind is a.kind
                for fired in (state.fired(a.name, g.name),)
                if fired
            )
        out[a.name] = _ranked_candidates(a.name, hits, order)
    return out


def match_schema(
    local: LocalSchema,
    globals_: Union[Mapping[str, GlobalSchema], Iterable[GlobalSchema]],
    state: MatcherState,
    peer: Optional[PeerId] = None,
    target: Optional[str] = None,
) -> IntegrationProposal:
    """Pick the global schema sharing the largest set of matched attributes.

    A target needs at least ``max(1, ceil(theta * n))`` matched attributes.
    Ties go to the closest domain name, then the lexicographically smallest.
    Without a qualifying target the local schema becomes a new global schema,
    unless a global schema of the very same name exists, which is then used.
    Passing ``target`` skips the search (schema updates stay in their domain).
    """
    catalog = globals_ if isinstance(globals_, Mapping) else {g.domain_name: g for g in globals_}
    n = len(local.attributes)
    need = max(1, math.ceil(state.theta * n))

    chosen: Optional[str] = target
    per_attr: Dict[str, List[MatchCandidate]] = {}
    if chosen is None:
        best_key = None
        for name in sorted(catalog):
            cands = _schema_candidates(local, catalog[name], state)
            count = sum(1 for c in cands.values() if c)
            if count < need:
                continue
            key = (-count, domain_similarity(local.domain_name, name, state.synonyms), name)
            if best_key is None or key < best_key:
                best_key, chosen, per_attr = key, name, cands
        if chosen is None and local.domain_name in catalog:
            chosen = local.domain_name
    if chosen is not None and not per_attr:
        per_attr = _schema_candidates(local, catalog[chosen], state)

    if chosen is None:
        return IntegrationProposal(local, None, [], 0, peer)

    candidates = []
    for a in local.attributes:
        for c in per_attr[a.name]:
            c.id, c.peer = state._issue_id(), peer
            candidates.append(c)
    matched = sum(1 for cs in per_attr.values() if cs)
    return IntegrationProposal(local, chosen, candidates, matched, peer)


def provisional_decisions(
    proposal: IntegrationProposal,
) -> Tuple[Dict[int, Decision], List[MatchCandidate]]:
    """Decide pending candidates as a greedy bijective assignment.

    Candidates are taken confirmed-first, then in ranking order. A pending
    candidate is accepted if neither its local nor its global name is taken.
    Returns the decisions and the confirmed candidates that collide with an
    earlier confirmed one; those need an administrator.
    """
    local_order = {a.name: i for i, a in enumerate(proposal.local.attributes)}
    order = sorted(
        proposal.candidates,
        key=lambda c: (
            c.status is not Status.CONFIRMED,
            c.rank_key(),
            local_order.get(c.local_name, 0),
        ),
    )
    used_local: Set[str] = set()
    used_global: Set[str] = set()
    decisions: Dict[int, Decision] = {}
    conflicts: List[MatchCandidate] = []
    for c in order:
        free = c.local_name not in used_local and c.global_name not in used_global
        if c.status is Status.REJECTED:
            continue
        if c.status is Status.CONFIRMED:
            if free:
                used_local.add(c.local_name)
                used_global.add(c.global_name)
            else:
                conflicts.append(c)
            continue
        decisions[c.id] = Decision.CONFIRM if free else Decision.REJECT
        if free:
            used_local.add(c.local_name)
            used_global.add(c.global_name)
    return decisions, conflicts


def _conflicting_pairs(confirmed: Sequence[MatchCandidate]) -> List[Tuple[str, str]]:
    by_local: Dict[str, List[MatchCandidate]] = {}
    by_global: Dict[str, List[MatchCandidate]] = {}
    for c in confirmed:
        by_local.setdefault(c.local_name, []).append(c)
        by_global.setdefault(c.global_name, []).append(c)
    pairs: List[Tuple[str, str]] = []
    for group in list(by_global.values()) + list(by_local.values()):
        if len(group) > 1:
            pairs.extend(c.pair for c in group if c.pair not in pairs)
    return pairs


def integrate(
    proposal: IntegrationProposal,
    decisions: Mapping[int, Decision],
    globals_: Mapping[str, GlobalSchema],
    count_member: bool = True,
) -> Tuple[Dict[str, GlobalSchema], SchemaMapping]:
    """Fold a decided proposal into the global schemas.

    Confirmed pairs enter the mapping. Every other local attribute maps to a
    global attribute of its own name, appended to the target when missing.
    A name held by an attribute of another kind, or already claimed in this
    mapping, is suffixed ``_2``, ``_3``...

    Raises:
        DecisionError: when a pending candidate has no decision.
        MappingConflictError: when two confirmations share a local or global name.
    """
    confirmed = []
    for c in proposal.candidates:
        if c.status is Status.CONFIRMED:
            confirmed.append(c)
        elif c.status is Status.PENDING:
            if c.id not in decisions:
                raise DecisionError(f"Pending candidate without a decision: {c!r}")
            if decisions[c.id] is Decision.CONFIRM:
                confirmed.append(c)
    conflicts = _conflicting_pairs(confirmed)
    if conflicts:
        raise MappingConflictError(conflicts)

    out = dict(globals_)
    local = proposal.local
    if proposal.create_new:
        schema = GlobalSchema.from_local(local, member_count=1 if count_member else 0)
        out[schema.domain_name] = schema
        return out, SchemaMapping.identity(local, proposal.peer)

    assert proposal.target is not None
    target = out[proposal.target]
    pairs = {c.local_name: c.global_name for c in confirmed}
    claimed = set(pairs.values())
    appended: List[AttributeDef] = []
    for a in local.attributes:
        if a.name in pairs:
            continue
        name, k = a.name, 2
        while True:
            existing = target.attribute(name) or next((x for x in appended if x.name == name), None)
            if existing is None:
                appended.append(replace(a, name=name))
                break
            if existing.kind is a.kind and name not in claimed:
                break
            name, k = f"{a.name}_{k}", k + 1
        claimed.add(name)
        pairs[a.name] = name
    target = target.with_attributes(appended)
    if count_member:
        target = target.with_member_count(target.member_count + 1)
    out[target.domain_name] = target
    mapping = SchemaMapping(
        proposal.peer,
        target.domain_name,
        tuple((pairs[a.name], a.name) for a in local.attributes),
    )
    if appended:
        logger.debug(f"{target.domain_name} gained {[a.name for a in appended]}")
    return out, mapping


def enqueue(state: MatcherState, proposal: IntegrationProposal, conflicts: Sequence[MatchCandidate] = ()):
    """Count hits and put the proposal's open candidates on the review queue."""
    conflicted = {id(c) for c in conflicts}
    for c in proposal.candidates:
        state.criteria[c.criterion].hits += 1
        if id(c) in conflicted:
            c.status, c.conflict = Status.PENDING, True
        if c.status is Status.CONFIRMED:
            state.criteria[c.criterion].confirms += 1
        elif c.status is Status.PENDING:
            state.queue.append(c)


def apply_decision(state: MatcherState, candidate: MatchCandidate, decision: Decision) -> MatcherState:
    """Record an administrator decision and re-estimate the criterion's weight.

    The new weight is ``(confirms + 1) / (decisions + 2)`` over the last
    ``state.window`` decisions of the firing criterion; exact stays at 1.
    """
    if candidate.status is not Status.PENDING:
        raise DecisionError(f"{candidate!r} is no longer pending")
    decision = Decision(decision)
    candidate.status = Status.CONFIRMED if decision is Decision.CONFIRM else Status.REJECTED
    state.criteria[candidate.criterion].record(decision is Decision.CONFIRM, state.window)
    state.queue = [c for c in state.queue if c is not candidate]
    logger.debug(
        f"{decision.value} {candidate.local_name} -> {candidate.global_ref}; "
        f"{candidate.criterion.value} weight now {state.criteria[candidate.criterion].weight}"
    )
    return state


def dump_queue(candidates: Iterable[MatchCandidate]) -> str:
    """Review queue as ``local  domain.global  criterion  score  status`` lines."""
    return "".join(c.line() + "\n" for c in candidates)


@dataclass(frozen=True)
class DecisionLine:
    local_name: str
    global_ref: str
    decision: Decision


def parse_decisions(text: str) -> List[DecisionLine]:
    """Read a decisions file: the queue dump with ``status`` edited.

    Lines still marked ``pending`` are skipped.

    Raises:
        DecisionError: on malformed lines.
    """
    out = []
    for num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5 or "." not in parts[1]:
            raise DecisionError(
                f"line {num}: expected 'local_name global_domain.global_name criterion score status'"
            )
        if parts[4].lower() == Status.PENDING.value:
            continue
        out.append(DecisionLine(parts[0], parts[1], Decision.parse(parts[4])))
    return out
