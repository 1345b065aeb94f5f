from dataclasses import dataclass, field
from typing import Any, Collection, Dict, Iterable, List, Sequence

import numpy as np

from cdms.engine import PhaseTiming
from cdms.model import PeerId
from cdms.utils.logging import getLogger

logger = getLogger(__name__)


def recall(responding: Collection[PeerId], qualifying: Collection[PeerId]) -> float:
    """Share of the qualifying peers that answered; 1 when none qualify."""
    if not qualifying:
        return 1.0
    hit = set(responding) & set(qualifying)
    return len(hit) / len(qualifying)


@dataclass
class Metrics:
    """Outcome of one query in one simulated world."""

    recall: float
    response_time: float
    timing: PhaseTiming = field(default_factory=PhaseTiming)
    message_count: int = 0
    reached_count: int = 0
    qualifying_count: int = 0
    responding_count: int = 0
    dropped_count: int = 0

    def __post_init__(self):
        assert 0.0 <= self.recall <= 1.0, f"Recall out of range: {self.recall}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "recall": self.recall,
            "response_time": self.response_time,
            "timing": dict(self.timing.spans),
            "message_count": self.message_count,
            "reached_count": self.reached_count,
            "qualifying_count": self.qualifying_count,
            "responding_count": self.responding_count,
            "dropped_count": self.dropped_count,
        }


@dataclass(frozen=True)
class Summary:
    mean: float
    stdev: float
    runs: int


def summarize(values: Sequence[float]) -> Summary:
    """Mean and sample standard deviation (0 for a single run)."""
    assert len(values) > 0, "Nothing to summarize"
    arr = np.asarray(values, dtype=float)
    stdev = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return Summary(float(np.mean(arr)), stdev, len(arr))


def mean_timing(timings: Iterable[PhaseTiming]) -> PhaseTiming:
    timings = list(timings)
    assert timings, "Nothing to average"
    labels: List[str] = []
    for t in timings:
        labels += [k for k in t.spans if k not in labels]
    return PhaseTiming({k: float(np.mean([t.spans.get(k, 0.0) for t in timings])) for k in labels})


def is_non_decreasing(values: Sequence[float], tol: float = 1e-9) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))
