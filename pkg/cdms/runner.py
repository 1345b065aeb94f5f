from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from cdms.engine import QUERY_PHASES, REGISTRATION_PHASES
from cdms.metrics import is_non_decreasing
from cdms.simnet import (
    SIZE_RANGE,
    SimConfig,
    SimWorld,
    build_demo_world,
    build_world,
    churn_experiment,
    query_breakdown,
    registration_breakdown,
    run_query_experiment,
    sweep_size,
    sweep_ttl,
)
from cdms.utils.io import dump_csv, is_nonempty_file, load_csv
from cdms.utils.logging import getLogger

logger = getLogger(__name__)

EXPERIMENTS = ("fig3", "fig4", "fig5", "fig6", "churn", "demo")
DEFAULT_TTLS = tuple(range(1, 11))
DEFAULT_SIZES = (200, 400, 600, 800, 1000)

CSV_HEADERS = {
    "fig3": ("phase", "sim_ms"),
    "fig4": ("phase", "sim_ms"),
    "fig5": ("ttl", "mean_recall", "stdev", "runs"),
    "fig6": ("size", "mean_response_ms", "stdev", "runs"),
}


def _f(x: float, digits: int = 6) -> str:
    return f"{x:.{digits}f}"


def expand_experiments(names: Union[str, Iterable[str]]) -> List[str]:
    names = [names] if isinstance(names, str) else list(names)
    out: List[str] = []
    for name in names:
        if name == "all":
            out += [e for e in EXPERIMENTS if e != "demo"]
        else:
            assert name in EXPERIMENTS, f"Unknown experiment '{name}'"
            out.append(name)
    return [e for i, e in enumerate(out) if e not in out[:i]]


class Runner:
    """Runs the experiment harnesses and writes their artifacts to ``out``.

    CSV artifacts keep fixed names so two runs with the same config can be
    compared byte for byte.
    """

    def __init__(self, config: SimConfig, out: Union[str, Path], jobs: int = 1):
        self.config = config.validate()
        self.out = Path(out)
        self.jobs = jobs

    def _write(self, name: str, rows: Sequence[Sequence[Any]]) -> Path:
        path = self.out / f"{name}.csv"
        dump_csv(path, CSV_HEADERS[name], rows)
        logger.info(f"💾 Saving {path}")
        return path

    def fig3(self, runs: Optional[int] = None) -> List[Tuple[str, float]]:
        rows = registration_breakdown(self.config, runs, self.jobs)
        self._write("fig3", [(phase, _f(ms, 3)) for phase, ms in rows])
        return rows

    def fig4(self, ttl: Optional[int] = None, runs: Optional[int] = None) -> List[Tuple[str, float]]:
        rows = query_breakdown(self.config, ttl, runs, self.jobs)
        self._write("fig4", [(phase, _f(ms, 3)) for phase, ms in rows])
        return rows

    def fig5(self, ttls: Iterable[int] = DEFAULT_TTLS, runs: Optional[int] = None):
        sweep = sweep_ttl(self.config, ttls, runs, self.jobs)
        self._write("fig5", [(t, _f(m), _f(s), n) for t, m, s, n in sweep.rows])
        return sweep

    def fig6(self, sizes: Iterable[int] = DEFAULT_SIZES, ttl: Optional[int] = None, runs: Optional[int] = None):
        sweep = sweep_size(self.config, sizes, ttl, runs, self.jobs)
        self._write("fig6", [(size, _f(m, 3), _f(s, 3), n) for size, m, s, n in sweep.rows])
        return sweep

    def churn(self, ttl: Optional[int] = None):
        return churn_experiment(self.config, 0, ttl)

    def world(self, experiment: str = "fig5", keep_trace: bool = False) -> SimWorld:
        if experiment == "demo":
            return build_demo_world(self.config.seed, keep_trace)
        return build_world(self.config, 0, keep_trace)

    def trace(self, path: Union[str, Path]) -> str:
        """Dump the event trace of run 0 and its experiment query; returns the digest."""
        world = build_world(self.config, 0, keep_trace=True)
        run_query_experiment(world, ttl=self.config.ttl)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        assert world.network.trace is not None
        with open(path, "w") as f:
            f.write("".join(line + "\n" for line in world.network.trace))
        logger.info(f"💾 Saving {path}")
        return world.network.trace_digest

    def run(
        self,
        experiments: Union[str, Iterable[str]] = "all",
        ttls: Iterable[int] = DEFAULT_TTLS,
        sizes: Iterable[int] = DEFAULT_SIZES,
        runs: Optional[int] = None,
    ) -> Dict[str, Any]:
        summary: Dict[str, Any] = {}
        for name in expand_experiments(experiments):
            logger.info(f"Running experiment {name}")
            if name == "fig3":
                summary[name] = dict(self.fig3(runs))
            elif name == "fig4":
                summary[name] = dict(self.fig4(runs=runs))
            elif name == "fig5":
                sweep = self.fig5(ttls, runs)
                summary[name] = {
                    "mean_recall": {t: m for t, m, _, _ in sweep.rows},
                    "monotone_per_run": sweep.monotone_per_run,
                }
            elif name == "fig6":
                sweep = self.fig6(sizes, runs=runs)
                summary[name] = {
                    "mean_response_ms": {s: m for s, m, _, _ in sweep.rows},
                    "mean_recall": {s: sweep.mean_recall(s) for s in sweep.sizes},
                }
            elif name == "churn":
                summary[name] = self.churn().to_dict()
            else:
                world = build_demo_world(self.config.seed)
                summary[name] = world.describe()
        return summary


def report(out: Union[str, Path]) -> Dict[str, Any]:
    """Structural checks over the fig CSVs found in ``out``."""
    out = Path(out)
    checks: Dict[str, Any] = {}

    path = out / "fig3.csv"
    if is_nonempty_file(path):
        rows = load_csv(path)
        checks["fig3"] = {
            "phases": [r["phase"] for r in rows],
            "labels_ok": tuple(r["phase"] for r in rows) == REGISTRATION_PHASES,
            "total_ms": sum(float(r["sim_ms"]) for r in rows),
        }

    path = out / "fig4.csv"
    if is_nonempty_file(path):
        spans = {r["phase"]: float(r["sim_ms"]) for r in load_csv(path)}
        total = sum(spans.values())
        share = spans.get("p2p_search", 0.0) / total if total else 0.0
        checks["fig4"] = {
            "phases": list(spans),
            "labels_ok": tuple(spans) == QUERY_PHASES,
            "p2p_search_share": share,
            "p2p_search_dominates": share >= 0.5,
        }

    path = out / "fig5.csv"
    if is_nonempty_file(path):
        recall = {int(r["ttl"]): float(r["mean_recall"]) for r in load_csv(path)}
        ttls = sorted(recall)
        checks["fig5"] = {
            "monotone_recall": is_non_decreasing([recall[t] for t in ttls]),
            "recall_at_ttl": {t: recall[t] for t in (3, 6, 8) if t in recall},
        }
        if 3 in recall and 6 in recall:
            checks["fig5"]["ttl3_below_ttl6"] = recall[3] < recall[6]

    path = out / "fig6.csv"
    if is_nonempty_file(path):
        response = {int(r["size"]): float(r["mean_response_ms"]) for r in load_csv(path)}
        sizes = sorted(response)
        lo, hi = SIZE_RANGE
        checks["fig6"] = {
            "monotone_response": is_non_decreasing([response[s] for s in sizes]),
            "extrapolated_sizes": [s for s in sizes if not lo <= s <= hi],
        }

    if not checks:
        logger.warning(f"No experiment CSVs found in {out}")
    return checks
