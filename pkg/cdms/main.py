""" main.py
    Command line entry-point of cdms.
    For logging to be formatted consistently, this file should be imported prior to other libraries

   isort:skip_file
"""

from cdms.utils.logging import getLogger, init_logging, style_logging

style_logging()

import csv  # noqa: E402
import sys  # noqa: E402
from argparse import ArgumentParser, Namespace  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Dict, List, Mapping, Optional, TextIO, Union  # noqa: E402

import yaml  # noqa: E402

from cdms.core import (  # noqa: E402
    CdmsError,
    ConfigError,
    Configs,
    DecisionError,
    InvariantViolation,
    MappingConflictError,
    UserError,
)
from cdms.engine import ReviewReport  # noqa: E402
from cdms.matcher import Decision, Status, dump_queue, parse_decisions  # noqa: E402
from cdms.model import render_schema_template  # noqa: E402
from cdms.runner import DEFAULT_SIZES, DEFAULT_TTLS, EXPERIMENTS, Runner, expand_experiments, report  # noqa: E402
from cdms.simnet import SimConfig  # noqa: E402
from cdms.snapshot import load_world, save_world  # noqa: E402
from cdms.utils import env  # noqa: E402
from cdms.utils.io import bump_version, dump_yaml  # noqa: E402
from cdms.utils.utils import parse_int_range, to_dict  # noqa: E402

logger = getLogger(__name__)

logger.debug(yaml.dump({"Environment": {n: str(getattr(env, n)) for n in env.__all__}}))

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2

# sim-run defines these itself with sweep semantics
_RUN_FLAGS = ("seed", "ttl", "runs")


def _knob_configs() -> Configs:
    own = Configs()
    for name in _RUN_FLAGS:
        own.add(name=name, type=int, default=None, description="")
    return SimConfig.configs() - own


class Main:
    """Command line programme: experiments, queries and schema review.

    Usage:
        Main().argparse(["sim-run", "--experiment", "fig5", "--runs", "1"])
    """

    def __init__(self, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None):
        self._stdin = stdin
        self._stdout = stdout

    @property
    def stdin(self) -> TextIO:
        return self._stdin or sys.stdin

    @property
    def stdout(self) -> TextIO:
        return self._stdout or sys.stdout

    def argparse(self, args: List[str] = None, run=True):
        parser = ArgumentParser(prog="cdms", add_help=True)
        commands = parser.add_subparsers(dest="command", metavar="command")

        # sim-run
        sim = commands.add_parser("sim-run", help="Run simulated experiments and write CSV artifacts")
        flow = sim.add_argument_group("Flow", description="Which experiments to run and where to put the results.")
        flow.add_argument(
            "--experiment",
            type=str,
            default="all",
            choices=EXPERIMENTS + ("all",),
            help="Experiment to run. `all` runs every experiment except `demo`",
        )
        flow.add_argument("--config", type=str, default=None, help="Path to a key=value config file")
        flow.add_argument("--out", type=str, default=str(env.RESULTS_PATH), help="Directory for artifacts")
        flow.add_argument("--seed", type=int, default=None, help="Base random seed. CDMS_SEED overrides it")
        flow.add_argument("--peers", type=int, default=None, help="Query cluster size (spaces_per_run)")
        flow.add_argument("--ttl", type=str, default=None, help="TTL sweep as `a..b` or `a,b,c`")
        flow.add_argument("--sizes", type=str, default=None, help="Network sizes as `a,b,c` or `a..b`")
        flow.add_argument("--runs", type=int, default=None, help="Independent runs per sweep point")
        flow.add_argument("--jobs", type=int, default=1, help="Parallel workers for independent runs")
        flow.add_argument("--save-world", type=str, default=None, help="Write a snapshot of the run-0 world")
        flow.add_argument("--trace", type=str, default=None, help="Write the event trace of the run-0 query")
        knobs = sim.add_argument_group("Simulation", description="Settings of the simulated worlds.")
        knob_configs = _knob_configs()
        knob_configs.add_argparse_args(knobs)
        # Only flags given explicitly override the config file
        sim.set_defaults(**{name: None for name in knob_configs.names})

        # query
        query = commands.add_parser("query", help="Run one CQL query against a saved world")
        query.add_argument("--world", type=str, required=True, help="World snapshot")
        query.add_argument("--ttl", type=int, default=None, help="TTL of the lookup flood")
        query.add_argument("query", type=str, help="CQL text")

        # schema-review
        review = commands.add_parser("schema-review", help="Confirm or reject pending schema matches")
        review.add_argument("--world", type=str, required=True, help="World snapshot")
        mode = review.add_mutually_exclusive_group()
        mode.add_argument("--accept-all", action="store_true", help="Settle the queue as provisionally assigned")
        mode.add_argument("--decisions", type=str, default=None, help="Edited review queue file")
        review.add_argument("--out", type=str, default=None, help="Where to save the updated world")

        # schema-dump
        dump = commands.add_parser("schema-dump", help="Print the global schemas as schema templates")
        dump.add_argument("--world", type=str, required=True, help="World snapshot")
        dump.add_argument("--queue", action="store_true", help="Also print the review queue")

        # report
        rep = commands.add_parser("report", help="Summarize the structural checks of saved CSVs")
        rep.add_argument("--out", type=str, default=str(env.RESULTS_PATH), help="Directory holding the CSVs")

        # world-inspect
        inspect = commands.add_parser("world-inspect", help="Summarize a saved world")
        inspect.add_argument("--world", type=str, required=True, help="World snapshot")

        if run:
            parsed_args = parser.parse_args(args)
            if parsed_args.command is None:
                parser.print_usage(sys.stderr)
                return EXIT_USER
            return self.main(parsed_args)

        return parser

    def main(self, args: Union[Namespace, Mapping[str, Any]]) -> int:
        args = Namespace(**args) if isinstance(args, Mapping) else args
        commands: Dict[str, Callable[[Namespace], int]] = {
            "sim-run": self.sim_run,
            "query": self.query,
            "schema-review": self.schema_review,
            "schema-dump": self.schema_dump,
            "report": self.report,
            "world-inspect": self.world_inspect,
        }
        try:
            return commands[args.command](args)
        except UserError as e:
            logger.debug(f"{type(e).__name__}: {e}")
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code
        except InvariantViolation as e:
            print(f"internal error: {e}", file=sys.stderr)
            for line in e.trace:
                print(line, file=sys.stderr)
            return e.exit_code
        except CdmsError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INTERNAL

    # Commands ##################################################################

    def sim_config(self, args: Namespace) -> SimConfig:
        """Defaults < config file < explicit flags < CDMS_SEED."""
        config = SimConfig()
        if getattr(args, "config", None):
            config = SimConfig.from_file(args.config, config)
        explicit = {
            name: getattr(args, name)
            for name in _knob_configs().names
            if getattr(args, name, None) is not None
        }
        if getattr(args, "seed", None) is not None:
            explicit["seed"] = args.seed
        if getattr(args, "runs", None) is not None:
            explicit["runs"] = args.runs
        if getattr(args, "peers", None) is not None:
            explicit["spaces_per_run"] = args.peers
        config = SimConfig.from_mapping(explicit, config)
        seed = env.seed_override()
        if seed is not None:
            logger.info(f"CDMS_SEED={seed} overrides seed {config.seed}")
            config = replace(config, seed=seed)
        return config.validate()

    def sim_run(self, args: Namespace) -> int:
        config = self.sim_config(args)
        try:
            ttls = parse_int_range(args.ttl) if args.ttl else list(DEFAULT_TTLS)
            sizes = parse_int_range(args.sizes) if args.sizes else list(DEFAULT_SIZES)
        except ValueError as e:
            raise ConfigError(f"Bad range: {e}")
        if not ttls or min(ttls) < 1:
            raise ConfigError("--ttl needs positive values")
        if not sizes or min(sizes) < 1:
            raise ConfigError("--sizes needs positive values")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        jobs = min(args.jobs, env.NUM_CPU)

        out = Path(args.out)
        init_logging(out)
        if jobs < args.jobs:
            logger.info(f"Using {jobs} workers (NUM_CPU={env.NUM_CPU})")
        save_results = make_save_results(out)
        save_results(
            "params.yaml",
            {"config": config.to_dict(), "experiment": args.experiment, "ttls": ttls, "sizes": sizes},
        )

        runner = Runner(config, out, jobs)
        hprint(f"Running {', '.join(expand_experiments(args.experiment))}")
        summary = runner.run(args.experiment, ttls, sizes)
        if "churn" in summary:
            save_results("churn.yaml", summary["churn"])
        if args.trace:
            summary["trace_digest"] = runner.trace(args.trace)
        if args.save_world:
            kind = "demo" if args.experiment == "demo" else "fig5"
            save_world(runner.world(kind), args.save_world)
        dprint(to_dict(summary))
        save_results("summary.yaml", summary)
        return EXIT_OK

    def query(self, args: Namespace) -> int:
        world = load_world(args.world)
        collector = world.submit(args.query, args.ttl)
        writer = csv.writer(self.stdout, lineterminator="\n")
        writer.writerow(collector.header())

        # Continuous queries print each sample as the server ingests it
        def emit(row: List[str]):
            writer.writerow(row)
            self.stdout.flush()

        collector.on_row = emit
        world.run_until_closed(collector)
        logger.info(
            f"Query {collector.query_id}: {len(collector.results) + len(collector.notifications)} rows "
            f"in {collector.response_time:.1f} simulated ms"
        )
        return EXIT_OK

    def _interactive(self, server) -> ReviewReport:
        result = ReviewReport()
        for c in list(server.state.matcher.queue):
            if c.status is not Status.PENDING:
                continue
            decision = None
            while decision is None:
                print(
                    f"{c.local_name} → {c.global_ref}  via {c.criterion.value}  {float(c.score):.4f}  [y/n] ",
                    end="",
                    file=sys.stderr,
                    flush=True,
                )
                answer = self.stdin.readline()
                if not answer:
                    return result
                try:
                    decision = Decision.parse(answer.strip())
                except DecisionError as e:
                    print(str(e), file=sys.stderr)
            try:
                server.decide(c, decision)
                result.applied.append((c, decision))
            except (MappingConflictError, DecisionError) as e:
                result.refused.append((c, str(e)))
        return result

    def schema_review(self, args: Namespace) -> int:
        world = load_world(args.world)
        server = world.server
        if args.accept_all:
            result = server.accept_all()
        elif args.decisions:
            try:
                text = Path(args.decisions).read_text()
            except OSError as e:
                raise DecisionError(f"Cannot read decisions file: {e}")
            result = server.review(parse_decisions(text))
        else:
            result = self._interactive(server)
        world.run_until_idle()
        save_world(world, args.out or args.world)

        yaml.dump(
            {
                "applied": [f"{c.local_name} -> {c.global_ref}: {d.value}" for c, d in result.applied],
                "refused": [f"{c.local_name} -> {c.global_ref}" for c, _ in result.refused],
                "unmatched": list(result.unmatched),
                "pending": sum(c.status is Status.PENDING for c in server.state.matcher.queue),
            },
            self.stdout,
            sort_keys=True,
        )
        for c, reason in result.refused:
            print(f"error: refused {c.local_name} -> {c.global_ref}: {reason}", file=sys.stderr)
        return EXIT_USER if result.refused else EXIT_OK

    def schema_dump(self, args: Namespace) -> int:
        world = load_world(args.world)
        globals_ = world.server.globals
        for name in sorted(globals_):
            self.stdout.write(render_schema_template(globals_[name]))
        if args.queue:
            self.stdout.write(dump_queue(world.server.state.matcher.queue))
        return EXIT_OK

    def report(self, args: Namespace) -> int:
        yaml.dump(report(args.out), self.stdout, sort_keys=True)
        return EXIT_OK

    def world_inspect(self, args: Namespace) -> int:
        world = load_world(args.world)
        yaml.dump(world.describe(), self.stdout, sort_keys=True)
        return EXIT_OK


def hprint(msg: str):
    """Message header print

    Args:
        msg (str): Message to be printed
    """
    logger.info(f"🚀 {msg}")


def dprint(d: dict):
    logger.info(yaml.dump({"Results": d}))


def make_save_results(root_path: str, verbose=True) -> Callable[[str, Any], None]:
    if root_path is None:  # pragma: no cover

        def dummy(*args, **kwargs):
            return None

        return dummy

    root_path = Path(root_path)

    def bump_version_and_save(relative_path: str, data):
        nonlocal root_path
        path = bump_version(root_path / relative_path)
        if verbose:
            logger.info("💾 Saving " + str(path))
        dump_yaml(path, data)
        return path

    return bump_version_and_save


def main(argv: Optional[List[str]] = None) -> int:
    return Main().argparse(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
