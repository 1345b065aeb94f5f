from dataclasses import replace

import pytest

from cdms.core import ConfigError
from cdms.cql import parse
from cdms.engine import QUERY_PHASES, REGISTRATION_PHASES
from cdms.model import render_schema_template, schema_of
from cdms.simnet import (
    COST_FIELDS,
    SimConfig,
    build_demo_world,
    build_world,
    churn_experiment,
    extra_space,
    query_breakdown,
    registration_breakdown,
    run_query_experiment,
    sweep_size,
    sweep_ttl,
    world_digest,
)

from .fixtures import SMALL_CONFIG


def oracle_mismatches(config: SimConfig, ttls) -> list:
    """Queries whose responders differ from BFS reach intersected with the brute-force qualifying set."""
    world = build_world(config)
    out = []
    for ttl in ttls:
        collector = world.query(world.experiment_query(), ttl)
        assert collector.entry is not None
        reach = world.reach(collector)
        qualifying = world.qualifying(collector.query, collector.injected_at)
        if collector.responders != reach & qualifying:
            out.append((config.seed, ttl, "responders"))
        if world.monitor.evaluated.get(collector.query_id, set()) != reach:
            out.append((config.seed, ttl, "evaluated"))
    return out


class TestConfig:
    def test_from_mapping_coerces(self):
        config = SimConfig.from_mapping({"ttl": "3", "latency_max_ms": "25"})
        assert config.ttl == 3
        assert config.latency_max_ms == 25.0
        assert SimConfig.from_mapping({"runs": 5}, base=SMALL_CONFIG).spaces_per_run == 30

    @pytest.mark.parametrize("values", [{"hops": "3"}, {"ttl": "three"}, {"ttl": None}])
    def test_from_mapping_errors(self, values):
        with pytest.raises(ConfigError):
            SimConfig.from_mapping(values)

    def test_from_file(self, tmp_path):
        path = tmp_path / "sim.env"
        path.write_text("# smaller world\nspaces_per_run=50\nseed=7\n")
        config = SimConfig.from_file(path)
        assert (config.spaces_per_run, config.seed) == (50, 7)
        with pytest.raises(ConfigError):
            SimConfig.from_file(tmp_path / "missing.env")

    def test_validate(self):
        assert SimConfig().validate() == SimConfig()
        assert SMALL_CONFIG.problems() == []
        with pytest.raises(ConfigError) as e:
            replace(SMALL_CONFIG, attrs_per_space=11, latency_min_ms=30.0).validate()
        assert "attrs_per_space" in str(e.value)
        assert "latency_max_ms" in str(e.value)

    def test_costs(self):
        costs = replace(SMALL_CONFIG, psg_eval_ms=3.0).costs
        assert costs.psg_eval_ms == 3.0
        assert costs.registration_request_ms == 20.0


class TestWorld:
    def test_query_cluster(self):
        world = build_world(SMALL_CONFIG)
        assert len(world.query_members()) == 30
        assert len(world.server.state.peers) == 36
        assert world.check() == []
        described = world.describe()
        assert described["query_cluster"]["size"] == 30
        assert described["peers"] == 36

    def test_deterministic(self):
        a, b = build_world(SMALL_CONFIG, keep_trace=True), build_world(SMALL_CONFIG, keep_trace=True)
        assert world_digest(a) == world_digest(b)
        assert run_query_experiment(a).to_dict() == run_query_experiment(b).to_dict()
        assert a.network.trace == b.network.trace
        assert a.network.trace_digest == b.network.trace_digest
        assert world_digest(build_world(SMALL_CONFIG, run=1)) != world_digest(a)

    def test_clock_only_moves_forward(self):
        world = build_world(SMALL_CONFIG, keep_trace=True)
        run_query_experiment(world)
        times = [float(line.split()[0][2:]) for line in world.network.trace]
        assert times == sorted(times)

    def test_closed_query_leaves_no_network_state(self):
        world = build_world(SMALL_CONFIG)
        first = run_query_experiment(world, ttl=4)
        assert first.message_count > 0
        assert world.network.lookup_forwards == {}
        assert world.network._waves == {}
        assert run_query_experiment(world, ttl=4).message_count == first.message_count


class TestRecall:
    def test_matches_oracles(self):
        for seed in range(5):
            config = replace(SMALL_CONFIG, seed=seed, spaces_per_run=10 + 8 * seed)
            assert oracle_mismatches(config, [1, 2, 3, 8]) == []

    def test_full_recall_when_ttl_covers_the_cluster(self):
        world = build_world(SMALL_CONFIG)
        metrics = run_query_experiment(world, ttl=len(world.query_members()) + 1)
        assert metrics.recall == 1.0
        assert metrics.reached_count == 30
        assert metrics.qualifying_count == 6
        assert metrics.responding_count == 6

    def test_ttl_one_evaluates_only_the_entry(self):
        def head_does_not_qualify(world):
            head = world.server.ring(world.query_domain).clusters[world.query_attribute].head
            return head not in world.qualifying(parse(world.experiment_query()), world.now)

        world = next(w for w in (build_world(SMALL_CONFIG, run=r) for r in range(20)) if head_does_not_qualify(w))
        metrics = run_query_experiment(world, ttl=1)
        assert metrics.reached_count == 1
        assert metrics.message_count == 0
        assert metrics.recall == 0.0

    def test_sweep_is_monotone(self):
        sweep = sweep_ttl(SMALL_CONFIG, [4, 1, 2], runs=2)
        assert sweep.ttls == [1, 2, 4]
        assert sweep.monotone_per_run
        assert [row[0] for row in sweep.rows] == [1, 2, 4]
        assert all(row[3] == 2 for row in sweep.rows)


class TestBreakdowns:
    def test_registration_phases(self):
        rows = registration_breakdown(SMALL_CONFIG, runs=2)
        assert tuple(label for label, _ in rows) == REGISTRATION_PHASES
        assert all(span > 0 for _, span in rows)

    def test_query_is_dominated_by_p2p_search(self):
        rows = dict(query_breakdown(SMALL_CONFIG, runs=2))
        assert tuple(rows) == QUERY_PHASES
        assert rows["p2p_search"] >= 0.5 * sum(rows.values())

    def test_free_registration(self):
        zero = {name: 0.0 for name in COST_FIELDS}
        config = replace(SMALL_CONFIG, latency_min_ms=0.0, latency_max_ms=0.0, **zero)
        world = build_world(config)
        template, data = extra_space(world)
        _, timing = world.register_space(template, data)
        assert timing.total == 0.0

    def test_size_sweep(self):
        sweep = sweep_size(SMALL_CONFIG, [30, 10], ttl=31, runs=2)
        assert [row[0] for row in sweep.rows] == [10, 30]
        assert sweep.mean_recall(10) == 1.0
        assert sweep.mean_recall(30) == 1.0


def test_churn_repair():
    report = churn_experiment(SMALL_CONFIG, ttl=31)
    assert report.cluster_size == 30
    assert len(report.departed) == 3
    assert report.head_before in report.departed
    assert report.head_before in report.detected
    assert set(report.detected) <= set(report.departed)
    assert report.problems == []
    if set(report.detected) == set(report.departed):
        assert report.head_after not in report.departed
        if report.connected:
            assert report.metrics.recall == 1.0
    record = report.to_dict()
    assert record["undetected"] == [str(p) for p in report.departed if p not in report.detected]


class TestMessaging:
    def test_ping_rounds_travel_the_network(self):
        world = build_world(SMALL_CONFIG)
        sent, dropped = world.network.sent, world.network.dropped
        assert world.run_liveness(rounds=1) == []
        pings = sent["PING"]
        assert pings > 0
        assert sent["PONG"] == pings
        assert world.network.dropped == dropped

        peer = world.query_members()[-1]
        clusters = [c for ring in world.server.state.manager for c in ring.clusters.values() if peer in c]
        unanswered = sum(len(c.neighbors(peer)) for c in clusters) + sum(1 for c in clusters if c.head == peer)
        own = sum(len(c.neighbors(peer)) for c in clusters)
        world.depart(peer)
        assert world.run_liveness(rounds=1) == []
        assert sent["PING"] - pings == pings - own
        assert sent["PONG"] - pings == pings - own - unanswered
        assert world.network.dropped - dropped == unanswered

    def test_registration_greets_neighbors(self):
        world = build_demo_world()
        links = sum(c.graph.number_of_edges() for ring in world.server.state.manager for c in ring.clusters.values())
        assert world.network.sent["JOIN"] == links
        world.run_until_idle()
        keith, alice = (next(g for g in world.gateways.values() if g.address == a) for a in ("psg-0001", "psg-0002"))
        assert alice.peer in keith.overlay.last_heard

    def test_schema_update_round_trip(self):
        world = build_demo_world()
        keith = next(p for p, g in world.gateways.items() if g.address == "psg-0001")
        changed = schema_of("PERSON", [("name", "text"), ("friend_list", "list-of-text"), ("age", "number")])
        mapping = world.update_space(keith, render_schema_template(changed))
        assert (world.network.sent["UPDATE"], world.network.sent["MAPPING_UPDATE"]) == (1, 1)
        assert mapping == world.server.record(keith).mapping
        assert mapping.global_names == ("name", "friend_list", "age")
        gateway = world.gateways[keith]
        assert gateway.state.schema.names == ("name", "friend_list", "age")
        assert "location" not in gateway.state.profile.data
        assert world.server.ring("PERSON").memberships(keith) == ["name", "friend_list", "age"]

    def test_departed_space_sends_no_update(self):
        world = build_demo_world()
        keith = next(p for p, g in world.gateways.items() if g.address == "psg-0001")
        world.depart(keith)
        before = world.server.record(keith).mapping
        assert world.update_space(keith, render_schema_template(schema_of("PERSON", [("name", "text")]))) == before
        assert world.network.sent["UPDATE"] == 0


@pytest.mark.slow
def test_oracle_equivalence_over_100_worlds():
    problems = []
    for seed in range(100):
        config = replace(SMALL_CONFIG, seed=seed, spaces_per_run=5 + seed % 46)
        problems += oracle_mismatches(config, [1, 3, 8])
    assert problems == []


@pytest.mark.slow
def test_recall_against_ttl_at_1000_peers():
    sweep = sweep_ttl(SimConfig(), range(1, 11), jobs=-1)
    assert sweep.mean_recall(8) == 1.0
    assert sweep.mean_recall(6) >= 0.99
    assert sweep.mean_recall(3) < sweep.mean_recall(6)
    assert sweep.monotone_per_run


@pytest.mark.slow
def test_response_time_against_size():
    sweep = sweep_size(SimConfig(), [200, 400, 600, 800, 1000], ttl=8, jobs=-1)
    means = [row[1] for row in sweep.rows]
    assert means == sorted(means)
    assert all(sweep.mean_recall(s) == 1.0 for s in sweep.sizes)


@pytest.mark.slow
def test_churn_at_200_peers():
    report = churn_experiment(replace(SimConfig(), spaces_per_run=200), ttl=8)
    assert len(report.departed) == 20
    assert report.head_before in report.detected
    assert report.problems == []
    if report.connected and set(report.detected) == set(report.departed):
        assert report.metrics.recall == 1.0
