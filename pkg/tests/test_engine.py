import pytest

from cdms.core import (
    CqlSyntaxError,
    DecisionError,
    QueryValidationError,
    RegistrationError,
    SchemaTemplateError,
    UnknownAttributeError,
)
from cdms.cql import parse, validate
from cdms.engine import (
    QUERY_PHASES,
    REGISTRATION_PHASES,
    ContextStore,
    CostModel,
    PsgState,
    Server,
    SpaceGateway,
    event_timeline,
    history_query,
    plan,
    psg_evaluate,
)
from cdms.matcher import Decision, DecisionLine, SchemaMapping, Status
from cdms.messages import Lookup, Subscribe
from cdms.model import AttributeValue, PeerId, SpaceProfile, StepSignal, render_schema_template, schema_of
from cdms.overlay import LookupRequest, detect_failure
from cdms.simnet import OFFICE_LOCATION, build_demo_world

from .fixtures import (
    HOME,
    OFFICE,
    PERSON,
    QUERY_1,
    QUERY_2,
    QUERY_3,
    VACANT_RULE,
    ManualTransport,
    seeded_globals,
)

text, number = AttributeValue.text, AttributeValue.number
KEITH = PeerId(1, "psg-0001")


def template(schema) -> str:
    return render_schema_template(schema)


class TestRegistration:
    def test_phases_and_costs(self):
        server = Server()
        ack, timing = server.register_space(template(PERSON), "psg-0001")
        assert tuple(timing.spans) == REGISTRATION_PHASES
        assert timing.spans == {
            "registration_request": 20.0,
            "schema_matching": 3.0,
            "return_sc_list": 70.0,  # 40 + 3 new clusters x 10
            "p2p_connection_establishment": 15.0,
        }
        assert ack.peer == PeerId(1, "psg-0001")
        assert ack.sc_list == (
            ("PERSON", "name", ack.peer),
            ("PERSON", "friend_list", ack.peer),
            ("PERSON", "location", ack.peer),
        )
        assert ack.mapping == SchemaMapping.identity(PERSON, ack.peer)

        ack2, timing2 = server.register_space(template(PERSON), "psg-0002", latency=lambda: 10.0)
        assert timing2.spans["registration_request"] == 30.0
        assert timing2.spans["return_sc_list"] == 50.0
        assert timing2.spans["p2p_connection_establishment"] == 3 * (20.0 + 5.0)
        assert ack2.sc_list[0] == ("PERSON", "name", ack.peer)
        assert server.globals["PERSON"].member_count == 2
        assert server.state.check() == []

    def test_zero_costs(self):
        server = Server(costs=CostModel.zero())
        for address in ("psg-0001", "psg-0002", "psg-0003"):
            _, timing = server.register_space(template(HOME), address)
            assert timing.total == 0.0

    def test_same_address_same_template(self):
        server = Server()
        ack, _ = server.register_space(template(PERSON), "psg-0001")
        again, timing = server.register_space(template(PERSON), "psg-0001")
        assert again.peer == ack.peer
        assert timing.spans["schema_matching"] == 0.0
        assert len(server.state.peers) == 1

    def test_same_address_new_template(self):
        server = Server()
        old, _ = server.register_space(template(PERSON), "psg-0001")
        new, _ = server.register_space(template(HOME), "psg-0001")
        assert new.peer != old.peer
        assert list(server.state.peers) == [new.peer]
        assert server.ring("PERSON").peers == set()
        assert server.globals["PERSON"].member_count == 0

    def test_bad_templates(self):
        server = Server()
        with pytest.raises(SchemaTemplateError):
            server.register_space("<schema>", "psg-0001")
        dup = '<schema domain="A"><attribute name="x" kind="text"/><attribute name="x" kind="text"/></schema>'
        with pytest.raises(RegistrationError):
            server.register_space(dup, "psg-0001")
        assert server.state.peers == {}
        assert server.globals == {}

    def test_house_joins_home(self):
        server = Server()
        server.register_space(template(HOME), "psg-0001")
        house = schema_of(
            "HOUSE", [("temperature", "number"), ("light", "number"), ("humidity", "number"), ("noise", "number")]
        )
        ack, timing = server.register_space(template(house), "psg-0002")
        assert ack.mapping.domain == "HOME"
        assert server.ring("HOME").positions == ["CSG", "temperature", "light", "humidity", "noise"]
        assert timing.spans["return_sc_list"] == 40.0 + 10.0
        assert "HOUSE" not in server.globals


class TestSchemaChanges:
    def test_update_moves_clusters(self):
        server = Server()
        ack, _ = server.register_space(template(PERSON), "psg-0001")
        changed = schema_of("PERSON", [("name", "text"), ("friend_list", "list-of-text"), ("age", "number")])
        diff = server.update_schema(ack.peer, template(changed))
        assert (diff.added, diff.removed) == (("age",), ("location",))
        assert (diff.joined, diff.left) == (("age",), ("location",))
        assert server.ring("PERSON").memberships(ack.peer) == ["name", "friend_list", "age"]
        assert server.state.check() == []

    def test_remove_peer(self):
        server = Server()
        a, _ = server.register_space(template(PERSON), "psg-0001")
        b, _ = server.register_space(template(PERSON), "psg-0002")
        server.remove_peer(a.peer)
        ring = server.ring("PERSON")
        assert ring.clusters["name"].head == b.peer
        assert ring.csg.directory["name"] == b.peer
        assert server.globals["PERSON"].member_count == 1
        server.remove_peer(a.peer)
        assert server.state.check() == []

    def test_remove_every_attribute(self):
        server = Server()
        ack, _ = server.register_space(template(PERSON), "psg-0001")
        diff = server.update_schema(ack.peer, template(schema_of("PERSON", [])))
        assert diff.removed == PERSON.names
        assert diff.left == ("name", "friend_list", "location")
        assert server.ring("PERSON").memberships(ack.peer) == []
        assert server.ring("PERSON").clusters["name"].head is None
        assert ack.peer in server.state.peers
        assert server.record(ack.peer).mapping.pairs == ()
        assert server.state.check() == []

    def test_rename_equals_fresh_registration(self):
        renamed = schema_of("PERSON", [("personName", "text"), ("friend_list", "list-of-text"), ("location", "text")])
        updated = Server()
        updated.register_space(template(PERSON), "psg-0001")
        ack, _ = updated.register_space(template(PERSON), "psg-0002")
        diff = updated.update_schema(ack.peer, template(renamed))
        assert (diff.added, diff.removed) == (("personName",), ("name",))

        fresh = Server()
        fresh.register_space(template(PERSON), "psg-0001")
        again, _ = fresh.register_space(template(renamed), "psg-0002")
        assert again.peer == ack.peer
        assert updated.record(ack.peer).mapping == fresh.record(again.peer).mapping
        assert updated.globals == fresh.globals
        assert updated.ring("PERSON").memberships(ack.peer) == fresh.ring("PERSON").memberships(again.peer)

    def test_same_schema_twice_changes_nothing(self):
        server, ack = _person_server()
        globals_ = dict(server.globals)
        alice = server.record(ack.peer).template
        diff = server.update_schema(ack.peer, alice)
        assert (diff.added, diff.removed, diff.joined, diff.left) == ((), (), (), ())
        assert diff.mapping == ack.mapping
        assert server.globals == globals_

    def test_mapping_update_reaches_the_gateway(self):
        server, ack = _person_server()
        transport = ManualTransport()
        server.transport = transport
        alice = SpaceGateway(SpaceProfile(ack.peer, server.record(ack.peer).schema), mapping=ack.mapping)
        alice.transport = transport
        transport.endpoints.update({alice.address: alice.handle, server.address: server.handle})

        mapping = server.decide(server.state.matcher.queue[0], Decision.REJECT)
        transport.run()
        (update,) = transport.of_kind("MAPPING_UPDATE")
        assert update.mapping == mapping
        assert alice.state.mapping == mapping
        assert alice.state.mapping.to_local("personName") == "personName"

        alice.change_schema(template(schema_of("PERSON", [("personName", "text"), ("age", "number")])))
        transport.run()
        assert [m.kind for _, _, m in transport.sent[1:]] == ["UPDATE", "MAPPING_UPDATE"]
        assert alice.state.mapping == server.record(ack.peer).mapping
        assert alice.state.mapping.global_names == ("personName", "age")

        alice.depart()
        server.update_schema(ack.peer, template(PERSON))
        transport.run()
        assert alice.state.mapping.global_names == ("personName", "age")


def _person_server():
    server = Server()
    server.register_space(template(PERSON), "psg-0001")
    alice = schema_of("PERSON", [("personName", "text"), ("friendList", "list-of-text"), ("location", "text")])
    ack, _ = server.register_space(template(alice), "psg-0002")
    return server, ack


class TestReview:
    def test_provisional_mapping_and_queue(self):
        server, ack = _person_server()
        assert ack.mapping.to_local("name") == "personName"
        queue = server.state.matcher.queue
        assert [(c.local_name, c.global_ref, c.status) for c in queue] == [
            ("personName", "PERSON.name", Status.PENDING)
        ]

    def test_confirm_keeps_mapping(self):
        server, ack = _person_server()
        candidate = server.state.matcher.queue[0]
        assert server.decide(candidate.id, "y") is None
        assert server.state.matcher.queue == []
        assert server.record(ack.peer).mapping == ack.mapping

    def test_reject_remaps(self):
        server, ack = _person_server()
        mapping = server.decide(server.state.matcher.queue[0], Decision.REJECT)
        assert mapping.to_local("personName") == "personName"
        assert mapping.to_local("name") is None
        ring = server.ring("PERSON")
        assert ring.memberships(ack.peer) == ["friend_list", "location", "personName"]
        assert server.state.check() == []

    def test_decide_twice(self):
        server, _ = _person_server()
        candidate = server.state.matcher.queue[0]
        server.decide(candidate, "n")
        with pytest.raises(DecisionError):
            server.decide(candidate, "y")

    def test_double_confirm_is_refused(self):
        server = Server()
        server.predefine(schema_of("D", [("name", "text")]))
        server.register_space(template(schema_of("D", [("nameLabel", "text"), ("namePlate", "text")])), "psg-0001")
        assert len(server.state.matcher.queue) == 2
        report = server.review(
            [
                DecisionLine("nameLabel", "D.name", Decision.CONFIRM),
                DecisionLine("namePlate", "D.name", Decision.CONFIRM),
                DecisionLine("nameTag", "D.name", Decision.CONFIRM),
            ]
        )
        assert [c.local_name for c, _ in report.applied] == ["nameLabel"]
        assert [c.local_name for c, _ in report.refused] == ["namePlate"]
        assert "Conflicting" in report.refused[0][1]
        assert report.unmatched == ["nameTag\tD.name"]
        assert [c.local_name for c in server.state.matcher.queue] == ["namePlate"]

    def test_house_review_all_yes(self):
        server = Server()
        server.register_space(template(HOME), "psg-0001")
        house = schema_of("HOUSE", [("temp", "number"), ("lightLevel", "number"), ("humidity", "number")])
        ack, _ = server.register_space(template(house), "psg-0002")
        queue = server.state.matcher.queue
        assert sorted(c.global_ref for c in queue) == ["HOME.light", "HOME.temperature"]
        report = server.review([DecisionLine(c.local_name, c.global_ref, Decision.CONFIRM) for c in list(queue)])
        assert len(report.applied) == 2
        assert server.state.matcher.queue == []
        mapping = server.record(ack.peer).mapping
        assert mapping.to_local("temperature") == "temp"
        assert mapping.to_local("light") == "lightLevel"

    def test_accept_all(self):
        server = Server()
        server.predefine(schema_of("D", [("name", "text")]))
        ack, _ = server.register_space(
            template(schema_of("D", [("nameLabel", "text"), ("namePlate", "text")])), "psg-0001"
        )
        report = server.accept_all()
        decided = {c.local_name: d for c, d in report.applied}
        assert decided == {"nameLabel": Decision.CONFIRM, "namePlate": Decision.REJECT}
        assert server.state.matcher.queue == []
        assert server.record(ack.peer).mapping == ack.mapping
        assert server.accept_all().applied == []


class TestPlanning:
    def test_project_over_scan(self):
        query_plan = plan(validate(parse(QUERY_3), seeded_globals()))
        assert query_plan.operators() == ["Project", "Scan"]
        assert query_plan.scan.sample_period_ms == 60_000
        assert query_plan.render() == (
            'Project[location] -> Scan(PERSON, name = "Keith", ttl=8, every 60000 ms for 7200000 ms)'
        )

    def test_quiescence(self):
        assert Server(latency_max_ms=20.0).quiescence(8) == 3 * 21.0 * 8
        assert Server(quiescence_ms=100.0).quiescence(8) == 100.0


class TestPsg:
    def _office(self, occupancy) -> PsgState:
        profile = SpaceProfile(
            PeerId(4, "psg-0004"),
            OFFICE,
            {"location": text(OFFICE_LOCATION), "occupancy": occupancy},
            {"isVacant": VACANT_RULE},
        )
        return PsgState(profile, SchemaMapping.identity(OFFICE, profile.peer))

    def test_rule_value(self):
        psg = self._office(StepSignal(number(3), ((60_000.0, number(0)),)))
        assert psg.value("isVacant", 0) == AttributeValue.boolean(False)
        assert psg.value("isVacant", 60_000) == AttributeValue.boolean(True)

    def test_event_timeline_counts_transitions(self):
        occupancy = StepSignal(
            number(2),
            (
                (10.0, number(0)),
                (20.0, number(1)),
                (30.0, number(0)),
                (40.0, number(0)),
                (50.0, number(3)),
            ),
        )
        psg = self._office(occupancy)
        sub = Subscribe(1, "isVacant", parse(QUERY_2).predicate, None, "server")
        timeline = event_timeline(psg, sub, 0.0)
        assert timeline == [(0.0, False), (10.0, True), (20.0, False), (30.0, True), (50.0, False)]

        bounded = Subscribe(1, "isVacant", parse(QUERY_2).predicate, 35, "server")
        assert event_timeline(psg, bounded, 0.0) == [(0.0, False), (10.0, True), (20.0, False), (30.0, True)]
        assert event_timeline(psg, sub, 15.0)[0] == (15.0, True)

        flat = self._office(number(4))
        assert event_timeline(flat, sub, 0.0) == [(0.0, False)]

    def test_private_and_unmapped_are_invisible(self):
        alice = schema_of("PERSON", [("personName", "text"), ("location", "text")], private=["location"])
        profile = SpaceProfile(PeerId(2, "psg-0002"), alice, {"personName": text("Alice"), "location": text("UTown")})
        mapping = SchemaMapping(profile.peer, "PERSON", (("name", "personName"), ("location", "location")))
        psg = PsgState(profile, mapping)
        assert psg.visible("location", 0) is None
        assert psg.visible("personName", 0) == text("Alice")
        assert psg.visible("personName", 0, unmapped={"personName"}) is None

        req = LookupRequest(1, parse('SELECT location, name FROM PERSON WHERE name = "Alice"'), 8, "server")
        result = psg_evaluate(psg, req, 5.0)
        assert result.values == (("location", None), ("name", text("Alice")))
        assert psg_evaluate(psg, LookupRequest(2, parse(QUERY_1), 8, "server"), 5.0) is None

    def test_context_store_range(self):
        store = ContextStore()
        for t in (0.0, 10.0, 20.0, 30.0):
            store.append("temperature", number(int(t)), t)
        assert [t for _, t in store.range("temperature", 10.0, 30.0)] == [10.0, 20.0]
        assert store.range("humidity", 0, 100) == []
        assert len(store) == 4


class TestGateway:
    def _keith(self, transport: ManualTransport) -> SpaceGateway:
        profile = SpaceProfile(KEITH, PERSON, {"name": text("Keith"), "location": text(OFFICE_LOCATION)})
        gateway = SpaceGateway(profile)
        gateway.transport = transport
        return gateway

    def test_continuous_samples(self):
        transport = ManualTransport()
        gateway = self._keith(transport)
        gateway.on_lookup(Lookup(LookupRequest(7, parse(QUERY_3), 8, "server", cluster="name")))
        transport.run()
        results = transport.of_kind("RESULT")
        assert len(results) == 121
        assert [r.seq for r in results] == list(range(121))
        assert results[-1].timestamp - results[0].timestamp == 7_200_000
        assert all(dst == "server" for _, dst, _ in transport.sent)
        assert gateway.state.jobs == {}
        assert len(history_query(gateway.state, "location", 0, float("inf"))) == 121
        with pytest.raises(UnknownAttributeError):
            history_query(gateway.state, "age", 0, 1)

    def test_departure_stops_pushes(self):
        transport = ManualTransport()
        gateway = self._keith(transport)
        gateway.on_lookup(Lookup(LookupRequest(7, parse(QUERY_3), 8, "server", cluster="name")))
        transport.run(until=1_800_000)
        gateway.depart()
        transport.run()
        assert len(transport.of_kind("RESULT")) == 30

    def test_duplicate_lookup_is_evaluated_once(self):
        transport = ManualTransport()
        gateway = self._keith(transport)
        req = LookupRequest(3, parse(QUERY_1), 8, "server", cluster="friend_list")
        gateway.on_lookup(Lookup(req))
        gateway.on_lookup(Lookup(req.forwarded(), PeerId(2, "psg-0002")))
        transport.run()
        assert len(transport.of_kind("RESULT")) == 1

    def test_ping_pong(self):
        transport = ManualTransport()
        keith = self._keith(transport)
        bob = SpaceGateway(SpaceProfile(PeerId(3, "psg-0003"), PERSON))
        bob.transport = transport
        transport.endpoints.update({keith.address: keith.handle, bob.address: bob.handle})

        keith.ping(bob.peer, 1)
        transport.run()
        assert [m.kind for _, _, m in transport.sent] == ["PING", "PONG"]
        assert keith.overlay.outstanding == {}
        assert keith.overlay.last_heard[bob.peer] == 2.0

        bob.depart()
        keith.ping(bob.peer, 2)
        transport.run()
        assert len(transport.of_kind("PONG")) == 1
        assert detect_failure(keith.overlay, transport.now(), max_missed=1) == [bob.peer]

    def test_join_greets_neighbors(self):
        transport = ManualTransport()
        bob = SpaceGateway(SpaceProfile(PeerId(3, "psg-0003"), PERSON))
        bob.transport = transport
        profile = SpaceProfile(KEITH, PERSON, {"name": text("Keith")})
        keith = SpaceGateway(profile, neighbors=lambda cluster: {bob.peer} if cluster == "name" else set())
        keith.transport = transport
        transport.endpoints.update({keith.address: keith.handle, bob.address: bob.handle})

        keith.announce(["name", "location"])
        transport.run()
        (join,) = transport.of_kind("JOIN")
        assert (join.cluster, join.peer) == (("PERSON", "name"), KEITH)
        assert bob.overlay.last_heard[KEITH] == 1.0

    def test_csg_pings_heads(self):
        transport = ManualTransport()
        server = Server()
        server.transport = transport
        ack, _ = server.register_space(template(PERSON), KEITH.address)
        keith = self._keith(transport)
        ring = server.ring("PERSON")
        transport.endpoints[keith.address] = keith.handle
        transport.endpoints[ring.csg.address] = lambda src, message: server.handle_csg(ring.csg.address, message)

        server.ping_heads(5)
        transport.run()
        assert len(transport.of_kind("PING")) == len(transport.of_kind("PONG")) == 3
        assert ring.csg.liveness.outstanding == {}
        assert ring.csg.liveness.last_heard[ack.peer] == 2.0


class TestQueries:
    def test_query_1(self):
        world = build_demo_world()
        collector = world.query(QUERY_1)
        assert collector.header() == ["query_id", "peer", "friend_list"]
        assert collector.rows() == [["1", "psg-0001", "Alice;Bob"]]
        timing = collector.timing()
        assert tuple(timing.spans) == QUERY_PHASES
        assert timing.spans["parse"] == pytest.approx(2.0)
        assert timing.spans["cluster_lookup"] == pytest.approx(2.0 * 2)
        assert collector.response_time == pytest.approx(timing.total)

    def test_query_2_notifications(self):
        world = build_demo_world()
        collector = world.query(QUERY_2)
        rows = collector.rows()
        assert collector.header() == ["query_id", "peer", "isVacant", "timestamp"]
        assert [r[1:3] for r in rows] == [["psg-0004", "false"], ["psg-0004", "true"], ["psg-0004", "false"]]
        assert [r[3] for r in rows[1:]] == ["60000", "180000"]

    def test_query_3_samples(self):
        world = build_demo_world()
        collector = world.query(QUERY_3)
        rows = collector.rows()
        assert len(rows) == 121
        assert {r[1] for r in rows} == {"psg-0001"}
        assert rows[0][2] == OFFICE_LOCATION
        assert rows[-1][2] == "COM1 #02-12, NUS"
        assert [r[3] for r in rows] == [str(k) for k in range(121)]
        assert collector.truncated == set()

    def test_rows_are_handed_over_on_ingest(self):
        world = build_demo_world()
        collector = world.submit(QUERY_3)
        seen = []
        collector.on_row = lambda row: seen.append((row, collector.closed))
        world.run_until_closed(collector)
        assert [row for row, _ in seen] == collector.rows()
        assert not any(closed for _, closed in seen)

    def test_private_location_is_blank(self):
        world = build_demo_world()
        rows = world.query("SELECT location FROM PERSON").rows()
        assert {r[1]: r[2] for r in rows} == {
            "psg-0001": OFFICE_LOCATION,
            "psg-0002": "",
            "psg-0003": "UTown",
        }

    def test_errors_before_scheduling(self):
        world = build_demo_world()
        with pytest.raises(CqlSyntaxError):
            world.submit("SELECT FROM PERSON")
        with pytest.raises(QueryValidationError):
            world.submit("SELECT age FROM PERSON")
        assert world.server.state.active == {}

    def test_empty_cluster(self):
        world = build_demo_world()
        world.server.predefine(schema_of("SHOP", [("price", "number")]))
        world._sync_csgs()
        collector = world.query("SELECT price FROM SHOP")
        assert collector.empty_entry
        assert collector.rows() == []
