import io
import logging

import pytest
import yaml

from cdms import Main
from cdms.model import AttributeValue, render_schema_template, schema_of
from cdms.simnet import build_demo_world
from cdms.snapshot import load_world, save_world
from cdms.utils.io import load_yaml

from .fixtures import QUERY_1, QUERY_3


SMALL_FLAGS = [
    "--spaces_per_run",
    "20",
    "--background_spaces",
    "4",
    "--attrs_per_space",
    "5",
    "--domain_attr_pool_size",
    "10",
]


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv("CDMS_SEED", raising=False)


@pytest.fixture
def demo_path(tmp_path):
    return save_world(build_demo_world(), tmp_path / "demo.world")


def run(args, stdin: str = ""):
    out = io.StringIO()
    code = Main(stdin=io.StringIO(stdin), stdout=out).argparse(args)
    return code, out.getvalue()


class TestArgs:
    def test_help(self, capsys, caplog):
        caplog.clear()
        with pytest.raises(SystemExit), caplog.at_level(logging.WARNING):
            Main().argparse(["sim-run", "--help"])
        assert len(caplog.messages) == 0
        captured = capsys.readouterr()
        assert "usage: cdms sim-run" in captured.out
        for msg in ["--experiment", "--save-world", "--trace", "--jobs", "--spaces_per_run", "--latency_max_ms"]:
            assert msg in captured.out

    def test_no_command(self, capsys):
        assert Main().argparse([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_parser_only(self):
        parser = Main().argparse(run=False)
        args = parser.parse_args(["report", "--out", "somewhere"])
        assert (args.command, args.out) == ("report", "somewhere")


class TestSimRun:
    def test_artifacts(self, tmp_path):
        out = tmp_path / "results"
        world, trace = tmp_path / "run0.world", tmp_path / "trace.log"
        args = ["sim-run", "--experiment", "fig5", "--out", str(out), "--ttl", "1..2", "--runs", "1"]
        args += SMALL_FLAGS + ["--save-world", str(world), "--trace", str(trace)]
        assert run(args)[0] == 0

        params = load_yaml(out / "params.yaml")
        assert params["ttls"] == [1, 2]
        assert params["config"]["spaces_per_run"] == 20
        assert params["config"]["runs"] == 1
        summary = load_yaml(out / "summary.yaml")
        assert set(summary["fig5"]["mean_recall"]) == {1, 2}
        assert (out / "fig5.csv").read_text().startswith("ttl,mean_recall,stdev,runs\n")
        assert trace.read_text().startswith("t=")
        assert load_world(world).config.spaces_per_run == 20

        # A second run keeps the first run's files
        assert run(args)[0] == 0
        assert (out / "summary_1.yaml").exists()
        assert load_yaml(out / "summary_1.yaml")["trace_digest"] == summary["trace_digest"]

    def test_config_file_and_flags(self, tmp_path):
        config = tmp_path / "sim.env"
        config.write_text("ttl=3\nseed=5\n")
        out = tmp_path / "results"
        args = ["sim-run", "--experiment", "fig3", "--out", str(out), "--runs", "1", "--config", str(config)]
        assert run(args + SMALL_FLAGS + ["--seed", "6"])[0] == 0
        params = load_yaml(out / "params.yaml")["config"]
        assert (params["ttl"], params["seed"]) == (3, 6)

    def test_peers_sets_cluster_size(self, tmp_path):
        out = tmp_path / "results"
        args = ["sim-run", "--experiment", "fig3", "--out", str(out), "--runs", "1"] + SMALL_FLAGS + ["--peers", "12"]
        assert run(args)[0] == 0
        assert load_yaml(out / "params.yaml")["config"]["spaces_per_run"] == 12

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CDMS_SEED", "99")
        out = tmp_path / "results"
        args = ["sim-run", "--experiment", "fig3", "--out", str(out), "--runs", "1", "--seed", "6"]
        assert run(args + SMALL_FLAGS)[0] == 0
        assert load_yaml(out / "params.yaml")["config"]["seed"] == 99

    @pytest.mark.parametrize(
        "flags",
        [["--ttl", "5..1"], ["--ttl", "0,1"], ["--sizes", "x"], ["--jobs", "0"], ["--degree", "0"]],
    )
    def test_bad_settings(self, tmp_path, capsys, flags):
        args = ["sim-run", "--experiment", "fig3", "--out", str(tmp_path), "--runs", "1"] + SMALL_FLAGS + flags
        assert run(args)[0] == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["sim-run", "--config", str(tmp_path / "none.env"), "--out", str(tmp_path)])[0] == 2
        assert "Cannot read config file" in capsys.readouterr().err


class TestQuery:
    def test_csv_rows(self, demo_path):
        code, out = run(["query", "--world", str(demo_path), QUERY_1])
        assert code == 0
        assert out == "query_id,peer,friend_list\n1,psg-0001,Alice;Bob\n"

    def test_continuous_rows_stream(self, monkeypatch):
        world = build_demo_world()
        monkeypatch.setattr("cdms.main.load_world", lambda path: world)

        class Recorder(io.StringIO):
            after_close = 0

            def write(self, text):
                self.after_close += any(c.closed for c in world.server.state.active.values())
                return super().write(text)

        out = Recorder()
        assert Main(stdout=out).argparse(["query", "--world", "demo.world", QUERY_3]) == 0
        lines = out.getvalue().splitlines()
        assert lines[0] == "query_id,peer,location,seq,timestamp"
        assert len(lines) == 1 + 121
        assert lines[1].startswith("1,psg-0001,")
        assert out.after_close == 0

    def test_syntax_error(self, demo_path, capsys):
        code, out = run(["query", "--world", str(demo_path), "SELECT FROM PERSON"])
        assert code == 2
        assert out == ""
        assert "error:" in capsys.readouterr().err

    def test_missing_world(self, tmp_path, capsys):
        assert run(["query", "--world", str(tmp_path / "none.world"), QUERY_1])[0] == 2
        assert "Cannot open world snapshot" in capsys.readouterr().err


class TestSchemaCommands:
    def test_dump(self, demo_path):
        code, out = run(["schema-dump", "--world", str(demo_path), "--queue"])
        assert code == 0
        assert out.index('<schema domain="HOME">') < out.index('<schema domain="OFFICE">')
        assert '<attribute name="noise" kind="number"/>' in out
        assert out.endswith("personName\tPERSON.name\tsubstring\t0.5000\tpending\n")

    def test_accept_all(self, demo_path, tmp_path):
        reviewed = tmp_path / "reviewed.world"
        code, out = run(["schema-review", "--world", str(demo_path), "--accept-all", "--out", str(reviewed)])
        assert code == 0
        assert yaml.safe_load(out) == {
            "applied": ["personName -> PERSON.name: confirm"],
            "refused": [],
            "unmatched": [],
            "pending": 0,
        }
        assert load_world(reviewed).server.state.matcher.queue == []
        assert len(load_world(demo_path).server.state.matcher.queue) == 1

    def test_decisions_file(self, demo_path, tmp_path):
        decisions = tmp_path / "decisions.tsv"
        decisions.write_text(
            "personName\tPERSON.name\tsubstring\t0.5000\treject\nage\tPERSON.age\texact\t1\tconfirmed\n"
        )
        code, out = run(["schema-review", "--world", str(demo_path), "--decisions", str(decisions)])
        assert code == 0
        result = yaml.safe_load(out)
        assert result["applied"] == ["personName -> PERSON.name: reject"]
        assert result["unmatched"] == ["age\tPERSON.age"]
        world = load_world(demo_path)
        assert "personName" in world.server.globals["PERSON"]
        gateway = next(g for g in world.gateways.values() if g.address == "psg-0002")
        assert gateway.state.mapping.to_local("personName") == "personName"

    def test_interactive(self, demo_path, capsys):
        code, out = run(["schema-review", "--world", str(demo_path)], stdin="maybe\nn\n")
        assert code == 0
        assert yaml.safe_load(out)["applied"] == ["personName -> PERSON.name: reject"]
        assert "Not a decision: 'maybe'" in capsys.readouterr().err

    def test_interactive_eof_keeps_queue(self, demo_path):
        code, out = run(["schema-review", "--world", str(demo_path)], stdin="")
        assert code == 0
        assert yaml.safe_load(out)["pending"] == 1

    def test_refused_decision_exits_with_2(self, tmp_path, capsys):
        world = build_demo_world()
        world.server.predefine(schema_of("SHOP", [("name", "text")]))
        shop = schema_of("SHOP", [("nameLabel", "text"), ("namePlate", "text")])
        data = {"nameLabel": AttributeValue.text("A"), "namePlate": AttributeValue.text("B")}
        world.register_space(render_schema_template(shop), data)
        path = save_world(world, tmp_path / "shop.world")
        decisions = tmp_path / "decisions.tsv"
        decisions.write_text("nameLabel SHOP.name substring 0.5 y\nnamePlate SHOP.name substring 0.5 y\n")

        code, out = run(["schema-review", "--world", str(path), "--decisions", str(decisions)])
        assert code == 2
        assert yaml.safe_load(out)["refused"] == ["namePlate -> SHOP.name"]
        assert "Conflicting confirmations" in capsys.readouterr().err

    def test_bad_decisions_file(self, demo_path, tmp_path, capsys):
        decisions = tmp_path / "decisions.tsv"
        decisions.write_text("personName reject\n")
        assert run(["schema-review", "--world", str(demo_path), "--decisions", str(decisions)])[0] == 2
        assert "line 1" in capsys.readouterr().err


def test_world_inspect(demo_path):
    code, out = run(["world-inspect", "--world", str(demo_path)])
    assert code == 0
    described = yaml.safe_load(out)
    assert described["peers"] == 7
    assert described["review_queue"] == 1


def test_report(tmp_path):
    out = tmp_path / "results"
    assert run(["sim-run", "--experiment", "fig4", "--out", str(out), "--runs", "1"] + SMALL_FLAGS)[0] == 0
    code, text = run(["report", "--out", str(out)])
    assert code == 0
    assert yaml.safe_load(text)["fig4"]["labels_ok"] is True
