import numpy as np

from cdms.utils import io


def test_bump_version(tmp_path):
    summary = tmp_path / "summary.yaml"
    assert io.bump_version(summary) == summary

    summary.write_text("fig5: {}\n")
    assert io.bump_version(summary) == tmp_path / "summary_1.yaml"

    (tmp_path / "summary_1.yaml").write_text("fig5: {}\n")
    (tmp_path / "summary_final.yaml").write_text("")
    assert io.bump_version(summary) == tmp_path / "summary_2.yaml"
    assert io.bump_version(tmp_path / "summary_1.yaml") == tmp_path / "summary_2.yaml"

    # Other stems sharing the prefix do not count
    (tmp_path / "summary_ttl_7.yaml").write_text("")
    assert io.bump_version(summary) == tmp_path / "summary_2.yaml"


def test_csv_is_byte_stable(tmp_path):
    rows = [("registration_request", "20.000"), ("schema_matching", "30.000")]
    a, b = tmp_path / "a" / "fig3.csv", tmp_path / "b" / "fig3.csv"
    io.dump_csv(a, ("phase", "sim_ms"), rows)
    io.dump_csv(b, ("phase", "sim_ms"), rows)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() == b"phase,sim_ms\nregistration_request,20.000\nschema_matching,30.000\n"
    assert io.load_csv(a)[1] == {"phase": "schema_matching", "sim_ms": "30.000"}


def test_yaml_floats(tmp_path):
    path = tmp_path / "summary.yaml"
    io.dump_yaml(path, {"mean_recall": np.float64(1.0), "ttl": 8})
    assert io.load_yaml(path) == {"mean_recall": 1.0, "ttl": 8}
    assert "mean_recall: 1.000000000" in path.read_text()


def test_is_nonempty_file(tmp_path):
    path = tmp_path / "fig5.csv"
    assert not io.is_nonempty_file(path)
    path.write_text("")
    assert not io.is_nonempty_file(path)
    path.write_text("ttl\n")
    assert io.is_nonempty_file(path)
