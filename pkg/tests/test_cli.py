import json
from pathlib import Path

import numpy as np
import pytest

from navsto import cli


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


SIM_CFG = """
# comment line
resolution = 3
dt = 2e-4
horizon = 0.002
scheme = em
mode = full
alpha0 = 0.75
q0 = 10.0
seed = 7
snapshot_stride = 5
"""


class TestConfig:
    def test_parse_with_comments_and_types(self, tmp_path):
        cfg = cli.parse_config(write_cfg(tmp_path, SIM_CFG))
        assert cfg["resolution"] == 3 and cfg["dt"] == 2e-4 and cfg["scheme"] == "em"

    def test_unknown_key_lists_valid(self, tmp_path):
        p = write_cfg(tmp_path, "not_a_key = 3\n")
        with pytest.raises(cli.ConfigError, match="valid keys"):
            cli.parse_config(p)

    def test_bad_value(self, tmp_path):
        p = write_cfg(tmp_path, "resolution = soup\n")
        with pytest.raises(cli.ConfigError):
            cli.parse_config(p)

    def test_missing_equals(self, tmp_path):
        p = write_cfg(tmp_path, "resolution 3\n")
        with pytest.raises(cli.ConfigError):
            cli.parse_config(p)


class TestSimulate:
    def test_row_count_and_snapshots(self, tmp_path):
        cfgp = write_cfg(tmp_path, SIM_CFG)
        rc = cli.main(["simulate", "--config", cfgp, "--seeds", "0..1",
                       "--out", str(tmp_path / "out")])
        assert rc == 0
        run_dir = next((tmp_path / "out").glob("simulate-*"))
        rows = (run_dir / "path_0.csv").read_text().splitlines()
        assert len(rows) - 1 == int(0.002 / 2e-4 / 5) + 1
        assert (run_dir / "covariance.csv").exists()
        assert len(list(run_dir.glob("snap_0_*.bin"))) == 3

    def test_byte_identical_reruns(self, tmp_path):
        cfgp = write_cfg(tmp_path, SIM_CFG)
        cli.main(["simulate", "--config", cfgp, "--seeds", "0..0",
                  "--out", str(tmp_path / "a")])
        cli.main(["simulate", "--config", cfgp, "--seeds", "0..0",
                  "--out", str(tmp_path / "b")])
        da = next((tmp_path / "a").glob("simulate-*"))
        db = next((tmp_path / "b").glob("simulate-*"))
        assert da.name == db.name  # same manifest hash
        for f in sorted(da.iterdir()):
            if f.name == "manifest.json":
                continue  # wall clock lives here by design
            assert f.read_bytes() == (db / f.name).read_bytes(), f.name

    def test_dt_override_changes_hash(self, tmp_path):
        cfgp = write_cfg(tmp_path, SIM_CFG)
        cli.main(["simulate", "--config", cfgp, "--out", str(tmp_path / "c")])
        cli.main(["simulate", "--config", cfgp, "--dt-override", "1e-4",
                  "--out", str(tmp_path / "c")])
        assert len(list((tmp_path / "c").glob("simulate-*"))) == 2


class TestVerifyCli:
    MP2 = """
resolution = 3
dt = 1e-3
horizon = 0.008
scheme = expo-em
mode = full
alpha0 = 0.75
q0 = 30.0
seed = 78
checkpoints = 0.002,0.004,0.006,0.008
control_paths = 300
"""

    def test_verify_mp2_golden_passes(self, tmp_path):
        cfgp = write_cfg(tmp_path, self.MP2)
        rc = cli.main(["verify-mp2", "--config", cfgp, "--seeds", "0..599",
                       "--out", str(tmp_path / "v")])
        assert rc == 0
        run = next((tmp_path / "v").glob("verify-mp2-*"))
        rep = json.loads((run / "report.json").read_text())
        assert rep["verdict"] == "pass"
        assert rep["controls"][0]["valid"]
        assert "runtime_s" not in rep  # timestamps only in the manifest

    def test_verify_mp2_corrupted_main_fails(self, tmp_path):
        # corrupt the main ensemble by booking a different q0 in the test
        # functions than the dynamics used: variance ratio must fail
        cfgp = write_cfg(tmp_path, self.MP2.replace("q0 = 30.0", "q0 = 30.0") +
                         "control_amplitude = 1.0\n")
        rc = cli.main(["verify-mp2", "--config", cfgp, "--seeds", "0..599",
                       "--out", str(tmp_path / "w")])
        # an amplitude-1.0 "control" behaves like the truth, which invalidates
        # the suite: the negative control must fail, so the verdict is fail
        assert rc == 1

    def test_report_merge(self, tmp_path):
        cfgp = write_cfg(tmp_path, SIM_CFG)
        cli.main(["simulate", "--config", cfgp, "--out", str(tmp_path / "r")])
        man = next((tmp_path / "r").glob("simulate-*")) / "manifest.json"
        rc = cli.main(["report", str(man), str(man),  # duplicate deduped
                       "--out", str(tmp_path / "rep")])
        assert rc == 0
        cons = json.loads((next((tmp_path / "rep").glob("report-*"))
                           / "consolidated.json").read_text())
        assert cons["overall"] == "pass"
        assert len(cons["verdicts"]) == 1

    def test_report_missing_is_inconclusive(self, tmp_path):
        rc = cli.main(["report", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "rep2")])
        assert rc == 2

    def test_report_empty_list(self, tmp_path):
        rc = cli.main(["report", "--out", str(tmp_path / "rep3")])
        assert rc == 0

    def test_fail_dominates(self, tmp_path):
        # synthesize manifests with mixed verdicts
        m1 = {"subcommand": "x", "verdicts": {"a": "pass"}, "hash": "h1"}
        m2 = {"subcommand": "y", "verdicts": {"b": "fail"}, "hash": "h2"}
        p1 = tmp_path / "m1.json"; p1.write_text(json.dumps(m1))
        p2 = tmp_path / "m2.json"; p2.write_text(json.dumps(m2))
        rc = cli.main(["report", str(p1), str(p2), "--out", str(tmp_path / "rep4")])
        assert rc == 1


class TestSelectDemoCli:
    def test_artifacts(self, tmp_path):
        cfgp = write_cfg(tmp_path, """
demo_horizon = 25.0
demo_dt = 0.002
s_span = 8.0
s_count = 40
criteria = x@1.0
""")
        rc = cli.main(["select-demo", "--config", cfgp, "--out", str(tmp_path / "s")])
        assert rc == 0
        run = next((tmp_path / "s").glob("select-demo-*"))
        assert (run / "funnel.csv").exists()
        assert (run / "j_table.csv").exists()
        rep = json.loads((run / "report.json").read_text())
        assert rep["selected"] == "+phi(s=0)"
