import csv
import json

import pytest

from subgeom import cli
from subgeom import scenario as scen
from subgeom.errors import ConfigError

OUTPUTS = ("summary.json", "rate_checks.csv", "drift_certificate.csv", "hitting_estimates.csv", "tv_curve.csv")


def write_scenario(tmp_path, **fields):
    base = json.loads((scen.BUNDLED_DIR / "two_state_demo.json").read_text())
    base.update(fields)
    path = tmp_path / f"{base['id']}.json"
    path.write_text(json.dumps(base))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestValidateRate:
    def test_square_root_passes(self, tmp_path):
        sc = write_scenario(tmp_path)
        assert run("validate-rate", "--scenario", sc, "--out", tmp_path / "o") == 0
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["passed"] and len(summary["checks"]) == 5

    def test_alpha_one_is_a_config_error(self, tmp_path, capsys):
        sc = write_scenario(tmp_path, rate={"kind": "polynomial", "alpha": 1.0})
        assert run("validate-rate", "--scenario", sc, "--out", tmp_path / "o") == 2
        assert "configuration error" in capsys.readouterr().err

    def test_identity_fails_concavity(self, tmp_path):
        sc = write_scenario(tmp_path, rate={"kind": "custom", "phi": "x", "dphi": "1 + 0*x"})
        assert run("validate-rate", "--scenario", sc, "--out", tmp_path / "o") == 1
        rows = list(csv.DictReader((tmp_path / "o" / "rate_checks.csv").open()))
        names = [r["check"] for r in rows]
        assert "validate_assumptions:strictly concave" in names

    def test_bundled_name_resolves(self, tmp_path):
        assert run("validate-rate", "--scenario", "two_state_demo", "--out", tmp_path) == 0

    def test_missing_scenario(self, tmp_path):
        assert run("validate-rate", "--scenario", tmp_path / "nope.json", "--out", tmp_path) == 2

    def test_bad_arguments(self):
        assert run("run") == 2
        assert run("--help") == 0


class TestScenario:
    def test_overrides(self):
        sc = scen.load_scenario("two_state_demo", {"estimator.seed": 7, "estimator.n_paths": None})
        assert sc["estimator"]["seed"] == 7 and sc["estimator"]["n_paths"] == 100_000
        assert sc["estimator"]["horizon_cap"] == 1e4

    @pytest.mark.parametrize("override", [{"estimator.seed": -1}, {"estimator.n_paths": 10}])
    def test_rejects(self, override):
        with pytest.raises(ConfigError):
            scen.load_scenario("two_state_demo", override)

    def test_stage_seeds_differ(self):
        seeds = {scen.stage_seed(1, i) for i in range(7)}
        assert len(seeds) == 7 and all(0 <= s < 2**64 for s in seeds)


class TestPipeline:
    def test_two_state_demo(self, tmp_path):
        assert run("run", "--scenario", "two_state_demo", "--out", tmp_path, "--paths", 20_000) == 0
        for name in OUTPUTS:
            assert (tmp_path / name).exists(), name
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert list(summary["stages"]) == list(scen.Pipeline.STAGES)
        assert all(s["status"] == "pass" for s in summary["stages"].values())

    def test_constant_v_still_reaches_convergence(self, tmp_path):
        sc = write_scenario(tmp_path, id="constant_v", lyapunov={"values": [1.0, 1.0]}, target=[0, 1], K=1.0)
        run("run", "--scenario", sc, "--out", tmp_path / "o", "--paths", 2000)
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert summary["stages"]["drift"]["status"] == "pass"
        assert summary["stages"]["convergence"]["status"] == "pass"
        assert (tmp_path / "o" / "tv_curve.csv").exists()

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("run", "--scenario", "two_state_demo", "--out", a, "--paths", 5000) == 0
        assert run("run", "--scenario", "two_state_demo", "--out", b, "--paths", 5000, "--jobs", 4) == 0
        for name in OUTPUTS:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_rerun_into_same_directory(self, tmp_path):
        assert run("run", "--scenario", "two_state_demo", "--out", tmp_path, "--paths", 2000) == 0
        first = (tmp_path / "hitting_estimates.csv").read_bytes()
        assert run("run", "--scenario", "two_state_demo", "--out", tmp_path, "--paths", 2000) == 0
        assert (tmp_path / "hitting_estimates.csv").read_bytes() == first

    def test_failing_stage_leaves_earlier_outputs_alone(self, tmp_path):
        good, bad = tmp_path / "good", tmp_path / "bad"
        assert run("run", "--scenario", "two_state_demo", "--out", good, "--paths", 2000) == 0
        sc = write_scenario(tmp_path, target=[1])
        assert run("run", "--scenario", sc, "--out", bad, "--paths", 2000) == 1
        summary = json.loads((bad / "summary.json").read_text())
        stages = summary["stages"]
        assert stages["rates"]["status"] == "pass" and stages["drift"]["status"] == "fail"
        assert all(stages[s]["status"] == "skipped"
                   for s in ("psi_from_v", "condition1", "psi_from_hitting", "quantitative_bounds"))
        assert stages["convergence"]["status"] == "pass"
        assert (bad / "rate_checks.csv").read_bytes() == (good / "rate_checks.csv").read_bytes()
        assert (bad / "tv_curve.csv").read_bytes() == (good / "tv_curve.csv").read_bytes()

    def test_raising_stage_is_recorded(self, tmp_path):
        sc = write_scenario(tmp_path, model="bd_polynomial(3, 30)", lyapunov={"expr": "n + 1"}, bound=10,
                            estimator={"n_paths": 1000, "seed": 1}, tau_delta={"delta": 1.0, "x0": [0]},
                            convergence=None)
        assert run("run", "--scenario", sc, "--out", tmp_path / "o") == 1
        stages = json.loads((tmp_path / "o" / "summary.json").read_text())["stages"]
        assert stages["drift"]["status"] == "error"
        assert "AutoTargetError" in stages["drift"]["message"]

    def test_diffusions_are_rejected(self, tmp_path):
        sc = write_scenario(tmp_path, model="ou(1.0)")
        assert run("run", "--scenario", sc, "--out", tmp_path / "o") == 2
