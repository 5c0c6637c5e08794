import json
import os
import socket
import subprocess
import sys

import pytest

from conftest import FIXTURES
from simkit import run_sim, scenario, sim_profile, table_results
from syschaos.cli import main
from syschaos.clock import VirtualClock
from syschaos.metrics import EpochStore, collect_epoch
from syschaos.target import BehaviorScript, Workload, target_command
from syschaos.target.sim import SimulatedSource, SimulatedTarget


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def dd(tmp_path):
    return tmp_path / "data"


def run(dd, *argv):
    return main(["--data-dir", str(dd), *argv] if argv and argv[0].startswith("-") else
                [argv[0], "--data-dir", str(dd), *argv[1:]])


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["report"], ["profile", "--alpha", "x"],
                                      ["experiment", "--target-pid", "1"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1

    def test_profile_needs_a_source(self, dd):
        assert run(dd, "profile") == 1

    def test_bad_durations(self, dd, tmp_path):
        m = tmp_path / "m.json"
        m.write_text(json.dumps({"syscall": "read", "errno": "EAGAIN", "rate": 0.5}))
        assert run(dd, "experiment", "--target-pid", "1", "--metrics-url", "http://x", "--error-model", str(m),
                   "--durations", "1s,2s") == 1

    def test_errors_are_json_lines(self, capsys):
        main(["profile"])
        err = capsys.readouterr().err.strip().splitlines()[-1]
        doc = json.loads(err)
        assert doc["level"] == "error" and doc["exit_code"] == 1


class TestOffline:
    def test_profile_from_epoch_files(self, dd, capsys):
        clock = VirtualClock()
        src = SimulatedSource(SimulatedTarget(scenario("retry")[0], clock))
        store = EpochStore(dd)
        for i in (1, 2):
            collect_epoch(src, 1, 60, clock, target_id="toy", store=store, index=i)
        assert run(dd, "profile", "--epoch-files", str(store.epoch_path("toy", 1)),
                   str(store.epoch_path("toy", 2))) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["steady"] == 2 and out["target_id"] == "toy"
        assert (dd / "toy" / "profile.json").exists()

    def test_synthesize(self, dd, tmp_path, capsys):
        stats = tmp_path / "s.json"
        stats.write_text(json.dumps({"invocations": {"read": 100000},
                                     "errors": [{"syscall": "read", "errno": "EAGAIN", "count": 1118}]}))
        assert run(dd, "synthesize", "--stats", str(stats), "--target-id", "geth") == 0
        doc = json.loads((dd / "geth" / "models.json").read_text())
        assert doc["models"][0]["rate"] == pytest.approx(0.559)
        assert run(dd, "synthesize", "--target-id", "nobody") == 1

    def test_benchmark(self, dd, tmp_path, capsys):
        results = []
        for r in table_results():
            if r.model.key in {("accept4", "EAGAIN"), ("recvfrom", "EAGAIN")}:
                results.append(str(r.save(tmp_path / f"{r.target_id}-{r.model.syscall}.json")))
        sets = [str(FIXTURES / "goethereum_models.json"), str(FIXTURES / "nethermind_models.json")]
        assert run(dd, "benchmark", "--model-set", sets[0], "--model-set", sets[1], "--result", *results) == 0
        common = json.loads((dd / "benchmark" / "common-models.json").read_text())
        assert len(common["models"]) == 4
        md = (dd / "benchmark" / "benchmark.md").read_text()
        assert "| futex | EAGAIN | 0.05 | n/a | n/a |" in md
        assert run(dd, "benchmark", "--model-set", sets[0]) == 1

    def test_report(self, dd, tmp_path, capsys):
        result, _, _ = run_sim(*scenario("mask"))
        path = result.save(tmp_path / "r.json")
        assert run(dd, "report", "--result", str(path), "--format", "json", "--out-dir", str(tmp_path / "o"),
                   "--plots") == 0
        assert json.loads(capsys.readouterr().out)["rows"][0]["outcome"] == "invisible effect"
        assert (tmp_path / "o" / "report.md").exists()
        assert list((tmp_path / "o" / "plots").glob("*.svg"))

    def test_experiment_argument_checks(self, dd, tmp_path):
        many = FIXTURES / "goethereum_models.json"
        base = ["experiment", "--target-pid", str(os.getpid()), "--metrics-url", "http://127.0.0.1:9/"]
        assert run(dd, *base, "--error-model", str(many)) == 1
        assert run(dd, *base, "--error-model", str(many), "--model", "read:EAGAIN") == 1  # no profile
        assert run(dd, *base, "--error-model", str(many), "--model", "read:ENOPE") == 1
        one = tmp_path / "one.json"
        one.write_text(json.dumps({"syscall": "openat", "errno": "ENOENT", "rate": 0.5}))
        assert run(dd, *base, "--error-model", str(one)) == 1

    def test_data_dir_from_environment(self, tmp_path, monkeypatch, capsys):
        stats = tmp_path / "s.json"
        stats.write_text(json.dumps({"invocations": {"read": 10},
                                     "errors": [{"syscall": "read", "errno": "EAGAIN", "count": 1}]}))
        monkeypatch.setenv("SYSCHAOS_DATA_DIR", str(tmp_path / "envdir"))
        monkeypatch.chdir(tmp_path)
        assert main(["synthesize", "--stats", str(stats)]) == 0
        assert (tmp_path / "envdir" / "target" / "models.json").exists()
        assert not (tmp_path / "syschaos-data").exists()


@pytest.mark.ptrace
class TestLive:
    def launch_cmd(self, tmp_path, script):
        port = free_port()
        path = script.save(tmp_path / "script.json")
        return port, " ".join(target_command(path, port, exit_when_done=True))

    def test_probe(self, ptrace_ok, dd, capsys):
        assert run(dd, "probe") == 0
        assert json.loads(capsys.readouterr().out)["available"] is True

    def test_monitor_launch(self, ptrace_ok, dd, tmp_path, capsys):
        port, cmd = self.launch_cmd(tmp_path, BehaviorScript(1, [Workload("read", 100.0, fail_every=5)]))
        assert run(dd, "monitor", "--launch", cmd, "--duration", "3s", "--target-id", "toy") == 0
        stats = json.loads((dd / "toy" / "syscall-stats.json").read_text())
        assert stats["invocations"]["read"] > 200
        counts = {(e["syscall"], e["errno"]): e["count"] for e in stats["errors"]}
        assert counts[("read", "EAGAIN")] > 40

    @pytest.mark.slow
    def test_short_experiment(self, ptrace_ok, dd, tmp_path, capsys):
        script, _ = scenario("retry")
        port, cmd = self.launch_cmd(tmp_path, script)
        model = tmp_path / "model.json"
        model.write_text(json.dumps({"syscall": "read", "errno": "EAGAIN", "rate": 0.5}))
        code = run(dd, "experiment", "--launch", cmd, "--metrics-url", f"http://127.0.0.1:{port}/metrics",
                   "--error-model", str(model), "--epoch", "15s", "--interval", "1s",
                   "--durations", "1s,10s,10s,3s,10s", "--seed", "3", "--target-id", "toy")
        out = capsys.readouterr().out
        assert code == 0, out
        res = dd / "toy" / "experiments" / "read-EAGAIN-seed3"
        assert (res / "result.json").exists() and (res / "report.md").exists()
        assert "| toy | read | EAGAIN | 0.5 |" in out
        assert (dd / "toy" / "profile.json").exists()
        assert list((dd / "toy" / "sessions").glob("*.ndjson"))

    def test_death_before_injection_exits_3(self, ptrace_ok, dd, tmp_path):
        script = BehaviorScript(2, [Workload("read", 100.0, count=300)])
        clock = VirtualClock()
        prof = sim_profile(SimulatedTarget(BehaviorScript(2, [Workload("read", 100.0)]), clock), clock, 30)
        prof.save(tmp_path / "profile.json")
        port, cmd = self.launch_cmd(tmp_path, script)
        model = tmp_path / "model.json"
        model.write_text(json.dumps({"syscall": "read", "errno": "EAGAIN", "rate": 0.5}))
        code = run(dd, "experiment", "--launch", cmd, "--metrics-url", f"http://127.0.0.1:{port}/metrics",
                   "--error-model", str(model), "--profile", str(tmp_path / "profile.json"),
                   "--durations", "1s,10s,10s,3s,10s")
        assert code == 3
        res = json.loads((dd / "target" / "experiments" / "read-EAGAIN-seed0" / "result.json").read_text())
        assert res["status"] == "invalid" and res["died_in_phase"] == "precheck"


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "syschaos.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("syschaos ")
