import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simkit import SHORT, run_sim, scenario, sim_profile
from syschaos.clock import VirtualClock
from syschaos.orchestrator import (
    HN,
    HO,
    HR,
    MIN_PHASE_POINTS,
    ExperimentConfig,
    ExperimentResult,
    HypothesisVerdicts,
    LaunchedTarget,
    MetricVerdict,
    Phase,
    PhaseDurations,
    PhaseObservation,
    SetupError,
    Status,
    TargetSpec,
    build_verdicts,
    parse_duration,
    process_alive,
    reference_band,
    run_experiment,
)
from syschaos.profile import ConfigurationError, SteadyStateProfile
from syschaos.syscall.types import ErrorModel, ModelError
from syschaos.target import Action, BehaviorScript, MetricSpec, Reaction, Workload
from syschaos.target.sim import SimulatedInjector, SimulatedSource, SimulatedTarget


class TestDurations:
    @pytest.mark.parametrize("text,secs", [("30s", 30), ("5m", 300), ("2h", 7200), ("45", 45), (" 1.5m ", 90)])
    def test_parse(self, text, secs):
        assert parse_duration(text) == secs

    @pytest.mark.parametrize("text", ["", "5d", "1.5s", "-3s", "abc"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_duration(text)

    def test_phase_list(self):
        d = PhaseDurations.parse("10s,30s,30s,1m,30s")
        assert d == SHORT
        assert PhaseDurations.from_dict(d.to_dict()) == d
        assert list(d.to_dict()) == ["warmup", "precheck", "injection", "recovery", "validation"]
        assert PhaseDurations().to_dict() == {"warmup": 7200, "precheck": 300, "injection": 300,
                                              "recovery": 600, "validation": 300}
        with pytest.raises(ValueError):
            PhaseDurations.parse("1s,2s")


@pytest.fixture(scope="module")
def steady_profile():
    clock = VirtualClock()
    script, _ = scenario("retry")
    return sim_profile(SimulatedTarget(script, clock), clock)


class TestConfig:
    def config(self, prof, **kw):
        kw.setdefault("durations", SHORT)
        return ExperimentConfig(TargetSpec(pid=1), ErrorModel("read", "EAGAIN", 0.5), prof, interval_seconds=1, **kw)

    def test_valid(self, steady_profile):
        self.config(steady_profile).validate()

    @pytest.mark.parametrize("durations", [
        PhaseDurations(10, 9, 30, 60, 30),
        PhaseDurations(10, 30, 0, 60, 30),
        PhaseDurations(-1, 30, 30, 60, 30),
    ])
    def test_short_phases(self, steady_profile, durations):
        with pytest.raises(ConfigurationError):
            self.config(steady_profile, durations=durations).validate()

    def test_interval_must_match_profile_and_divide(self, steady_profile):
        cfg = self.config(steady_profile)
        cfg.interval_seconds = 7
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_needs_steady_metrics(self):
        with pytest.raises(ConfigurationError):
            self.config(SteadyStateProfile("x", 0.01, 1, 60)).validate()

    def test_allowlist(self, steady_profile):
        cfg = self.config(steady_profile)
        cfg.model = ErrorModel("openat", "ENOENT", 0.1)
        with pytest.raises(ModelError):
            cfg.validate()
        cfg.extra_syscalls = ("openat",)
        cfg.validate()

    def test_target_spec(self):
        with pytest.raises(ConfigurationError):
            TargetSpec()
        with pytest.raises(ConfigurationError):
            TargetSpec(pid=1, launch=("x",))
        assert TargetSpec.launched("prog --flag 'a b'", "u").launch == ("prog", "--flag", "a b")


class TestScenarios:
    @pytest.mark.parametrize("kind,status,h_n", [
        ("crash", Status.CRASHED, HN.FALSIFIED),
        ("mask", Status.COMPLETED, HN.VERIFIED),
        ("retry", Status.COMPLETED, HN.VERIFIED),
        ("long-term", Status.COMPLETED, HN.VERIFIED),
    ])
    def test_status(self, kind, status, h_n):
        result, _, _ = run_sim(*scenario(kind))
        assert result.status is status and result.verdicts.h_n is h_n
        assert result.verdicts.violations() == []

    def test_crash_stops_in_injection(self):
        result, target, _ = run_sim(*scenario("crash"))
        assert result.died_in_phase is Phase.INJECTION
        assert list(result.phases) == ["precheck", "injection"]
        assert all(m.h_o is HO.UNTESTED and m.h_r is HR.UNTESTED for m in result.verdicts.metrics.values())
        assert result.injections >= 1
        assert result.ended_at - result.started_at < 10 + 30 + 30 + 1

    def test_phase_timing_and_interception_window(self):
        result, target, prof = run_sim(*scenario("retry"))
        obs = result.phases
        assert [p for p in obs] == ["precheck", "injection", "validation"]
        inj = obs["injection"]
        assert inj.started_at == result.started_at + 10 + 30
        assert inj.ended_at - inj.started_at == 30
        assert obs["validation"].started_at == inj.ended_at + 60
        assert target.interceptions
        assert min(target.interceptions) >= inj.started_at
        assert max(target.interceptions) <= inj.ended_at
        for o in obs.values():
            assert all(len(o.points[n]) == 30 for n in prof.steady_metrics)
        assert result.intercepted == len(target.interceptions)

    def test_retry_verdicts(self):
        result, _, _ = run_sim(*scenario("retry"))
        v = result.verdicts
        assert v.affected == ["toy_ops_total.syscall.read"]
        assert v.recovered == v.affected
        assert v.metrics["toy_queue_depth"].h_r is HR.SKIPPED

    def test_deterministic(self):
        a, _, _ = run_sim(*scenario("retry"), seed=11)
        b, _, _ = run_sim(*scenario("retry"), seed=11)
        assert a.to_dict() == b.to_dict()

    def test_death_before_injection_is_invalid(self):
        script, model = scenario("retry")
        clock = VirtualClock()
        target = SimulatedTarget(script, clock)
        prof = sim_profile(target, clock)
        clock.on_advance(lambda now: target.kill() if now >= clock_start + 15 else None)
        clock_start = clock.now()
        cfg = ExperimentConfig(TargetSpec(pid=1), model, prof, SHORT, 1, rng_seed=1)
        r = run_experiment(cfg, clock=clock, target=target, source=SimulatedSource(target),
                           injector=SimulatedInjector(), poll_seconds=1.0)
        assert r.status is Status.INVALID and r.died_in_phase is Phase.PRECHECK
        assert r.verdicts.h_n is HN.UNTESTED and r.injections == 0
        assert r.verdicts.violations() == []

    def test_dead_target_is_setup_error(self, steady_profile):
        clock = VirtualClock()
        target = SimulatedTarget(scenario("retry")[0], clock)
        target.kill()
        cfg = ExperimentConfig(TargetSpec(pid=1), ErrorModel("read", "EAGAIN", 0.5), steady_profile, SHORT, 1)
        with pytest.raises(SetupError):
            run_experiment(cfg, clock=clock, target=target, source=SimulatedSource(target),
                           injector=SimulatedInjector())

    def test_round_trip(self, tmp_path):
        result, _, _ = run_sim(*scenario("long-term"))
        back = ExperimentResult.load(result.save(tmp_path / "r.json"))
        assert back.to_dict() == result.to_dict()


class TestEvaluation:
    def obs(self, phase, values):
        return PhaseObservation(phase, {"m": [(float(i), v) for i, v in enumerate(values)]}, len(values), True)

    def profile(self):
        rng = random.Random(0)
        prof = SteadyStateProfile("t", 0.01, 1, 100)
        from syschaos.metrics import Activity, MetricKind
        from syschaos.profile import MetricProfile, Steadiness
        prof.metrics["m"] = MetricProfile(MetricKind.GAUGE, Activity.ACTIVE, Steadiness.STEADY, 0.5,
                                          [rng.gauss(0, 1) for _ in range(200)])
        return prof

    def noise(self, mu, n=20, seed=1):
        rng = random.Random(seed)
        return [rng.gauss(mu, 1) for _ in range(n)]

    def phases(self, pre, inj, val):
        return {"precheck": self.obs(Phase.PRECHECK, pre), "injection": self.obs(Phase.INJECTION, inj),
                "validation": self.obs(Phase.VALIDATION, val)}

    def test_affected_and_recovered(self):
        v = build_verdicts(self.profile(), self.phases(self.noise(0), self.noise(5), self.noise(0, seed=2)), HN.VERIFIED)
        m = v.metrics["m"]
        assert (m.precheck_passed, m.h_o, m.h_r) == (True, HO.AFFECTED, HR.RECOVERED)

    def test_not_recovered(self):
        v = build_verdicts(self.profile(), self.phases(self.noise(0), self.noise(5), self.noise(5)), HN.VERIFIED)
        assert v.metrics["m"].h_r is HR.NOT_RECOVERED

    def test_failed_precheck_excludes(self):
        v = build_verdicts(self.profile(), self.phases(self.noise(4), self.noise(5), self.noise(5)), HN.VERIFIED)
        assert v.metrics["m"].precheck_passed is False
        assert v.metrics["m"].h_o is HO.UNTESTED and v.metrics_count == 0

    def test_too_few_points(self):
        few = self.noise(0, n=MIN_PHASE_POINTS - 1)
        v = build_verdicts(self.profile(), self.phases(self.noise(0), few, few), HN.VERIFIED)
        m = v.metrics["m"]
        assert (m.h_o, m.h_r) == (HO.AFFECTED, HR.NOT_RECOVERED)
        v = build_verdicts(self.profile(), self.phases(few, few, few), HN.VERIFIED)
        assert not v.metrics["m"].precheck_passed

    def test_reference_band(self):
        assert reference_band(list(range(101))) == (5.0, 95.0)
        assert reference_band([3.0]) == (3.0, 3.0)


class TestInvariants:
    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from(list(HN)),
           st.lists(st.tuples(st.booleans(), st.sampled_from(list(HO)), st.sampled_from(list(HR))), max_size=6))
    def test_violations_detect_every_bad_combination(self, h_n, rows):
        v = HypothesisVerdicts(h_n, {f"m{i}": MetricVerdict(p, o, r) for i, (p, o, r) in enumerate(rows)})
        ok = True
        for m in v.metrics.values():
            if h_n is not HN.VERIFIED or not m.precheck_passed:
                ok &= m.h_o is HO.UNTESTED and m.h_r is HR.UNTESTED
            elif m.h_o is HO.AFFECTED:
                ok &= m.h_r in (HR.RECOVERED, HR.NOT_RECOVERED)
            elif m.h_o is HO.UNAFFECTED:
                ok &= m.h_r is HR.SKIPPED
            else:
                ok = False
        assert (v.violations() == []) == ok

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(["ignore", "retry", "degrade", "crash"]),
           st.floats(0.0, 1.0))
    def test_simulated_runs_are_consistent(self, seed, action, rate):
        reaction = {"ignore": Reaction("read", "EAGAIN", Action.IGNORE),
                    "retry": Reaction("read", "EAGAIN", Action.RETRY, retries=2, backoff_ms=5),
                    "degrade": Reaction("read", "EAGAIN", Action.DEGRADE, metrics=("g",), magnitude=20, hold_s=30),
                    "crash": Reaction("read", "EAGAIN", Action.CRASH)}[action]
        script = BehaviorScript(seed, [Workload("read", 50.0)], [reaction], [MetricSpec("g", std=2)])
        r, _, prof = run_sim(script, ErrorModel("read", "EAGAIN", rate),
                             PhaseDurations(0, 10, 10, 5, 10), seed, epoch_s=30)
        assert r.verdicts.violations() == []
        assert set(r.verdicts.metrics) == set(prof.steady_metrics)


def test_process_helpers():
    import os
    import subprocess
    import sys

    assert process_alive(os.getpid())
    child = subprocess.Popen([sys.executable, "-c", "pass"])
    child.wait()
    assert not process_alive(child.pid)
    lt = LaunchedTarget([sys.executable, "-c", "import time; time.sleep(30)"])
    assert lt.alive()
    lt.stop()
    assert not lt.alive()
