"""Five-phase chaos experiments and per-metric hypothesis verdicts.

Phases run in order: warm-up (nothing observed), pre-check (observe),
injection (observe while the error model is active), recovery (nothing
observed) and validation (observe). Each observed sample is compared with the
metric's steady-state reference using the same Mann-Whitney test and alpha
that built the profile.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shlex
import statistics
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol

from .clock import Clock, SystemClock, sleep_until
from .metrics import HttpMetricSource, MetricSource, ScrapeError, build_series, record_scrapes
from .profile import ConfigurationError, SteadyStateProfile
from .stats import DEFAULT_ALPHA, mann_whitney_u
from .syscall.types import ErrorModel, InjectionSession

log = logging.getLogger(__name__)

MIN_PHASE_POINTS = 10


class SetupError(RuntimeError):
    pass


class Phase(str, Enum):
    WARMUP = "warmup"
    PRECHECK = "precheck"
    INJECTION = "injection"
    RECOVERY = "recovery"
    VALIDATION = "validation"


PHASE_ORDER = list(Phase)
OBSERVED = (Phase.PRECHECK, Phase.INJECTION, Phase.VALIDATION)


class HN(str, Enum):
    VERIFIED = "verified"
    FALSIFIED = "falsified"
    UNTESTED = "untested"


class HO(str, Enum):
    AFFECTED = "affected"
    UNAFFECTED = "unaffected"
    UNTESTED = "untested"


class HR(str, Enum):
    RECOVERED = "recovered"
    NOT_RECOVERED = "not-recovered"
    SKIPPED = "skipped"
    UNTESTED = "untested"


class Status(str, Enum):
    COMPLETED = "completed"
    CRASHED = "crashed"
    INVALID = "invalid"  # target died before injection started


# --- configuration -----------------------------------------------------------

_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600}


def parse_duration(text: str) -> int:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([smh]?)\s*", text)
    if not m:
        raise ValueError(f"bad duration {text!r} (use e.g. 30s, 5m, 2h)")
    seconds = float(m.group(1)) * _UNITS[m.group(2)]
    if seconds != int(seconds):
        raise ValueError(f"duration {text!r} is not a whole number of seconds")
    return int(seconds)


@dataclass(frozen=True)
class PhaseDurations:
    warmup_s: int = 7200
    precheck_s: int = 300
    injection_s: int = 300
    recovery_s: int = 600
    validation_s: int = 300

    @classmethod
    def parse(cls, spec: str) -> "PhaseDurations":
        """``"10s,30s,30s,60s,30s"`` in phase order."""
        parts = spec.split(",")
        if len(parts) != 5:
            raise ValueError("durations need five comma-separated values: warmup,precheck,injection,recovery,validation")
        return cls(*(parse_duration(p) for p in parts))

    def of(self, phase: Phase) -> int:
        return getattr(self, f"{phase.value}_s")

    def to_dict(self) -> dict:
        return {p.value: self.of(p) for p in PHASE_ORDER}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseDurations":
        return cls(*(int(d[p.value]) for p in PHASE_ORDER))


@dataclass(frozen=True)
class TargetSpec:
    pid: int | None = None
    launch: tuple[str, ...] | None = None
    metrics_url: str | None = None

    def __post_init__(self):
        if (self.pid is None) == (self.launch is None):
            raise ConfigurationError("give exactly one of a pid or a launch command")

    @classmethod
    def launched(cls, command: str | list[str], metrics_url: str) -> "TargetSpec":
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        return cls(None, tuple(argv), metrics_url)

    def to_dict(self) -> dict:
        return {"pid": self.pid, "launch": list(self.launch) if self.launch else None,
                "metrics_url": self.metrics_url}


@dataclass
class ExperimentConfig:
    target: TargetSpec
    model: ErrorModel
    profile: SteadyStateProfile
    durations: PhaseDurations = field(default_factory=PhaseDurations)
    interval_seconds: int = 15
    alpha: float = DEFAULT_ALPHA
    rng_seed: int = 0
    target_id: str | None = None
    extra_syscalls: tuple[str, ...] = ()
    log_dir: str | None = None

    def validate(self) -> None:
        d = self.durations
        if d.warmup_s < 0 or min(d.of(p) for p in PHASE_ORDER[1:]) <= 0:
            raise ConfigurationError("phase durations must be positive (warm-up may be zero)")
        if self.interval_seconds < 1:
            raise ConfigurationError("interval must be at least 1 second")
        for phase in OBSERVED:
            secs = d.of(phase)
            if secs % self.interval_seconds:
                raise ConfigurationError(f"interval {self.interval_seconds}s does not divide {phase.value} ({secs}s)")
            if secs // self.interval_seconds < MIN_PHASE_POINTS:
                raise ConfigurationError(
                    f"{phase.value} yields {secs // self.interval_seconds} points; at least {MIN_PHASE_POINTS} needed")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must be in (0, 1)")
        if self.interval_seconds != self.profile.interval_seconds:
            raise ConfigurationError(
                f"interval {self.interval_seconds}s differs from the profile's {self.profile.interval_seconds}s")
        if not self.profile.steady_metrics:
            raise ConfigurationError("profile has no steady metric to observe")
        self.model.check_injectable(self.extra_syscalls)

    def summary(self) -> dict:
        return {
            "durations": self.durations.to_dict(),
            "interval_seconds": self.interval_seconds,
            "alpha": self.alpha,
            "rng_seed": self.rng_seed,
            "target": self.target.to_dict(),
            "profile_target_id": self.profile.target_id,
        }


# --- observations and verdicts ---------------------------------------------

@dataclass
class PhaseObservation:
    phase: Phase
    points: dict[str, list[tuple[float, float]]]
    expected_points: int
    process_alive_at_end: bool
    injections: int | None = None
    started_at: float = 0.0
    ended_at: float = 0.0

    def sample(self, name: str) -> list[float]:
        return [v for _, v in self.points.get(name, ())]

    def to_dict(self) -> dict:
        return {
            "phase": self.phase.value,
            "expected_points": self.expected_points,
            "process_alive_at_end": self.process_alive_at_end,
            "injections": self.injections,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "points": {k: [list(p) for p in v] for k, v in sorted(self.points.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseObservation":
        pts = {k: [(float(t), float(v)) for t, v in vs] for k, vs in d["points"].items()}
        return cls(Phase(d["phase"]), pts, d["expected_points"], d["process_alive_at_end"],
                   d.get("injections"), d.get("started_at", 0.0), d.get("ended_at", 0.0))


@dataclass
class MetricVerdict:
    precheck_passed: bool
    h_o: HO = HO.UNTESTED
    h_r: HR = HR.UNTESTED
    precheck_p: float | None = None
    injection_p: float | None = None
    validation_p: float | None = None

    def to_dict(self) -> dict:
        return {
            "precheck_passed": self.precheck_passed,
            "h_o": self.h_o.value,
            "h_r": self.h_r.value,
            "precheck_p": self.precheck_p,
            "injection_p": self.injection_p,
            "validation_p": self.validation_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricVerdict":
        return cls(d["precheck_passed"], HO(d["h_o"]), HR(d["h_r"]),
                   d.get("precheck_p"), d.get("injection_p"), d.get("validation_p"))


@dataclass
class HypothesisVerdicts:
    h_n: HN
    metrics: dict[str, MetricVerdict] = field(default_factory=dict)

    @property
    def passing(self) -> list[str]:
        return sorted(n for n, m in self.metrics.items() if m.precheck_passed)

    @property
    def affected(self) -> list[str]:
        return sorted(n for n, m in self.metrics.items() if m.h_o is HO.AFFECTED)

    @property
    def recovered(self) -> list[str]:
        return sorted(n for n, m in self.metrics.items() if m.h_r is HR.RECOVERED)

    @property
    def metrics_count(self) -> int:
        return len(self.passing)

    @property
    def h_o_count(self) -> int:
        return len(self.affected)

    @property
    def h_r_count(self) -> int:
        return len(self.recovered)

    def violations(self) -> list[str]:
        """Broken consistency rules; empty for every well-formed verdict set."""
        out = []
        for name, m in self.metrics.items():
            if self.h_n is not HN.VERIFIED and (m.h_o is not HO.UNTESTED or m.h_r is not HR.UNTESTED):
                out.append(f"{name}: tested although H_N is {self.h_n.value}")
            if not m.precheck_passed and (m.h_o is not HO.UNTESTED or m.h_r is not HR.UNTESTED):
                out.append(f"{name}: tested although it failed the pre-check")
            if self.h_n is HN.VERIFIED and m.precheck_passed:
                if m.h_o is HO.UNTESTED:
                    out.append(f"{name}: H_O left untested")
                if m.h_o is HO.AFFECTED and m.h_r not in (HR.RECOVERED, HR.NOT_RECOVERED):
                    out.append(f"{name}: affected metric without H_R verdict")
                if m.h_o is HO.UNAFFECTED and m.h_r is not HR.SKIPPED:
                    out.append(f"{name}: unaffected metric must skip H_R")
        return out

    def to_dict(self) -> dict:
        return {
            "h_n": self.h_n.value,
            "counts": {"metrics": self.metrics_count, "h_o": self.h_o_count, "h_r": self.h_r_count},
            "metrics": {k: v.to_dict() for k, v in sorted(self.metrics.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisVerdicts":
        return cls(HN(d["h_n"]), {k: MetricVerdict.from_dict(v) for k, v in d["metrics"].items()})


@dataclass
class ExperimentResult:
    target_id: str
    model: ErrorModel
    status: Status
    verdicts: HypothesisVerdicts
    config: dict
    phases: dict[str, PhaseObservation] = field(default_factory=dict)
    died_in_phase: Phase | None = None
    injections: int = 0
    intercepted: int = 0
    started_at: float = 0.0
    ended_at: float = 0.0
    reference_bands: dict[str, tuple[float, float]] = field(default_factory=dict)
    session_log: str | None = None

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "model": self.model.to_dict(),
            "status": self.status.value,
            "died_in_phase": self.died_in_phase.value if self.died_in_phase else None,
            "injections": self.injections,
            "intercepted": self.intercepted,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "config": self.config,
            "verdicts": self.verdicts.to_dict(),
            "reference_bands": {k: list(v) for k, v in sorted(self.reference_bands.items())},
            "phases": {k: v.to_dict() for k, v in self.phases.items()},
            "session_log": self.session_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(
            d["target_id"], ErrorModel.from_dict(d["model"]), Status(d["status"]),
            HypothesisVerdicts.from_dict(d["verdicts"]), d["config"],
            {k: PhaseObservation.from_dict(v) for k, v in d.get("phases", {}).items()},
            Phase(d["died_in_phase"]) if d.get("died_in_phase") else None,
            d.get("injections", 0), d.get("intercepted", 0), d.get("started_at", 0.0), d.get("ended_at", 0.0),
            {k: (v[0], v[1]) for k, v in d.get("reference_bands", {}).items()}, d.get("session_log"),
        )

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- evaluation --------------------------------------------------------------

def _p_against_reference(profile: SteadyStateProfile, name: str, sample: list[float]) -> float | None:
    if len(sample) < MIN_PHASE_POINTS:
        return None
    return mann_whitney_u(profile.reference(name), sample).p_value


def evaluate_precheck(profile: SteadyStateProfile, obs: PhaseObservation, alpha: float = DEFAULT_ALPHA) -> set[str]:
    """Steady metrics whose pre-check sample is indistinguishable from the reference."""
    if obs.phase is not Phase.PRECHECK:
        raise ValueError("pre-check evaluation needs the pre-check observation")
    passed = set()
    for name in profile.steady_metrics:
        p = _p_against_reference(profile, name, obs.sample(name))
        if p is not None and p >= alpha:
            passed.add(name)
    return passed


def evaluate_h_o(profile: SteadyStateProfile, obs: PhaseObservation, passed: set[str] | list[str],
                 alpha: float = DEFAULT_ALPHA) -> dict[str, HO]:
    # too few points while injecting counts as a visible effect (scrapes broke)
    out = {}
    for name in sorted(passed):
        p = _p_against_reference(profile, name, obs.sample(name))
        out[name] = HO.AFFECTED if p is None or p < alpha else HO.UNAFFECTED
    return out


def evaluate_h_r(profile: SteadyStateProfile, obs: PhaseObservation, affected: set[str] | list[str],
                 alpha: float = DEFAULT_ALPHA) -> dict[str, HR]:
    out = {}
    for name in sorted(affected):
        p = _p_against_reference(profile, name, obs.sample(name))
        out[name] = HR.RECOVERED if p is not None and p >= alpha else HR.NOT_RECOVERED
    return out


def build_verdicts(
    profile: SteadyStateProfile,
    phases: dict[str, PhaseObservation],
    h_n: HN,
    alpha: float = DEFAULT_ALPHA,
) -> HypothesisVerdicts:
    verdicts = HypothesisVerdicts(h_n)
    pre = phases.get(Phase.PRECHECK.value)
    passed = evaluate_precheck(profile, pre, alpha) if pre is not None else set()
    for name in profile.steady_metrics:
        p = _p_against_reference(profile, name, pre.sample(name)) if pre is not None else None
        verdicts.metrics[name] = MetricVerdict(name in passed, precheck_p=p)
    if h_n is not HN.VERIFIED:
        return verdicts
    inj, val = phases[Phase.INJECTION.value], phases[Phase.VALIDATION.value]
    h_o = evaluate_h_o(profile, inj, passed, alpha)
    h_r = evaluate_h_r(profile, val, [n for n, v in h_o.items() if v is HO.AFFECTED], alpha)
    for name, verdict in h_o.items():
        m = verdicts.metrics[name]
        m.h_o = verdict
        m.injection_p = _p_against_reference(profile, name, inj.sample(name))
        if verdict is HO.AFFECTED:
            m.h_r = h_r[name]
            m.validation_p = _p_against_reference(profile, name, val.sample(name))
        else:
            m.h_r = HR.SKIPPED
    return verdicts


def reference_band(values: list[float]) -> tuple[float, float]:
    if len(values) < 2:
        v = values[0] if values else 0.0
        return (v, v)
    q = statistics.quantiles(values, n=20, method="inclusive")
    return (q[0], q[-1])


# --- targets and injectors ---------------------------------------------------

class Target(Protocol):
    pid: int

    def alive(self) -> bool: ...


def process_alive(pid: int) -> bool:
    try:
        with open(f"/proc/{pid}/stat") as fh:
            stat = fh.read()
    except OSError:
        return False
    return stat.rsplit(")", 1)[1].split()[0] not in ("Z", "X")


class ProcessTarget:
    def __init__(self, pid: int):
        self.pid = pid

    def alive(self) -> bool:
        return process_alive(self.pid)


class LaunchedTarget:
    """A target started (and finally stopped) by the experiment itself."""

    def __init__(self, argv: list[str] | tuple[str, ...]):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.DEVNULL)
        self.pid = self.proc.pid

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self, timeout: float = 10.0) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


class InjectionRun(Protocol):
    def stop(self) -> InjectionSession: ...


class Injector(Protocol):
    def start(self, target, model: ErrorModel, seed: int, log_path: str | None) -> InjectionRun: ...


class PtraceInjector:
    def __init__(self, extra_syscalls: tuple[str, ...] = ()):
        self.extra_syscalls = extra_syscalls

    def check(self, target) -> None:
        from .syscall.session import probe_capabilities

        report = probe_capabilities(target.pid)
        if not report.available:
            raise SetupError(f"{report.message}" + (f" ({report.remediation})" if report.remediation else ""))

    def start(self, target, model: ErrorModel, seed: int, log_path: str | None):
        from .syscall.session import start_trace

        handle = start_trace(target.pid, model, None, seed, log_path=log_path, extra_syscalls=self.extra_syscalls)
        return _PtraceRun(handle)


class _PtraceRun:
    def __init__(self, handle):
        self.handle = handle

    def stop(self) -> InjectionSession:
        self.handle.stop(timeout=60.0)
        return self.handle.session()


def wait_for_metrics(source: MetricSource, target, clock: Clock, timeout: float = 15.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        if not target.alive():
            raise SetupError("target is not running")
        try:
            source.scrape()
            return
        except ScrapeError as exc:
            if time.monotonic() > deadline:
                raise SetupError(f"metrics endpoint unreachable: {exc}") from None
        time.sleep(0.1)


# --- the experiment ------------------------------------------------------------

def run_experiment(
    config: ExperimentConfig,
    *,
    clock: Clock | None = None,
    target=None,
    source: MetricSource | None = None,
    injector: Injector | None = None,
    poll_seconds: float = 0.1,
) -> ExperimentResult:
    """Run all five phases, stopping immediately if the target dies."""
    config.validate()
    clock = clock or SystemClock()
    owned = None
    if target is None:
        if config.target.launch:
            target = owned = LaunchedTarget(config.target.launch)
        else:
            target = ProcessTarget(config.target.pid)
    if source is None:
        if not config.target.metrics_url:
            raise ConfigurationError("a metrics endpoint is required")
        source = HttpMetricSource(config.target.metrics_url)
    injector = injector or PtraceInjector(config.extra_syscalls)
    target_id = config.target_id or config.profile.target_id
    profile, interval = config.profile, config.interval_seconds
    kinds = {n: m.kind for n, m in profile.metrics.items()}

    try:
        if not target.alive():
            raise SetupError(f"target {getattr(target, 'pid', '?')} is not running")
        if isinstance(source, HttpMetricSource):
            wait_for_metrics(source, target, clock)
        if hasattr(injector, "check"):
            injector.check(target)

        dead = lambda: not target.alive()  # noqa: E731
        phases: dict[str, PhaseObservation] = {}
        died: Phase | None = None
        session: InjectionSession | None = None
        started = clock.now()
        log_path = None
        if config.log_dir:
            Path(config.log_dir).mkdir(parents=True, exist_ok=True)
            log_path = str(Path(config.log_dir) / f"session-{target_id}-{config.rng_seed}.ndjson")

        for phase in PHASE_ORDER:
            secs = config.durations.of(phase)
            t0 = clock.now()
            log.info("phase %s: %ds", phase.value, secs, extra={"phase": phase.value})
            run = injector.start(target, config.model, config.rng_seed, log_path) if phase is Phase.INJECTION else None
            try:
                if phase in OBSERVED:
                    records = record_scrapes(source, interval, secs, clock, dead, poll_seconds)
                else:
                    sleep_until(clock, t0 + secs, dead, poll_seconds)
                    records = None
            finally:
                if run is not None:
                    session = run.stop()
            alive = target.alive()
            if records is not None:
                expected = secs // interval
                series = build_series(records, interval, expected, kinds)
                points = {n: [(p.timestamp, p.value) for p in s.points] for n, s in series.items()}
                phases[phase.value] = PhaseObservation(
                    phase, points, expected, alive,
                    session.injected if phase is Phase.INJECTION and session else None, t0, clock.now(),
                )
            if not alive:
                died = phase
                log.warning("target died during %s", phase.value, extra={"phase": phase.value})
                break
        ended = clock.now()
    finally:
        if owned is not None:
            owned.stop()

    if died is None:
        status, h_n = Status.COMPLETED, HN.VERIFIED
    elif PHASE_ORDER.index(died) < PHASE_ORDER.index(Phase.INJECTION):
        status, h_n = Status.INVALID, HN.UNTESTED
    else:
        status, h_n = Status.CRASHED, HN.FALSIFIED
    if status is Status.INVALID:
        verdicts = HypothesisVerdicts(h_n, {n: MetricVerdict(False) for n in profile.steady_metrics})
    else:
        verdicts = build_verdicts(profile, phases, h_n, config.alpha)
    bands = {n: reference_band(profile.reference(n)) for n in profile.steady_metrics}
    return ExperimentResult(
        target_id, config.model, status, verdicts, config.summary(), phases, died,
        session.injected if session else 0, session.intercepted if session else 0,
        started, ended, bands, session.log_path if session else None,
    )
