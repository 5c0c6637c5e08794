"""Monitoring and injection sessions against a running process.

The tracer always runs in a short-lived helper process
(``python -m syschaos.syscall``). That keeps its ``waitpid(-1)`` loop from
reaping children of the caller, gives each session its own main thread for
signal-driven wakeups, and makes a crashed tracer detach automatically.
"""

from __future__ import annotations

import json
import os
import platform
import queue
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field

from . import ptrace as _pt
from .types import ErrorModel, InjectionSession, SyscallStats


class SyscallError(RuntimeError):
    pass


class PrivilegeError(SyscallError):
    pass


class TargetNotFoundError(SyscallError):
    pass


class SessionBusyError(SyscallError):
    pass


class UnsupportedPlatformError(SyscallError):
    pass


_ERRORS = {
    "privilege": PrivilegeError,
    "not-found": TargetNotFoundError,
    "busy": SessionBusyError,
    "unsupported": UnsupportedPlatformError,
}

REMEDIATION = (
    "run as root or grant CAP_SYS_PTRACE; in a container add --cap-add=SYS_PTRACE "
    "and use a seccomp profile that permits ptrace"
)


@dataclass
class CapabilityReport:
    available: bool
    mechanism: str
    message: str
    remediation: str | None = None
    details: dict = field(default_factory=dict)

    @property
    def monitor_only(self) -> bool:
        # metric scraping works regardless; only syscall interception is lost
        return not self.available

    def to_dict(self) -> dict:
        return {
            "available": self.available,
            "mechanism": self.mechanism,
            "message": self.message,
            "remediation": self.remediation,
            "details": self.details,
        }


def _effective_caps() -> int:
    with open("/proc/self/status") as fh:
        for line in fh:
            if line.startswith("CapEff:"):
                return int(line.split()[1], 16)
    return 0


def _yama_scope() -> int | None:
    try:
        with open("/proc/sys/kernel/yama/ptrace_scope") as fh:
            return int(fh.read().strip())
    except (OSError, ValueError):
        return None


def _proc_uid(pid: int) -> int | None:
    try:
        with open(f"/proc/{pid}/status") as fh:
            for line in fh:
                if line.startswith("Uid:"):
                    return int(line.split()[2])  # effective uid
    except OSError:
        return None
    return None


def _self_test() -> tuple[bool, str]:
    child = subprocess.Popen(["sleep", "30"], stdin=subprocess.DEVNULL)
    try:
        _pt.ptrace(_pt.PTRACE_SEIZE, child.pid, 0, 0)
    except OSError as exc:
        return False, exc.strerror or str(exc)
    finally:
        child.kill()
        child.wait()
    return True, "ok"


def probe_capabilities(target_pid: int | None = None) -> CapabilityReport:
    """Report whether syscall interception is possible here (and for ``target_pid``)."""
    details: dict = {
        "system": platform.system(),
        "machine": platform.machine(),
        "kernel": platform.release(),
        "euid": os.geteuid(),
        "cap_sys_ptrace": bool(_effective_caps() & (1 << 19)),
        "yama_ptrace_scope": _yama_scope(),
    }
    if not _pt.supported_platform():
        return CapabilityReport(False, "none", "injection unavailable: unsupported platform "
                                f"{details['system']}/{details['machine']}", None, details)
    try:
        major, minor = (int(x) for x in platform.release().split(".")[:2])
    except ValueError:
        major, minor = 0, 0
    if (major, minor) < (5, 3):
        return CapabilityReport(False, "ptrace", "injection unavailable: kernel lacks "
                                "PTRACE_GET_SYSCALL_INFO (needs 5.3+)", None, details)
    if details["yama_ptrace_scope"] == 3:
        return CapabilityReport(False, "ptrace", "injection unavailable: ptrace disabled by Yama",
                                "set kernel.yama.ptrace_scope below 3", details)
    ok, why = _self_test()
    details["self_test"] = why
    if not ok:
        return CapabilityReport(False, "ptrace", "injection unavailable: insufficient privileges",
                                REMEDIATION, details)
    if target_pid is not None:
        uid = _proc_uid(target_pid)
        if uid is None:
            return CapabilityReport(False, "ptrace", f"injection unavailable: no process {target_pid}",
                                    None, details)
        privileged = details["euid"] == 0 or details["cap_sys_ptrace"]
        same_user = uid == os.geteuid() and (details["yama_ptrace_scope"] or 0) == 0
        if not (privileged or same_user):
            return CapabilityReport(False, "ptrace", "injection unavailable: insufficient privileges",
                                    REMEDIATION, details)
        if _pt.tracer_pid(target_pid):
            return CapabilityReport(False, "ptrace", f"injection unavailable: process {target_pid} "
                                    "is already traced", None, details)
    return CapabilityReport(True, "ptrace", "available", None, details)


class TraceHandle:
    """A running helper process attached to one target."""

    def __init__(self, proc: subprocess.Popen, target_pid: int, model: ErrorModel | None, rng_seed: int):
        self.proc = proc
        self.target_pid = target_pid
        self.model = model
        self.rng_seed = rng_seed
        self._lines: queue.Queue = queue.Queue()
        self._final: dict | None = None
        reader = threading.Thread(target=self._pump, daemon=True)
        reader.start()

    def _pump(self) -> None:
        for line in self.proc.stdout:
            line = line.strip()
            if line:
                try:
                    self._lines.put(json.loads(line))
                except json.JSONDecodeError:
                    continue
        self._lines.put(None)

    def _next(self, timeout: float | None) -> dict | None:
        return self._lines.get(timeout=timeout)

    def wait_attached(self, timeout: float = 30.0) -> float:
        try:
            msg = self._next(timeout)
        except queue.Empty:
            self.proc.kill()
            raise SyscallError("tracer helper did not attach in time") from None
        if msg is None:
            raise SyscallError(f"tracer helper exited early: {self._stderr()}")
        if msg.get("event") == "error":
            self.proc.wait()
            raise _ERRORS.get(msg["kind"], SyscallError)(msg["message"])
        return msg["t"]

    def running(self) -> bool:
        return self.proc.poll() is None

    def stop(self, timeout: float = 30.0) -> dict:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
        return self.wait(timeout)

    def wait(self, timeout: float | None = None) -> dict:
        if self._final is not None:
            return self._final
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                msg = self._next(remaining)
            except queue.Empty:
                self.proc.kill()
                raise SyscallError("tracer helper did not finish in time") from None
            if msg is None:
                self.proc.wait()
                raise SyscallError(f"tracer helper died without a result: {self._stderr()}")
            if msg.get("event") == "result":
                self.proc.wait()
                self._final = msg
                return msg
            if msg.get("event") == "error":
                self.proc.wait()
                raise _ERRORS.get(msg["kind"], SyscallError)(msg["message"])

    def session(self, timeout: float | None = None) -> InjectionSession:
        return InjectionSession.from_dict(self.wait(timeout)["session"])

    def stats(self, timeout: float | None = None) -> SyscallStats:
        return SyscallStats.from_dict(self.wait(timeout)["stats"])

    def _stderr(self) -> str:
        try:
            return self.proc.stderr.read().strip()[-2000:]
        except (OSError, ValueError):
            return ""


def start_trace(
    target_pid: int,
    model: ErrorModel | None = None,
    duration_seconds: float | None = None,
    rng_seed: int = 0,
    *,
    log_path: str | os.PathLike | None = None,
    stop_after: int | None = None,
    extra_syscalls: tuple[str, ...] = (),
    attach_timeout: float = 30.0,
) -> TraceHandle:
    """Start a helper attached to ``target_pid``; returns once attached."""
    if model is not None:
        model.check_injectable(extra_syscalls)
    cmd = [sys.executable, "-m", "syschaos.syscall", "--pid", str(target_pid), "--seed", str(rng_seed)]
    if duration_seconds is not None:
        cmd += ["--duration", repr(float(duration_seconds))]
    if model is not None:
        cmd += ["--model", json.dumps(model.to_dict())]
    if log_path is not None:
        cmd += ["--log", os.fspath(log_path)]
    if stop_after is not None:
        cmd += ["--stop-after", str(stop_after)]
    env = dict(os.environ)
    pkg_root = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    env["PYTHONPATH"] = pkg_root + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    proc = subprocess.Popen(
        cmd, stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        text=True, env=env,
    )
    handle = TraceHandle(proc, target_pid, model, rng_seed)
    handle.wait_attached(attach_timeout)
    return handle


def inject(
    target_pid: int,
    model: ErrorModel,
    duration_seconds: float,
    rng_seed: int,
    *,
    log_path: str | os.PathLike | None = None,
    stop_after: int | None = None,
    extra_syscalls: tuple[str, ...] = (),
) -> InjectionSession:
    """Run one injection session to completion and return its counters.

    The session ends after ``duration_seconds``, after ``stop_after``
    successful intercepted calls, or when the target exits (``crashed``).
    """
    handle = start_trace(
        target_pid, model, duration_seconds, rng_seed,
        log_path=log_path, stop_after=stop_after, extra_syscalls=extra_syscalls,
    )
    return handle.session(timeout=duration_seconds + 60.0)


def monitor_syscalls(target_pid: int, duration_seconds: float) -> SyscallStats:
    """Count syscall returns (and natural errors) of every thread of ``target_pid``."""
    handle = start_trace(target_pid, None, duration_seconds)
    return handle.stats(timeout=duration_seconds + 60.0)
