"""Value types shared by the monitor, the injector and the model synthesizer."""

from __future__ import annotations

import errno as _errno
from dataclasses import dataclass, field

# Syscalls whose success semantics we rely on; others need an explicit opt-in.
INJECTABLE_SYSCALLS = frozenset({
    "read", "write", "accept4", "recvfrom", "recvmsg", "sendmsg", "connect",
    "epoll_ctl", "epoll_pwait", "futex", "shutdown", "unlink",
})

# Kernel-internal restart codes, never visible to user space.
RESTART_CODES = frozenset({512, 513, 514, 516})


class ModelError(ValueError):
    pass


def errno_number(name: str) -> int:
    value = getattr(_errno, name, None)
    if not isinstance(value, int) or not name.startswith("E"):
        raise ModelError(f"unknown errno name {name!r} on this host")
    return value


def errno_label(number: int) -> str:
    return _errno.errorcode.get(number, f"E{number}")


def is_error_return(ret: int) -> bool:
    return -4096 < ret < 0


@dataclass(frozen=True)
class Provenance:
    natural_rate: float | None = None
    amplification: str = "user-supplied"
    field_observed: bool = False


@dataclass(frozen=True)
class ErrorModel:
    """Inject ``errno_name`` into successful ``syscall`` returns with probability ``rate``."""

    syscall: str
    errno_name: str
    rate: float
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ModelError(f"rate {self.rate} outside [0, 1]")
        errno_number(self.errno_name)

    @property
    def errno(self) -> int:
        return errno_number(self.errno_name)

    @property
    def key(self) -> tuple[str, str]:
        return (self.syscall, self.errno_name)

    def check_injectable(self, extra_syscalls=()) -> None:
        if self.syscall not in INJECTABLE_SYSCALLS and self.syscall not in set(extra_syscalls):
            raise ModelError(
                f"{self.syscall} is not in the injectable allowlist; pass it explicitly to opt in"
            )

    def to_dict(self) -> dict:
        return {
            "syscall": self.syscall,
            "errno": self.errno_name,
            "rate": self.rate,
            "provenance": {
                "natural_rate": self.provenance.natural_rate,
                "amplification": self.provenance.amplification,
                "field_observed": self.provenance.field_observed,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorModel":
        prov = d.get("provenance") or {}
        return cls(
            d["syscall"],
            d["errno"],
            float(d["rate"]),
            Provenance(prov.get("natural_rate"), prov.get("amplification", "user-supplied"),
                       bool(prov.get("field_observed", False))),
        )

    def __str__(self) -> str:
        return f"({self.syscall}, {self.errno_name}, {self.rate:g})"


@dataclass
class SyscallStats:
    invocations: dict[str, int] = field(default_factory=dict)
    errors: dict[tuple[str, str], int] = field(default_factory=dict)
    window_seconds: float = 0.0
    truncated: bool = False
    target_pid: int | None = None

    def __post_init__(self):
        for (sc, _), n in self.errors.items():
            if n < 0 or n > self.invocations.get(sc, 0):
                raise ValueError(f"error count for {sc} exceeds its invocations")

    @property
    def total_invocations(self) -> int:
        return sum(self.invocations.values())

    @property
    def total_errors(self) -> int:
        return sum(self.errors.values())

    def natural_rate(self, syscall: str, errno_name: str) -> float:
        calls = self.invocations.get(syscall, 0)
        return self.errors.get((syscall, errno_name), 0) / calls if calls else 0.0

    def to_dict(self) -> dict:
        return {
            "target_pid": self.target_pid,
            "window_seconds": self.window_seconds,
            "truncated": self.truncated,
            "invocations": dict(sorted(self.invocations.items())),
            "errors": [
                {"syscall": s, "errno": e, "count": n} for (s, e), n in sorted(self.errors.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyscallStats":
        return cls(
            {k: int(v) for k, v in d["invocations"].items()},
            {(r["syscall"], r["errno"]): int(r["count"]) for r in d["errors"]},
            float(d.get("window_seconds", 0.0)),
            bool(d.get("truncated", False)),
            d.get("target_pid"),
        )


@dataclass
class InjectionSession:
    target_pid: int
    model: ErrorModel
    rng_seed: int
    intercepted: int = 0
    injected: int = 0
    passed_errors: int = 0
    target_exited: bool = False
    exit_status: int | None = None
    started_at: float | None = None
    ended_at: float | None = None
    stats: SyscallStats = field(default_factory=SyscallStats)
    log_path: str | None = None

    @property
    def crashed(self) -> bool:
        return self.target_exited

    def to_dict(self) -> dict:
        return {
            "target_pid": self.target_pid,
            "model": self.model.to_dict(),
            "rng_seed": self.rng_seed,
            "intercepted": self.intercepted,
            "injected": self.injected,
            "passed_errors": self.passed_errors,
            "target_exited": self.target_exited,
            "exit_status": self.exit_status,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "stats": self.stats.to_dict(),
            "log_path": self.log_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionSession":
        return cls(
            d["target_pid"], ErrorModel.from_dict(d["model"]), d["rng_seed"], d["intercepted"],
            d["injected"], d.get("passed_errors", 0), d["target_exited"], d.get("exit_status"),
            d.get("started_at"), d.get("ended_at"), SyscallStats.from_dict(d["stats"]), d.get("log_path"),
        )
