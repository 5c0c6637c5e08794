"""Syscall monitoring and return-code injection for a running process."""

from .session import (
    CapabilityReport,
    PrivilegeError,
    SessionBusyError,
    SyscallError,
    TargetNotFoundError,
    TraceHandle,
    UnsupportedPlatformError,
    inject,
    monitor_syscalls,
    probe_capabilities,
    start_trace,
)
from .types import (
    INJECTABLE_SYSCALLS,
    ErrorModel,
    InjectionSession,
    ModelError,
    Provenance,
    SyscallStats,
    errno_number,
)

__all__ = [
    "CapabilityReport", "ErrorModel", "INJECTABLE_SYSCALLS", "InjectionSession", "ModelError",
    "PrivilegeError", "Provenance", "SessionBusyError", "SyscallError", "SyscallStats",
    "TargetNotFoundError", "TraceHandle", "UnsupportedPlatformError", "errno_number", "inject",
    "monitor_syscalls", "probe_capabilities", "start_trace",
]
