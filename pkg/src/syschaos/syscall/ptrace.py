"""ptrace(2) backend: syscall-exit interception for every thread of a process.

The tracer seizes all threads, stops at syscall entry and exit, counts
returns per syscall and errno, and for the configured error model may rewrite
a successful return value to ``-errno`` before the thread resumes. The
syscall itself has already run by then.

All ptrace requests must come from the thread that attached, so a
:class:`Tracer` is driven from a single thread (normally the main thread of
the helper process started by :mod:`syschaos.syscall.session`).
"""

from __future__ import annotations

import ctypes
import errno
import json
import os
import platform
import random
import signal
import time
from typing import IO, Callable

from .table import SYSCALL_NAMES
from .types import RESTART_CODES, ErrorModel, SyscallStats, errno_label, is_error_return

PTRACE_PEEKUSER = 3
PTRACE_POKEUSER = 6
PTRACE_DETACH = 17
PTRACE_SYSCALL = 24
PTRACE_GETEVENTMSG = 0x4201
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207
PTRACE_LISTEN = 0x4208
PTRACE_GET_SYSCALL_INFO = 0x420E

PTRACE_O_TRACESYSGOOD = 0x01
PTRACE_O_TRACECLONE = 0x08

PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_STOP = 128

PTRACE_SYSCALL_INFO_ENTRY = 1
PTRACE_SYSCALL_INFO_EXIT = 2

AUDIT_ARCH_X86_64 = 0xC000003E
__WALL = 0x40000000
SYSCALL_TRAP = signal.SIGTRAP | 0x80
STOP_SIGNALS = {signal.SIGSTOP, signal.SIGTSTP, signal.SIGTTIN, signal.SIGTTOU}

# offsets into struct user_regs_struct
_RAX = 8 * 10
_ORIG_RAX = 8 * 15

_libc = ctypes.CDLL(None, use_errno=True)
_libc.ptrace.restype = ctypes.c_long
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
_libc.waitpid.restype = ctypes.c_int
_libc.waitpid.argtypes = [ctypes.c_int, ctypes.POINTER(ctypes.c_int), ctypes.c_int]


class _SyscallInfo(ctypes.Structure):
    _fields_ = [
        ("op", ctypes.c_uint8),
        ("pad", ctypes.c_uint8 * 3),
        ("arch", ctypes.c_uint32),
        ("instruction_pointer", ctypes.c_uint64),
        ("stack_pointer", ctypes.c_uint64),
        # entry: nr, args[6]; exit: rval (s64), is_error (u8)
        ("data", ctypes.c_int64 * 7),
    ]


def supported_platform() -> bool:
    return platform.system() == "Linux" and platform.machine() == "x86_64"


def ptrace(request: int, tid: int, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    ret = _libc.ptrace(request, tid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    if ret == -1:
        err = ctypes.get_errno()
        if err:
            raise OSError(err, f"ptrace({request:#x}, {tid}): {os.strerror(err)}")
    return ret


def _waitpid(status: ctypes.c_int) -> int:
    tid = _libc.waitpid(-1, ctypes.byref(status), __WALL)
    if tid == -1:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))
    return tid


def list_threads(pid: int) -> list[int]:
    return sorted(int(t) for t in os.listdir(f"/proc/{pid}/task"))


def tracer_pid(pid: int) -> int:
    try:
        fh = open(f"/proc/{pid}/status")
    except FileNotFoundError:
        return 0
    with fh:
        for line in fh:
            if line.startswith("TracerPid:"):
                return int(line.split()[1])
    return 0


class Tracer:
    def __init__(
        self,
        pid: int,
        model: ErrorModel | None = None,
        rng_seed: int = 0,
        log_file: IO[str] | None = None,
    ):
        self.pid = pid
        self.model = model
        self.rng = random.Random(rng_seed)
        self.log_file = log_file
        self._target_nr = None
        if model is not None:
            from .table import SYSCALL_NUMBERS
            self._target_nr = SYSCALL_NUMBERS[model.syscall]
            self._rewrite = (-model.errno) & 0xFFFFFFFFFFFFFFFF
        self.tids: set[int] = set()
        self._pending_nr: dict[int, int] = {}
        self._info = _SyscallInfo()
        self._status = ctypes.c_int()
        self.invocations: dict[str, int] = {}
        self.errors: dict[tuple[str, str], int] = {}
        self.intercepted = 0
        self.injected = 0
        self.passed_errors = 0
        self.target_exited = False
        self.exit_status: int | None = None
        self.started_at: float | None = None
        self.ended_at: float | None = None

    # -- attach / detach ----------------------------------------------------

    def attach(self) -> None:
        options = PTRACE_O_TRACESYSGOOD | PTRACE_O_TRACECLONE
        seen: set[int] = set()
        while True:
            fresh = [t for t in list_threads(self.pid) if t not in seen]
            if not fresh:
                break
            for tid in fresh:
                seen.add(tid)
                try:
                    ptrace(PTRACE_SEIZE, tid, 0, options)
                    ptrace(PTRACE_INTERRUPT, tid)
                except OSError as exc:
                    if exc.errno == errno.ESRCH and tid != self.pid:
                        continue
                    if exc.errno == errno.EPERM and tracer_pid(tid) == os.getpid():
                        # already auto-attached through a traced clone()
                        self.tids.add(tid)
                        continue
                    if self.tids:
                        self.detach()
                    raise
                self.tids.add(tid)
        self.started_at = time.time()

    def detach(self) -> None:
        for tid in list(self.tids):
            try:
                ptrace(PTRACE_INTERRUPT, tid)
            except OSError:
                self.tids.discard(tid)
        while self.tids:
            try:
                tid = _waitpid(self._status)
            except OSError as exc:
                if exc.errno == errno.EINTR:
                    continue
                break
            status = self._status.value
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                self._on_exit(tid, status)
                continue
            sig = os.WSTOPSIG(status)
            event = status >> 16
            if event == PTRACE_EVENT_CLONE:
                self.tids.add(self._event_msg(tid))
            deliver = sig if event == 0 and sig not in (SYSCALL_TRAP,) else 0
            try:
                ptrace(PTRACE_DETACH, tid, 0, deliver)
            except OSError:
                pass
            self.tids.discard(tid)
        self.ended_at = time.time()

    # -- main loop ----------------------------------------------------------

    def run(self, deadline: float, should_stop: Callable[[], bool], stop_after: int | None = None) -> None:
        """Process stops until ``deadline`` (monotonic), a stop request or target exit."""
        while self.tids:
            if time.monotonic() >= deadline or should_stop():
                return
            if stop_after is not None and self.intercepted >= stop_after:
                return
            try:
                tid = _waitpid(self._status)
            except OSError as exc:
                if exc.errno == errno.EINTR:
                    continue
                if exc.errno == errno.ECHILD:
                    self.tids.clear()
                    break
                raise
            self._handle(tid, self._status.value)
        self.target_exited = True

    def _handle(self, tid: int, status: int) -> None:
        if os.WIFEXITED(status) or os.WIFSIGNALED(status):
            self._on_exit(tid, status)
            return
        self.tids.add(tid)
        sig = os.WSTOPSIG(status)
        event = status >> 16
        if sig == SYSCALL_TRAP:
            self._on_syscall_stop(tid)
            self._resume(tid, PTRACE_SYSCALL)
        elif event == PTRACE_EVENT_STOP:
            self._resume(tid, PTRACE_LISTEN if sig in STOP_SIGNALS else PTRACE_SYSCALL)
        elif event:
            if event == PTRACE_EVENT_CLONE:
                self.tids.add(self._event_msg(tid))
            self._resume(tid, PTRACE_SYSCALL)
        else:
            self._resume(tid, PTRACE_SYSCALL, sig)

    def _resume(self, tid: int, request: int, sig: int = 0) -> None:
        try:
            ptrace(request, tid, 0, sig)
        except OSError as exc:
            if exc.errno != errno.ESRCH:
                raise

    def _event_msg(self, tid: int) -> int:
        msg = ctypes.c_ulong()
        ptrace(PTRACE_GETEVENTMSG, tid, 0, ctypes.addressof(msg))
        return msg.value

    def _on_exit(self, tid: int, status: int) -> None:
        self.tids.discard(tid)
        self._pending_nr.pop(tid, None)
        if tid == self.pid:
            self.exit_status = os.waitstatus_to_exitcode(status)
        if not self.tids:
            self.target_exited = True

    def _on_syscall_stop(self, tid: int) -> None:
        info = self._info
        try:
            ptrace(PTRACE_GET_SYSCALL_INFO, tid, ctypes.sizeof(info), ctypes.addressof(info))
        except OSError as exc:
            if exc.errno == errno.ESRCH:
                return
            raise
        if info.arch != AUDIT_ARCH_X86_64:
            return
        if info.op == PTRACE_SYSCALL_INFO_ENTRY:
            self._pending_nr[tid] = info.data[0]
            return
        if info.op != PTRACE_SYSCALL_INFO_EXIT:
            return
        nr = self._pending_nr.pop(tid, None)
        if nr is None:
            nr = ptrace(PTRACE_PEEKUSER, tid, _ORIG_RAX)
        ret = info.data[0]
        if is_error_return(ret) and -ret in RESTART_CODES:
            return
        name = SYSCALL_NAMES.get(nr, f"syscall_{nr}")
        self.invocations[name] = self.invocations.get(name, 0) + 1
        failed = is_error_return(ret)
        if failed:
            key = (name, errno_label(-ret))
            self.errors[key] = self.errors.get(key, 0) + 1
        if nr != self._target_nr:
            return
        if failed:
            self.passed_errors += 1
            action = "pass-error"
        else:
            self.intercepted += 1
            if self.rng.random() < self.model.rate:
                ptrace(PTRACE_POKEUSER, tid, _RAX, self._rewrite)
                self.injected += 1
                action = "inject"
            else:
                action = "pass"
        if self.log_file is not None:
            self.log_file.write(json.dumps(
                {"t": time.time(), "tid": tid, "syscall": name, "ret": ret, "action": action}
            ) + "\n")

    def stats(self) -> SyscallStats:
        window = (self.ended_at or time.time()) - (self.started_at or time.time())
        return SyscallStats(dict(self.invocations), dict(self.errors), window, self.target_exited, self.pid)


def interruptible_waits(period: float = 0.05) -> None:
    """Make blocking waitpid calls return periodically (main thread only)."""
    signal.signal(signal.SIGALRM, lambda *_: None)
    signal.siginterrupt(signal.SIGALRM, True)
    signal.setitimer(signal.ITIMER_REAL, period, period)
