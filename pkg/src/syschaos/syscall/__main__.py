"""Tracer helper process; prints JSON lines (attached / result / error) on stdout."""

from __future__ import annotations

import argparse
import errno
import json
import math
import os
import signal
import sys
import time

from . import ptrace as _pt
from .types import ErrorModel, InjectionSession


def _emit(**msg) -> None:
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def _fail(kind: str, message: str) -> int:
    _emit(event="error", kind=kind, message=message)
    return 2


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m syschaos.syscall")
    ap.add_argument("--pid", type=int, required=True)
    ap.add_argument("--duration", type=float, default=math.inf)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--model")
    ap.add_argument("--log")
    ap.add_argument("--stop-after", type=int)
    args = ap.parse_args(argv)

    if not _pt.supported_platform():
        return _fail("unsupported", "ptrace backend supports Linux/x86_64 only")
    if not os.path.exists(f"/proc/{args.pid}"):
        return _fail("not-found", f"no process {args.pid}")
    if _pt.tracer_pid(args.pid):
        return _fail("busy", f"process {args.pid} is already traced (one session per target)")

    model = ErrorModel.from_dict(json.loads(args.model)) if args.model else None
    log_file = open(args.log, "a", buffering=1 << 16) if args.log else None
    tracer = _pt.Tracer(args.pid, model, args.seed, log_file)

    stop = False

    def request_stop(*_):
        nonlocal stop
        stop = True

    signal.signal(signal.SIGTERM, request_stop)
    signal.signal(signal.SIGINT, request_stop)
    signal.siginterrupt(signal.SIGTERM, True)
    signal.siginterrupt(signal.SIGINT, True)

    try:
        tracer.attach()
    except OSError as exc:
        if exc.errno == errno.ESRCH:
            return _fail("not-found", f"process {args.pid} vanished during attach")
        if exc.errno == errno.EPERM:
            return _fail("privilege", f"injection unavailable: insufficient privileges ({exc.strerror})")
        return _fail("attach", str(exc))
    _emit(event="attached", t=tracer.started_at, threads=len(tracer.tids))

    _pt.interruptible_waits()
    deadline = time.monotonic() + args.duration
    try:
        tracer.run(deadline, lambda: stop, args.stop_after)
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)
        if not tracer.target_exited:
            tracer.detach()
        else:
            tracer.ended_at = time.time()
        if log_file is not None:
            log_file.close()

    stats = tracer.stats()
    result = {"event": "result", "stats": stats.to_dict(), "session": None}
    if model is not None:
        session = InjectionSession(
            args.pid, model, args.seed, tracer.intercepted, tracer.injected, tracer.passed_errors,
            tracer.target_exited, tracer.exit_status, tracer.started_at, tracer.ended_at, stats, args.log,
        )
        result["session"] = session.to_dict()
    _emit(**result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
