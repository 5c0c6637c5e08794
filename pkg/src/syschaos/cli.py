"""``syschaos`` command line: probe, monitor, profile, synthesize, experiment, benchmark, report.

Exit codes: 0 success, 1 usage error, 2 privilege or setup error,
3 experiment invalidated because the target died before injection.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from . import __version__
from .logs import setup_logging

log = logging.getLogger("syschaos")

EXIT_OK, EXIT_USAGE, EXIT_SETUP, EXIT_INVALID = 0, 1, 2, 3


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: {message}")


def _default_data_dir() -> str:
    return os.environ.get("SYSCHAOS_DATA_DIR", "syschaos-data")


def _target_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--target-pid", type=int, help="pid of a running target")
    g.add_argument("--launch", metavar="CMD", help="command that starts the target")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data-dir", default=None, help="state directory (default $SYSCHAOS_DATA_DIR or ./syschaos-data)")
    common.add_argument("--target-id", default="target", help="name used for files and reports")
    common.add_argument("--log-level", default="info")

    ap = _Parser(prog="syschaos", description="syscall error-injection chaos experiments")
    ap.add_argument("--version", action="version", version=f"syschaos {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("probe", parents=[common], help="report whether syscall injection is possible")
    p.add_argument("--target-pid", type=int)

    p = sub.add_parser("monitor", parents=[common], help="count syscalls and natural errors")
    _target_flags(p)
    p.add_argument("--duration", default="60s")

    p = sub.add_parser("profile", parents=[common], help="collect two epochs and infer the steady state")
    p.add_argument("--metrics-url")
    p.add_argument("--interval", default="15s")
    p.add_argument("--epoch", default="5h", help="length of each of the two epochs")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--epoch-files", nargs=2, metavar="FILE", help="replay two stored epochs instead of scraping")

    p = sub.add_parser("synthesize", parents=[common], help="turn syscall stats into error models")
    p.add_argument("--stats", help="SyscallStats file (default: the target's latest monitor output)")
    p.add_argument("--factor", type=float, default=50.0)
    p.add_argument("--floor", type=float, default=0.05)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--output")

    p = sub.add_parser("experiment", parents=[common], help="run one five-phase experiment")
    _target_flags(p)
    p.add_argument("--metrics-url", required=True)
    p.add_argument("--error-model", required=True, metavar="FILE")
    p.add_argument("--model", metavar="SYSCALL:ERRNO", help="pick one model from a multi-model file")
    p.add_argument("--profile", metavar="FILE", help="steady-state profile (default: the target's stored one)")
    p.add_argument("--epoch", help="build the profile first from two epochs of this length")
    p.add_argument("--durations", default="2h,5m,5m,10m,5m", help="warmup,precheck,injection,recovery,validation")
    p.add_argument("--interval", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["markdown", "json"], default="markdown")
    p.add_argument("--plots", action="store_true", help="write SVG trend charts per metric")
    p.add_argument("--no-details", action="store_true")
    p.add_argument("--allow-syscall", action="append", default=[], help="opt a syscall outside the allowlist in")

    p = sub.add_parser("benchmark", parents=[common], help="common error models and cross-client comparison")
    p.add_argument("--model-set", action="append", required=True, metavar="FILE")
    p.add_argument("--result", nargs="*", default=[], metavar="FILE")
    p.add_argument("--format", choices=["markdown", "json"], default="markdown")

    p = sub.add_parser("report", parents=[common], help="render reports from stored results")
    p.add_argument("--result", nargs="+", required=True, metavar="FILE")
    p.add_argument("--format", choices=["markdown", "json"], default="markdown")
    p.add_argument("--out-dir")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--no-details", action="store_true")
    return ap


def _seconds(text: str, flag: str) -> int:
    from .orchestrator import parse_duration

    try:
        return parse_duration(text)
    except ValueError as exc:
        raise UsageExit(f"{flag}: {exc}") from None


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=1, ensure_ascii=False) + "\n")


# --- subcommands ---------------------------------------------------------------

def cmd_probe(args, data_dir: Path) -> int:
    from .syscall.session import probe_capabilities

    report = probe_capabilities(args.target_pid)
    _emit(report.to_dict())
    if not report.available:
        log.warning(report.message, extra={"remediation": report.remediation})
        return EXIT_SETUP
    return EXIT_OK


class _Launched:
    def __init__(self, command: str):
        from .orchestrator import LaunchedTarget

        self.target = LaunchedTarget(shlex.split(command))

    def __enter__(self):
        return self.target

    def __exit__(self, *exc):
        self.target.stop()


def _with_target(args):
    if args.launch:
        return _Launched(args.launch)

    from contextlib import nullcontext

    from .orchestrator import ProcessTarget

    return nullcontext(ProcessTarget(args.target_pid))


def cmd_monitor(args, data_dir: Path) -> int:
    from .syscall.session import monitor_syscalls

    duration = _seconds(args.duration, "--duration")
    with _with_target(args) as target:
        if args.launch:
            import time

            time.sleep(1.0)  # let the target start its workloads
        stats = monitor_syscalls(target.pid, duration)
    out = data_dir / args.target_id / "syscall-stats.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(stats.to_dict(), indent=1) + "\n", encoding="utf-8")
    log.info("syscall stats written", extra={"path": str(out), "invocations": stats.total_invocations,
                                              "errors": stats.total_errors})
    _emit({"path": str(out), "invocations": stats.total_invocations, "errors": stats.total_errors})
    return EXIT_OK


def _collect_profile(url: str, interval: int, epoch: int, alpha: float, target_id: str, data_dir: Path):
    from .metrics import EpochStore, collect_epoch
    from .profile import infer_steady_state, profile_path

    store = EpochStore(data_dir)
    first = store.next_index(target_id)
    epochs = []
    for i in range(2):
        log.info("collecting epoch", extra={"epoch": i + 1, "seconds": epoch, "interval": interval})
        epochs.append(collect_epoch(url, interval, epoch, target_id=target_id, store=store, index=first + i))
    prof = infer_steady_state(epochs[0], epochs[1], alpha)
    prof.save(profile_path(data_dir, target_id))
    return prof


def _profile_summary(prof) -> dict:
    return {"target_id": prof.target_id, "metrics": prof.total, "active": prof.active,
            "inactive": prof.inactive, "steady": len(prof.steady_metrics), "unstable": prof.unstable,
            "alpha": prof.alpha}


def cmd_profile(args, data_dir: Path) -> int:
    from .metrics import load_epoch_file
    from .profile import infer_steady_state, profile_path

    if args.epoch_files:
        e1, e2 = (load_epoch_file(p) for p in args.epoch_files)
        prof = infer_steady_state(e1, e2, args.alpha)
        prof.save(profile_path(data_dir, prof.target_id))
    else:
        if not args.metrics_url:
            raise UsageExit("profile: --metrics-url is required (or replay with --epoch-files)")
        interval = _seconds(args.interval, "--interval")
        epoch = _seconds(args.epoch, "--epoch")
        if interval < 1 or epoch % interval:
            raise UsageExit("profile: --interval must be >= 1s and divide --epoch")
        prof = _collect_profile(args.metrics_url, interval, epoch, args.alpha, args.target_id, data_dir)
    _emit(_profile_summary(prof))
    return EXIT_OK


def cmd_synthesize(args, data_dir: Path) -> int:
    from .models import synthesize_models
    from .syscall.types import SyscallStats

    path = Path(args.stats) if args.stats else data_dir / args.target_id / "syscall-stats.json"
    if not path.exists():
        raise UsageExit(f"synthesize: no stats file at {path} (run monitor first or pass --stats)")
    stats = SyscallStats.from_dict(json.loads(path.read_text(encoding="utf-8")))
    models = synthesize_models(stats, args.factor, args.floor, args.cap, target_id=args.target_id)
    out = Path(args.output) if args.output else data_dir / args.target_id / "models.json"
    models.save(out)
    _emit({"path": str(out), "models": [m.to_dict() for m in models]})
    return EXIT_OK


def _pick_model(args):
    from .models import load_models

    models = load_models(args.error_model).models
    if args.model:
        sc, _, err = args.model.partition(":")
        models = [m for m in models if m.key == (sc, err)]
        if not models:
            raise UsageExit(f"experiment: {args.model} not found in {args.error_model}")
    if len(models) != 1:
        raise UsageExit(f"experiment: {args.error_model} holds {len(models)} models; choose one with --model")
    return models[0]


def cmd_experiment(args, data_dir: Path) -> int:
    from .orchestrator import (ExperimentConfig, PhaseDurations, PtraceInjector, Status, TargetSpec,
                               run_experiment, wait_for_metrics)
    from .profile import SteadyStateProfile, profile_path
    from .report import render_report, write_report_files

    try:
        durations = PhaseDurations.parse(args.durations)
    except ValueError as exc:
        raise UsageExit(f"--durations: {exc}") from None
    model = _pick_model(args)
    model.check_injectable(args.allow_syscall)
    prof_file = Path(args.profile) if args.profile else profile_path(data_dir, args.target_id)
    if not args.epoch and not prof_file.exists():
        raise UsageExit(f"experiment: no profile at {prof_file}; run profile first or pass --epoch")
    target_spec = (TargetSpec(pid=args.target_pid, metrics_url=args.metrics_url) if args.target_pid
                   else TargetSpec.launched(args.launch, args.metrics_url))

    with _with_target(args) as target:
        injector = PtraceInjector(tuple(args.allow_syscall))
        injector.check(target)
        if args.epoch:
            from .clock import SystemClock
            from .metrics import HttpMetricSource

            epoch = _seconds(args.epoch, "--epoch")
            interval = _seconds(args.interval or "15s", "--interval")
            wait_for_metrics(HttpMetricSource(args.metrics_url), target, SystemClock())
            prof = _collect_profile(args.metrics_url, interval, epoch, args.alpha or 0.01, args.target_id, data_dir)
        else:
            prof = SteadyStateProfile.load(prof_file)
        interval = _seconds(args.interval, "--interval") if args.interval else prof.interval_seconds
        config = ExperimentConfig(
            target_spec, model, prof, durations, interval, args.alpha or prof.alpha, args.seed,
            args.target_id, tuple(args.allow_syscall),
            str(data_dir / args.target_id / "sessions"),
        )
        try:
            config.validate()
        except ValueError as exc:
            raise UsageExit(f"experiment: {exc}") from None
        result = run_experiment(config, target=target, injector=injector)

    out_dir = data_dir / args.target_id / "experiments" / f"{model.syscall}-{model.errno_name}-seed{args.seed}"
    result.save(out_dir / "result.json")
    write_report_files([result], out_dir, details=not args.no_details, plots=args.plots)
    sys.stdout.write(render_report([result], args.format, details=not args.no_details))
    log.info("experiment finished", extra={"status": result.status.value, "dir": str(out_dir)})
    if result.status is Status.INVALID:
        log.error("experiment invalidated: target died before injection",
                  extra={"phase": result.died_in_phase.value if result.died_in_phase else None})
        return EXIT_INVALID
    return EXIT_OK


def cmd_benchmark(args, data_dir: Path) -> int:
    from .models import ErrorModelSet, UsageError, derive_common_models, load_models
    from .orchestrator import ExperimentResult
    from .report import render_benchmark

    sets = [load_models(p) for p in args.model_set]
    try:
        common = derive_common_models(sets)
    except UsageError as exc:
        raise UsageExit(f"benchmark: {exc}") from None
    clients = [s.target_id for s in sets]
    results = [ExperimentResult.load(p) for p in args.result]
    out = data_dir / "benchmark"
    out.mkdir(parents=True, exist_ok=True)
    ErrorModelSet("common", common).save(out / "common-models.json")
    md = render_benchmark(results, common, "markdown", clients)
    (out / "benchmark.md").write_text(md, encoding="utf-8")
    (out / "benchmark.json").write_text(render_benchmark(results, common, "json", clients), encoding="utf-8")
    if args.format == "json":
        _emit({"common_models": [m.to_dict() for m in common], "dir": str(out)})
    else:
        sys.stdout.write(md)
    log.info("benchmark written", extra={"common_models": len(common), "dir": str(out)})
    return EXIT_OK


def cmd_report(args, data_dir: Path) -> int:
    from .orchestrator import ExperimentResult
    from .report import render_report, write_report_files

    results = [ExperimentResult.load(p) for p in args.result]
    if args.out_dir:
        write_report_files(results, args.out_dir, details=not args.no_details, plots=args.plots)
    sys.stdout.write(render_report(results, args.format, details=not args.no_details))
    return EXIT_OK


COMMANDS = {
    "probe": cmd_probe, "monitor": cmd_monitor, "profile": cmd_profile, "synthesize": cmd_synthesize,
    "experiment": cmd_experiment, "benchmark": cmd_benchmark, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    from .models import ModelError
    from .orchestrator import SetupError
    from .profile import ConfigurationError
    from .syscall.session import SyscallError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit as exc:
        setup_logging()
        log.error(str(exc), extra={"exit_code": EXIT_USAGE})
        return EXIT_USAGE
    setup_logging(args.log_level)
    data_dir = Path(args.data_dir or _default_data_dir())
    try:
        return COMMANDS[args.command](args, data_dir)
    except UsageExit as exc:
        parser.print_usage(sys.stderr)
        log.error(str(exc), extra={"exit_code": EXIT_USAGE})
        return EXIT_USAGE
    except (ModelError, ConfigurationError) as exc:
        log.error(str(exc), extra={"exit_code": EXIT_USAGE})
        return EXIT_USAGE
    except (SetupError, SyscallError, PermissionError) as exc:
        log.error(str(exc), extra={"exit_code": EXIT_SETUP})
        return EXIT_SETUP
    except (OSError, RuntimeError, TimeoutError) as exc:
        log.error(f"setup failed: {exc}", extra={"exit_code": EXIT_SETUP})
        return EXIT_SETUP


if __name__ == "__main__":
    sys.exit(main())
