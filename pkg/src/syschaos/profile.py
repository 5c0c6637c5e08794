"""Steady-state inference from two monitoring epochs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .metrics import Activity, MetricEpoch, MetricKind, classify_series
from .stats import DEFAULT_ALPHA, mann_whitney_u


class ConfigurationError(ValueError):
    pass


class Steadiness(str, Enum):
    STEADY = "steady"
    UNSTABLE = "unstable"


@dataclass
class MetricProfile:
    kind: MetricKind
    activity: Activity
    steadiness: Steadiness | None = None
    p_value: float | None = None
    reference: list[float] | None = None

    @property
    def steady(self) -> bool:
        return self.steadiness is Steadiness.STEADY


@dataclass
class SteadyStateProfile:
    target_id: str
    alpha: float
    interval_seconds: int
    epoch_seconds: int
    metrics: dict[str, MetricProfile] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.metrics)

    @property
    def active(self) -> int:
        return sum(m.activity is Activity.ACTIVE for m in self.metrics.values())

    @property
    def inactive(self) -> int:
        return self.total - self.active

    @property
    def steady_metrics(self) -> list[str]:
        return sorted(name for name, m in self.metrics.items() if m.steady)

    @property
    def unstable(self) -> int:
        return sum(m.steadiness is Steadiness.UNSTABLE for m in self.metrics.values())

    def reference(self, name: str) -> list[float]:
        ref = self.metrics[name].reference
        if ref is None:
            raise KeyError(f"{name} has no steady-state reference")
        return ref

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "alpha": self.alpha,
            "interval_seconds": self.interval_seconds,
            "epoch_seconds": self.epoch_seconds,
            "counts": {"total": self.total, "active": self.active, "steady": len(self.steady_metrics)},
            "metrics": {
                name: {
                    "kind": m.kind.value,
                    "activity": m.activity.value,
                    "steadiness": m.steadiness.value if m.steadiness else None,
                    "p_value": m.p_value,
                    "reference": m.reference,
                }
                for name, m in sorted(self.metrics.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SteadyStateProfile":
        prof = cls(d["target_id"], d["alpha"], d["interval_seconds"], d["epoch_seconds"])
        for name, m in d["metrics"].items():
            prof.metrics[name] = MetricProfile(
                MetricKind(m["kind"]),
                Activity(m["activity"]),
                Steadiness(m["steadiness"]) if m["steadiness"] else None,
                m["p_value"],
                m["reference"],
            )
        return prof

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SteadyStateProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def profile_path(data_dir: str | os.PathLike, target_id: str) -> Path:
    return Path(data_dir) / target_id / "profile.json"


def infer_steady_state(
    epoch1: MetricEpoch, epoch2: MetricEpoch, alpha: float = DEFAULT_ALPHA
) -> SteadyStateProfile:
    """Classify every metric as inactive, unstable or steady.

    A metric must be active in both epochs to be compared; it is steady when
    the Mann-Whitney test cannot tell the two epochs apart at ``alpha``.
    Steady metrics keep the pooled points of both epochs as reference.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must be in (0, 1), got {alpha}")
    if epoch1.target_id != epoch2.target_id:
        raise ConfigurationError(f"epochs come from different targets: {epoch1.target_id!r} vs {epoch2.target_id!r}")
    if (epoch1.interval_seconds, epoch1.duration_seconds) != (epoch2.interval_seconds, epoch2.duration_seconds):
        raise ConfigurationError("epochs differ in interval or duration")

    prof = SteadyStateProfile(epoch1.target_id, alpha, epoch1.interval_seconds, epoch1.duration_seconds)
    for name in sorted(set(epoch1.series) | set(epoch2.series)):
        s1, s2 = epoch1.series.get(name), epoch2.series.get(name)
        kind = (s1 or s2).kind
        if s1 is None or s2 is None or Activity.INACTIVE in (classify_series(s1), classify_series(s2)):
            prof.metrics[name] = MetricProfile(kind, Activity.INACTIVE)
            continue
        p = mann_whitney_u(s1.values, s2.values).p_value
        if p < alpha:
            prof.metrics[name] = MetricProfile(kind, Activity.ACTIVE, Steadiness.UNSTABLE, p)
        else:
            prof.metrics[name] = MetricProfile(kind, Activity.ACTIVE, Steadiness.STEADY, p, s1.values + s2.values)
    return prof
