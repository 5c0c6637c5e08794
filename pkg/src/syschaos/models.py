"""Error-model synthesis from observed syscall failures, and common models.

A synthesized model reuses an (syscall, errno) pair seen failing naturally
and amplifies its natural rate::

    rate = clamp(natural_rate * factor, floor, cap)

so that errors show up often enough to matter within a short experiment.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .syscall.types import ErrorModel, ModelError, Provenance, SyscallStats

log = logging.getLogger(__name__)

DEFAULT_FACTOR = 50.0
DEFAULT_FLOOR = 0.05
DEFAULT_CAP = 1.0


class UsageError(ValueError):
    pass


def amplification_formula(factor: float, floor: float, cap: float) -> str:
    return f"rate = clamp(natural_rate * {factor:g}, {floor:g}, {cap:g})"


@dataclass
class ErrorModelSet:
    target_id: str
    models: list[ErrorModel] = field(default_factory=list)
    source_stats: SyscallStats | None = None

    def __post_init__(self):
        seen = set()
        for m in self.models:
            if m.key in seen:
                raise ModelError(f"duplicate model for {m.key}")
            seen.add(m.key)

    def keys(self) -> set[tuple[str, str]]:
        return {m.key for m in self.models}

    def get(self, syscall: str, errno_name: str) -> ErrorModel | None:
        for m in self.models:
            if m.key == (syscall, errno_name):
                return m
        return None

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def to_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "models": [m.to_dict() for m in self.models],
            "source_stats": self.source_stats.to_dict() if self.source_stats else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorModelSet":
        stats = d.get("source_stats")
        return cls(
            d.get("target_id", "unknown"),
            [ErrorModel.from_dict(m) for m in d["models"]],
            SyscallStats.from_dict(stats) if stats else None,
        )

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path


def load_models(path: str | os.PathLike) -> ErrorModelSet:
    """Read a model file: a model set, a bare list of models, or one model."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        return ErrorModelSet(Path(path).stem, [ErrorModel.from_dict(m) for m in data])
    if "models" in data:
        return ErrorModelSet.from_dict(data)
    return ErrorModelSet(Path(path).stem, [ErrorModel.from_dict(data)])


def synthesize_models(
    stats: SyscallStats,
    amplification_factor: float = DEFAULT_FACTOR,
    rate_floor: float = DEFAULT_FLOOR,
    rate_cap: float = DEFAULT_CAP,
    *,
    target_id: str = "target",
) -> ErrorModelSet:
    if amplification_factor < 1:
        raise UsageError("amplification factor must be >= 1")
    if not 0 < rate_floor <= rate_cap <= 1:
        raise UsageError("need 0 < floor <= cap <= 1")
    if not stats.invocations:
        log.warning("no syscall invocations observed; no error models synthesized")
        return ErrorModelSet(target_id, [], stats)
    formula = amplification_formula(amplification_factor, rate_floor, rate_cap)
    models = []
    for (sc, err), count in sorted(stats.errors.items()):
        if count <= 0:
            continue
        try:
            natural = stats.natural_rate(sc, err)
            rate = min(rate_cap, max(rate_floor, natural * amplification_factor))
            models.append(ErrorModel(sc, err, rate, Provenance(natural, formula, True)))
        except ModelError as exc:
            log.warning("skipping %s/%s: %s", sc, err, exc)
    return ErrorModelSet(target_id, models, stats)


def derive_common_models(sets: Iterable[ErrorModelSet]) -> list[ErrorModel]:
    """Pairs present in every set, each at the maximum of the per-set rates."""
    sets = list(sets)
    if len(sets) < 2:
        raise UsageError("common models need at least two model sets")
    shared = set.intersection(*(s.keys() for s in sets))
    out = []
    for sc, err in sorted(shared):
        per_target = sorted(((s.target_id, s.get(sc, err).rate) for s in sets))
        rate = max(r for _, r in per_target)
        observed = all(s.get(sc, err).provenance.field_observed for s in sets)
        note = "max over targets: " + ", ".join(f"{t}={r:g}" for t, r in per_target)
        out.append(ErrorModel(sc, err, rate, Provenance(None, note, observed)))
    return out
