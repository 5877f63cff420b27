"""Run manifest: full provenance for a resumable pipeline run.

One JSON document per run records the config snapshot, corpus inventory
(with digests), per-stage completion ledger, warnings/failures, and gateway
traffic counters.  Every artifact a run produced is reachable from here.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

STAGES = ("prepare", "partition", "generate", "judge", "report")


class ManifestError(Exception):
    pass


@dataclass
class StageRecord:
    completed: bool = False
    completed_at: float | None = None
    artifacts: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    gateway: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "completed": self.completed,
            "completed_at": self.completed_at,
            "artifacts": list(self.artifacts),
            "warnings": list(self.warnings),
            "failures": list(self.failures),
            "gateway": dict(self.gateway),
            "stats": dict(self.stats),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StageRecord":
        return cls(
            completed=payload.get("completed", False),
            completed_at=payload.get("completed_at"),
            artifacts=list(payload.get("artifacts", [])),
            warnings=list(payload.get("warnings", [])),
            failures=list(payload.get("failures", [])),
            gateway=dict(payload.get("gateway", {})),
            stats=dict(payload.get("stats", {})),
        )


@dataclass
class RunManifest:
    run_id: str
    config: dict
    config_digest: str
    created_at: float = field(default_factory=time.time)
    corpora: dict = field(default_factory=dict)
    newline_conventions: dict = field(default_factory=dict)
    stages: dict[str, StageRecord] = field(
        default_factory=lambda: {name: StageRecord() for name in STAGES}
    )

    def stage(self, name: str) -> StageRecord:
        if name not in self.stages:
            raise ManifestError(f"unknown stage {name!r}")
        return self.stages[name]

    def require_completed(self, name: str) -> None:
        if not self.stage(name).completed:
            raise ManifestError(
                f"stage {name!r} has not completed for this run; run it first"
            )

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "config_digest": self.config_digest,
            "created_at": self.created_at,
            "corpora": self.corpora,
            "newline_conventions": self.newline_conventions,
            "stages": {name: record.as_dict() for name, record in self.stages.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RunManifest":
        manifest = cls(
            run_id=payload["run_id"],
            config=payload["config"],
            config_digest=payload["config_digest"],
            created_at=payload.get("created_at", 0.0),
            corpora=payload.get("corpora", {}),
            newline_conventions=payload.get("newline_conventions", {}),
        )
        manifest.stages = {
            name: StageRecord.from_dict(record)
            for name, record in payload.get("stages", {}).items()
        }
        for name in STAGES:
            manifest.stages.setdefault(name, StageRecord())
        return manifest

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps(self.as_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"no manifest at {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
