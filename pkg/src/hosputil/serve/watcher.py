"""Online-data watcher: poll or push triggers a retrain, a quality gate decides promotion."""
from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from .artifact import ModelArtifact, Scorer, read_artifact, write_artifact_atomic
from .pipeline import PipelineConfig, auc_score, load_manifest, run_pipeline
from .service import QueueFull

log = logging.getLogger(__name__)

GATE_METRICS = ("auc", "accuracy")


@dataclass(frozen=True)
class GatePolicy:
    metric: str = "auc"
    max_degradation: float = 0.01
    min_test_rows: int = 50

    def __post_init__(self):
        if self.metric not in GATE_METRICS:
            raise ValueError(f"gate metric must be one of {GATE_METRICS}")
        if self.max_degradation < 0:
            raise ValueError("gate epsilon must be >= 0")

    @classmethod
    def parse(cls, text: str, min_test_rows: int = 50) -> "GatePolicy":
        """``"auc:0.01"`` → GatePolicy("auc", 0.01)."""
        metric, _, eps = text.partition(":")
        return cls(metric.strip(), float(eps) if eps else 0.01, min_test_rows)


@dataclass
class GateVerdict:
    passed: bool
    metric: str
    new: float | None
    current: float | None
    epsilon: float
    reason: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_gate(new: ModelArtifact, current: ModelArtifact | None, policy: GatePolicy) -> GateVerdict:
    """Pass iff the new test metric is at least the incumbent's recorded test metric minus epsilon."""
    value = new.metric("test", policy.metric)
    n_test = new.metric("test", "n") or 0
    incumbent = current.metric("test", policy.metric) if current else None
    args = (policy.metric, value, incumbent, policy.max_degradation)
    if n_test < policy.min_test_rows:
        return GateVerdict(False, *args, f"test split has {n_test} rows < {policy.min_test_rows}")
    if value is None:
        return GateVerdict(False, *args, "new test metric undefined")
    if incumbent is None:
        return GateVerdict(True, *args, "no incumbent model")
    if value >= incumbent - policy.max_degradation:
        return GateVerdict(True, *args, "within tolerance")
    return GateVerdict(False, *args, f"{policy.metric} dropped by {incumbent - value:.4f} > {policy.max_degradation}")


def _utc() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class Watcher:
    """Single-worker retraining loop with a depth-1 coalescing queue.

    ``tick()`` runs the pipeline only when the manifest hash differs from the
    last processed one. ``notify()`` queues a run that happens regardless of the
    hash. ``on_promote`` is called after the new artifact is on disk, typically
    to make the service reload.
    """

    def __init__(self, manifest_source: str, config: PipelineConfig, artifact_path: str | Path,
                 audit_path: str | Path, gate: GatePolicy = GatePolicy(), interval: float = 300.0,
                 on_promote: Callable[[], None] | None = None):
        self.manifest_source = manifest_source
        self.config = config
        self.artifact_path = Path(artifact_path)
        self.audit_path = Path(audit_path)
        self.gate = gate
        self.interval = interval
        self.on_promote = on_promote
        self.runs = 0
        self.last_hash: str | None = None
        current = self.current_artifact()
        if current is not None:
            self.last_hash = current.data_manifest_hash
        self._cv = threading.Condition()
        self._pending: tuple[str, str | None] | None = None
        self._running = False
        self._stop = False
        self._thread: threading.Thread | None = None
        self._audit_lock = threading.Lock()

    # -- state -----------------------------------------------------------

    def current_artifact(self) -> ModelArtifact | None:
        try:
            return read_artifact(self.artifact_path)
        except FileNotFoundError:
            return None
        except Exception as exc:  # noqa: BLE001 - an unreadable incumbent counts as absent
            log.warning("current artifact unreadable: %s", exc)
            return None

    @property
    def busy(self) -> bool:
        with self._cv:
            return self._running or self._pending is not None

    # -- audit -----------------------------------------------------------

    def audit(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True, allow_nan=False)
        with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def audit_records(self) -> list[dict]:
        if not self.audit_path.exists():
            return []
        return [json.loads(x) for x in self.audit_path.read_text().splitlines() if x.strip()]

    # -- runs ------------------------------------------------------------

    def tick(self) -> dict | None:
        """Poll once. Returns the audit record of a run, or None when nothing changed."""
        try:
            manifest = load_manifest(self.manifest_source)
        except Exception as exc:  # noqa: BLE001 - logged, never fatal
            log.error("manifest fetch failed: %s", exc)
            return None
        if manifest.hash == self.last_hash:
            return None
        return self.run("poll", self.manifest_source)

    def run(self, trigger: str, source: str | None = None) -> dict:
        """Execute one pipeline run and gate it. Never raises on pipeline failure."""
        source = source or self.manifest_source
        self.runs += 1
        record: dict = {"time": _utc(), "trigger": trigger, "manifest_source": source, "manifest_hash": None,
                        "gate": None, "metrics": None, "promoted": False, "artifact_checksum": None,
                        "error": None}
        try:
            manifest = load_manifest(source)
            record["manifest_hash"] = manifest.hash
            # failures are not retried until the manifest changes again
            self.last_hash = manifest.hash
            tvt, sel = run_pipeline(manifest, self.config)
            art = tvt.artifact
            record["metrics"] = art.train_metrics
            record["terms"] = sel.terms
            current = self.current_artifact()
            verdict = evaluate_gate(art, current, self.gate)
            record["gate"] = verdict.to_dict()
            if current is not None:
                record["incumbent_on_new_test"] = _incumbent_auc(current, tvt)
            if verdict.passed:
                write_artifact_atomic(self.artifact_path, art)
                record["promoted"] = True
                record["artifact_checksum"] = art.checksum
                if self.on_promote is not None:
                    try:
                        self.on_promote()
                    except Exception as exc:  # noqa: BLE001
                        log.error("reload after promotion failed: %s", exc)
                        record["error"] = f"reload failed: {exc}"
        except Exception as exc:  # noqa: BLE001 - pipeline failures are audited, never fatal
            log.exception("pipeline run failed")
            record["error"] = f"{type(exc).__name__}: {exc}"
        self.audit(record)
        return record

    # -- push + background loop -----------------------------------------

    def notify(self, hint: str | None = None) -> str:
        """Queue one push-triggered run. Duplicates coalesce; a conflicting hint is refused."""
        source = hint or self.manifest_source
        with self._cv:
            if self._pending is not None:
                if self._pending[1] != source:
                    raise QueueFull("a run for a different manifest is already queued")
                return "coalesced"
            self._pending = ("push", source)
            self._cv.notify_all()
            return "queued"

    def _loop(self) -> None:
        first = True
        while True:
            with self._cv:
                if not first and self._pending is None and not self._stop:
                    self._cv.wait(timeout=self.interval)
                if self._stop:
                    return
                job = self._pending
                self._pending = None
                self._running = True
            first = False
            try:
                if job is not None:
                    self.run(*job)
                else:
                    self.tick()
            finally:
                with self._cv:
                    self._running = False
                    self._cv.notify_all()

    def start(self) -> "Watcher":
        self._stop = False
        self._thread = threading.Thread(target=self._loop, name="hosputil-watcher", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = 30.0) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)

    def wait_idle(self, timeout: float = 60.0) -> bool:
        with self._cv:
            return self._cv.wait_for(lambda: not self._running and self._pending is None, timeout)


def _incumbent_auc(current: ModelArtifact, tvt) -> float | None:
    """Incumbent AUC on the new test split, recorded for the audit only."""
    try:
        sub = tvt.table.take(tvt.test_rows)
        scorer = Scorer(current)
        p = [scorer.predict({n: _raw(sub, n, i) for n in scorer.schema}) for i in range(sub.n_rows)]
        return auc_score(sub[current.outcome].values, np.asarray(p))
    except Exception:  # noqa: BLE001 - schema drift makes the comparison meaningless
        return None


def _raw(table, name: str, i: int):
    col = table[name]
    if col.missing[i]:
        return None
    return float(col.values[i]) if col.is_numeric else col.levels[col.values[i]]
