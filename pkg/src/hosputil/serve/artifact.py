"""Checksummed, human-readable model artifacts."""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import special

from ..errors import ChecksumMismatch, UnsupportedVersion
from ..glm import INTERCEPT, FittedModel
from ..table import CATEGORICAL, NUMERIC

FORMAT_VERSION = 1


def utc_now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class ModelArtifact:
    outcome: str
    feature_schema: tuple[dict, ...]
    column_map: tuple[tuple[str, str], ...]
    coefficients: tuple[float, ...]
    train_metrics: dict
    data_manifest_hash: str = ""
    created_at: str = field(default_factory=utc_now)
    format_version: int = FORMAT_VERSION
    content_checksum: str = ""

    def fields(self) -> dict:
        return {
            "format_version": self.format_version,
            "created_at": self.created_at,
            "outcome": self.outcome,
            "feature_schema": [dict(f) for f in self.feature_schema],
            "column_map": [list(c) for c in self.column_map],
            "coefficients": list(self.coefficients),
            "train_metrics": self.train_metrics,
            "data_manifest_hash": self.data_manifest_hash,
        }

    def sealed(self) -> "ModelArtifact":
        """Return a copy whose content_checksum covers every other field."""
        return replace(self, content_checksum=_digest(self.fields()))

    @property
    def checksum(self) -> str:
        return self.content_checksum or _digest(self.fields())

    def metric(self, split: str, name: str) -> float | None:
        return (self.train_metrics.get(split) or {}).get(name)


def _canonical(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=True, allow_nan=False) + "\n").encode("ascii")


def _digest(fields: dict) -> str:
    return hashlib.sha256(_canonical(fields)).hexdigest()


def artifact_from_model(model: FittedModel, metrics: dict, manifest_hash: str = "",
                        created_at: str | None = None) -> ModelArtifact:
    schema = []
    for term in model.formula.terms:
        levels = [lv for t, lv in model.column_map if t == term.name]
        if not levels:
            continue
        if term.kind == NUMERIC:
            schema.append({"name": term.name, "kind": NUMERIC})
        else:
            schema.append({"name": term.name, "kind": CATEGORICAL, "reference": term.reference,
                           "levels": [term.reference] + levels})
    art = ModelArtifact(
        outcome=model.formula.outcome,
        feature_schema=tuple(schema),
        column_map=tuple(tuple(c) for c in model.column_map),
        coefficients=tuple(float(b) for b in model.coefficients),
        train_metrics=metrics,
        data_manifest_hash=manifest_hash,
        created_at=created_at or utc_now(),
    )
    return art.sealed()


def serialize_artifact(artifact: ModelArtifact) -> bytes:
    if not artifact.content_checksum:
        artifact = artifact.sealed()
    doc = artifact.fields()
    doc["content_checksum"] = artifact.content_checksum
    return _canonical(doc)


def load_artifact(data: bytes) -> ModelArtifact:
    """Parse and verify. Any byte-level change to the document raises ChecksumMismatch."""
    try:
        doc = json.loads(data.decode("ascii"))
        stored = doc.pop("content_checksum")
        if not isinstance(doc, dict) or _canonical({**doc, "content_checksum": stored}) != data:
            raise ValueError("non-canonical document")
    except (ValueError, KeyError, UnicodeDecodeError, TypeError, AttributeError) as exc:
        raise ChecksumMismatch(f"artifact is corrupt: {exc}") from None
    if _digest(doc) != stored:
        raise ChecksumMismatch("artifact content checksum does not match")
    if doc.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"artifact format version {doc.get('format_version')!r} "
                                 f"(supported: {FORMAT_VERSION})")
    return ModelArtifact(
        outcome=doc["outcome"],
        feature_schema=tuple(doc["feature_schema"]),
        column_map=tuple(tuple(c) for c in doc["column_map"]),
        coefficients=tuple(doc["coefficients"]),
        train_metrics=doc["train_metrics"],
        data_manifest_hash=doc["data_manifest_hash"],
        created_at=doc["created_at"],
        format_version=doc["format_version"],
        content_checksum=stored,
    )


def read_artifact(path: str | Path) -> ModelArtifact:
    return load_artifact(Path(path).read_bytes())


def write_artifact_atomic(path: str | Path, artifact: ModelArtifact) -> None:
    """Write to a temp file in the target directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize_artifact(artifact)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureError(ValueError):
    """Bad request feature. ``status`` is the HTTP status the service should return."""

    def __init__(self, field: str, message: str, status: int = 400):
        super().__init__(message)
        self.field = field
        self.status = status


class Scorer:
    """Immutable compiled form of an artifact, used for request-time scoring."""

    def __init__(self, artifact: ModelArtifact):
        self.artifact = artifact
        self.checksum = artifact.checksum
        self.coefficients = np.asarray(artifact.coefficients, dtype=float)
        self.schema = {f["name"]: f for f in artifact.feature_schema}
        self._levels = {f["name"]: set(f["levels"]) for f in artifact.feature_schema if f["kind"] == CATEGORICAL}

    def row(self, features: dict) -> np.ndarray:
        if not isinstance(features, dict):
            raise FeatureError("", "request body must be a JSON object of feature name to value")
        for name in features:
            if name not in self.schema:
                raise FeatureError(name, f"unknown feature {name!r}")
        for name, spec in self.schema.items():
            if name not in features or features[name] is None:
                raise FeatureError(name, f"missing feature {name!r}")
            v = features[name]
            if spec["kind"] == NUMERIC:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise FeatureError(name, f"feature {name!r} must be a number")
                if not math.isfinite(v):
                    raise FeatureError(name, f"feature {name!r} is not finite", 422)
            else:
                if not isinstance(v, (str, int)) or isinstance(v, bool) or str(v) not in self._levels[name]:
                    raise FeatureError(name, f"feature {name!r} has unknown level {v!r}")
        x = np.empty(len(self.artifact.column_map))
        for j, (term, level) in enumerate(self.artifact.column_map):
            if term == INTERCEPT:
                x[j] = 1.0
            elif level == "numeric":
                x[j] = float(features[term])
            else:
                x[j] = 1.0 if str(features[term]) == level else 0.0
        return x

    def predict(self, features: dict) -> float:
        return float(special.expit(self.row(features) @ self.coefficients))
