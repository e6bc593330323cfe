"""On-disk formats: score tensors, labels, configs, artifacts, results.

Every writer is atomic (temp file + rename into place) and
deterministic: identical in-memory content always serializes to
identical bytes.  Every reader validates headers and versions and
raises :class:`~robustcp.errors.InputError` on anything malformed, so
the command-line layer can map bad files to a stable exit code.

Formats are documented field by field in ``docs/formats.md``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .scores import PredictionSet
from .smoothing import BinGrid, ScoreDistribution

__all__ = [
    "atomic_write_text",
    "atomic_write_bytes",
    "write_score_tensor",
    "read_score_tensor",
    "write_labels_csv",
    "read_labels_csv",
    "write_score_matrix_csv",
    "read_score_matrix_csv",
    "write_feature_bounds_csv",
    "read_feature_bounds_csv",
    "ConfigField",
    "parse_config_text",
    "parse_override",
    "resolve_config",
    "render_config",
    "write_calibration_artifact",
    "read_calibration_artifact",
    "write_sets_csv",
    "read_sets_csv",
    "write_metrics_json",
    "write_witness_json",
    "read_witness_json",
]

SCORES_HEADER = ["point_id", "class_id", "sample_id", "score"]
TENSOR_MAGIC = b"RCPT"
TENSOR_VERSION = 1
ARTIFACT_FORMAT = "robustcp-calibration"
ARTIFACT_VERSION = 1
WITNESS_FORMAT = "robustcp-poisoning"
WITNESS_VERSION = 1


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf8"))


# ------------------------------------------------------------ score tensors --


def _tensor_to_csv(tensor: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORES_HEADER)
    n_points, n_classes, n_samples = tensor.shape
    for p in range(n_points):
        for c in range(n_classes):
            for s in range(n_samples):
                writer.writerow([p, c, s, repr(float(tensor[p, c, s]))])
    return buf.getvalue()


def _tensor_from_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise InputError(f"{path}: expected header {','.join(SCORES_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise InputError(f"{path}:{lineno}: expected 4 columns")
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        return np.empty((0, 0, 0))
    data = np.array(rows)
    dims = data[:, :3].astype(int)
    shape = tuple(dims.max(axis=0) + 1)
    if len(rows) != shape[0] * shape[1] * shape[2]:
        raise InputError(f"{path}: ids must form a full grid starting at 0")
    tensor = np.full(shape, np.nan)
    tensor[dims[:, 0], dims[:, 1], dims[:, 2]] = data[:, 3]
    if np.isnan(tensor).any():
        raise InputError(f"{path}: duplicate or missing (point, class, sample) ids")
    return tensor


def _tensor_to_binary(tensor: np.ndarray) -> bytes:
    header = TENSOR_MAGIC + struct.pack("<HIII", TENSOR_VERSION, *tensor.shape)
    return header + np.ascontiguousarray(tensor, dtype="<f4").tobytes()


def _tensor_from_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    head_size = len(TENSOR_MAGIC) + struct.calcsize("<HIII")
    if len(raw) < head_size or raw[:4] != TENSOR_MAGIC:
        raise InputError(f"{path}: not a packed score tensor")
    version, n_points, n_classes, n_samples = struct.unpack("<HIII", raw[4:head_size])
    if version != TENSOR_VERSION:
        raise InputError(f"{path}: unsupported tensor version {version}")
    expected = n_points * n_classes * n_samples * 4
    if len(raw) - head_size != expected:
        raise InputError(f"{path}: payload size does not match the declared dims")
    values = np.frombuffer(raw, dtype="<f4", offset=head_size)
    return values.astype(float).reshape(n_points, n_classes, n_samples)


def write_score_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write a (points, classes, samples) score tensor; format by extension.

    ``.csv`` gives the interoperable text form, ``.bin`` the packed
    little-endian binary (magic, version, dims, row-major float32).
    """
    path = Path(path)
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim != 3:
        raise InputError("score tensor must have shape (points, classes, samples)")
    if not np.isfinite(tensor).all():
        raise InputError("score tensor must be finite")
    if path.suffix == ".csv":
        atomic_write_text(path, _tensor_to_csv(tensor))
    elif path.suffix == ".bin":
        atomic_write_bytes(path, _tensor_to_binary(tensor))
    else:
        raise InputError(f"{path}: unknown score tensor extension (use .csv or .bin)")


def read_score_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    if path.suffix == ".csv":
        tensor = _tensor_from_csv(path)
    elif path.suffix == ".bin":
        tensor = _tensor_from_binary(path)
    else:
        raise InputError(f"{path}: unknown score tensor extension (use .csv or .bin)")
    if not np.isfinite(tensor).all():
        raise InputError(f"{path}: scores must be finite")
    return tensor


# ------------------------------------------------------------------- labels --


def write_labels_csv(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=int)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point_id", "label"])
    for p, y in enumerate(labels):
        writer.writerow([p, int(y)])
    atomic_write_text(path, buf.getvalue())


def read_labels_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["point_id", "label"]:
            raise InputError(f"{path}: expected header point_id,label")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise InputError(f"{path}:{lineno}: expected 2 columns")
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    ids = [p for p, _ in pairs]
    if ids != list(range(len(ids))):
        raise InputError(f"{path}: point ids must be contiguous from 0")
    return np.array([y for _, y in pairs], dtype=int)


def _read_table(
    path: Path, header: list[str], parsers: list
) -> list[tuple]:
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        found = next(reader, None)
        if found != header:
            raise InputError(f"{path}: expected header {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                rows.append(tuple(parse(cell) for parse, cell in zip(parsers, row)))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_score_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    """Per-class scores of each point (no Monte-Carlo sample axis)."""
    matrix = np.asarray(matrix, dtype=float)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point_id", "class_id", "score"])
    for p in range(matrix.shape[0]):
        for c in range(matrix.shape[1]):
            writer.writerow([p, c, repr(float(matrix[p, c]))])
    atomic_write_text(path, buf.getvalue())


def read_score_matrix_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    rows = _read_table(path, ["point_id", "class_id", "score"], [int, int, float])
    if not rows:
        raise InputError(f"{path}: no score rows")
    data = np.array(rows)
    dims = data[:, :2].astype(int)
    shape = tuple(dims.max(axis=0) + 1)
    if len(rows) != shape[0] * shape[1]:
        raise InputError(f"{path}: ids must form a full grid starting at 0")
    matrix = np.full(shape, np.nan)
    matrix[dims[:, 0], dims[:, 1]] = data[:, 2]
    if np.isnan(matrix).any():
        raise InputError(f"{path}: duplicate or missing (point, class) ids")
    return matrix


def write_feature_bounds_csv(
    path: str | Path, scores: np.ndarray, lower_bounds: np.ndarray
) -> None:
    """Observed calibration scores next to their certified lower bounds."""
    scores = np.asarray(scores, dtype=float)
    lower_bounds = np.asarray(lower_bounds, dtype=float)
    if scores.shape != lower_bounds.shape or scores.ndim != 1:
        raise InputError("scores and lower_bounds must be equal-length vectors")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point_id", "score", "lower_bound"])
    for p in range(scores.size):
        writer.writerow([p, repr(float(scores[p])), repr(float(lower_bounds[p]))])
    atomic_write_text(path, buf.getvalue())


def read_feature_bounds_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    rows = _read_table(path, ["point_id", "score", "lower_bound"], [int, float, float])
    if not rows:
        raise InputError(f"{path}: no rows")
    ids = [r[0] for r in rows]
    if ids != list(range(len(ids))):
        raise InputError(f"{path}: point ids must be contiguous from 0")
    scores = np.array([r[1] for r in rows])
    lower = np.array([r[2] for r in rows])
    return scores, lower


# ------------------------------------------------------------------- config --


class ConfigField:
    """One typed key in a flat key = value configuration file."""

    def __init__(self, kind: str, default: object = None, required: bool = False):
        if kind not in ("int", "float", "bool", "str"):
            raise ValueError(f"unknown config field kind {kind!r}")
        self.kind = kind
        self.default = default
        self.required = required

    def parse(self, key: str, raw: str) -> object:
        raw = raw.strip()
        try:
            if self.kind == "int":
                return int(raw)
            if self.kind == "float":
                return float(raw)
            if self.kind == "bool":
                if raw.lower() in ("true", "false"):
                    return raw.lower() == "true"
                raise ValueError("expected true or false")
            return raw
        except ValueError as exc:
            raise InputError(f"config key {key!r}: {exc}") from exc


def parse_config_text(text: str, schema: Mapping[str, ConfigField]) -> dict:
    """Parse ``key = value`` lines against a schema; unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InputError(f"config line {lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in schema:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise InputError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = schema[key].parse(key, raw)
    return values


def parse_override(item: str, schema: Mapping[str, ConfigField]) -> tuple[str, object]:
    """Parse one ``--set key=value`` command-line override."""
    if "=" not in item:
        raise InputError(f"override {item!r}: expected key=value")
    key, raw = (part.strip() for part in item.split("=", 1))
    if key not in schema:
        raise InputError(f"override: unknown key {key!r}")
    return key, schema[key].parse(key, raw)


def resolve_config(
    schema: Mapping[str, ConfigField],
    text: str | None = None,
    overrides: Sequence[str] = (),
) -> dict:
    """Defaults, then config file values, then command-line overrides."""
    values = {key: f.default for key, f in schema.items()}
    if text is not None:
        values.update(parse_config_text(text, schema))
    for item in overrides:
        key, value = parse_override(item, schema)
        values[key] = value
    missing = [k for k, f in schema.items() if f.required and values[k] is None]
    if missing:
        raise InputError(f"missing required config keys: {', '.join(sorted(missing))}")
    return values


def render_config(values: Mapping[str, object]) -> str:
    """Resolved config as sorted ``key = value`` lines."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------- calibration artifact --


def write_calibration_artifact(
    path: str | Path,
    table,
    thresholds: Mapping[str, float],
    config: Mapping[str, object],
) -> None:
    """Serialize a calibration table plus its thresholds and config echo."""
    points = []
    for i, dist in enumerate(table.distributions):
        entry = {
            "id": int(table.point_ids[i]),
            "n_samples": int(dist.n_samples),
            "mean": float(dist.mean),
            "variance": float(dist.variance),
            "cdf": [float(v) for v in dist.cdf],
            "lower_bound": float(table.lower_bounds[i]),
        }
        if table.corrected_lower_bounds is not None:
            entry["corrected_lower_bound"] = float(table.corrected_lower_bounds[i])
        points.append(entry)
    grid = table.distributions[0].grid if table.distributions else BinGrid.uniform()
    payload = {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "grid_edges": [float(e) for e in grid.edges],
        "thresholds": {k: float(v) for k, v in thresholds.items()},
        "config": dict(config),
        "points": points,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_calibration_artifact(path: str | Path):
    """Load an artifact back into a table, thresholds, and config echo."""
    from .evasion import CalibrationTable

    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != ARTIFACT_FORMAT:
        raise InputError(f"{path}: not a calibration artifact")
    if payload.get("version") != ARTIFACT_VERSION:
        raise InputError(f"{path}: unsupported artifact version {payload.get('version')}")
    try:
        grid = BinGrid(np.array(payload["grid_edges"], dtype=float))
        dists = []
        lower = []
        corrected = []
        ids = []
        for entry in payload["points"]:
            ids.append(int(entry["id"]))
            lower.append(float(entry["lower_bound"]))
            if "corrected_lower_bound" in entry:
                corrected.append(float(entry["corrected_lower_bound"]))
            dists.append(
                ScoreDistribution(
                    n_samples=int(entry["n_samples"]),
                    mean=float(entry["mean"]),
                    variance=float(entry["variance"]),
                    grid=grid,
                    cdf=np.array(entry["cdf"], dtype=float),
                )
            )
        if corrected and len(corrected) != len(dists):
            raise InputError(f"{path}: corrected bounds on only some points")
        table = CalibrationTable(
            point_ids=np.array(ids, dtype=int),
            smooth_means=np.array([d.mean for d in dists]),
            lower_bounds=np.array(lower),
            distributions=dists,
            corrected_lower_bounds=np.array(corrected) if corrected else None,
        )
        thresholds = {k: float(v) for k, v in payload["thresholds"].items()}
        config = payload.get("config", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed artifact ({exc})") from exc
    return table, thresholds, config


# ----------------------------------------------------------- sets & metrics --


def write_sets_csv(
    path: str | Path, named_sets: Mapping[str, Sequence[PredictionSet]]
) -> None:
    """Prediction sets as one row per (method, point, member class).

    Points with empty sets produce no rows; readers recover them from
    the accompanying labels file.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point_id", "method", "class_id"])
    for method in sorted(named_sets):
        for p, pset in enumerate(named_sets[method]):
            for c in sorted(pset.members):
                writer.writerow([p, method, c])
    atomic_write_text(path, buf.getvalue())


def read_sets_csv(path: str | Path) -> dict[str, dict[int, frozenset[int]]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["point_id", "method", "class_id"]:
            raise InputError(f"{path}: expected header point_id,method,class_id")
        out: dict[str, dict[int, set[int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected 3 columns")
            try:
                p, method, c = int(row[0]), row[1], int(row[2])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(method, {}).setdefault(p, set()).add(c)
    return {
        method: {p: frozenset(v) for p, v in points.items()}
        for method, points in out.items()
    }


def write_metrics_json(path: str | Path, payload: Mapping[str, object]) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_witness_json(
    path: str | Path,
    kind: str,
    alpha: float,
    budget: int,
    n: int,
    threshold: float,
    rank: int,
    indices: Iterable[int],
    values: Iterable[float] | None = None,
    labels: Iterable[int] | None = None,
) -> None:
    witness: dict[str, object] = {"indices": [int(i) for i in indices]}
    if values is not None:
        witness["values"] = [float(v) for v in values]
    if labels is not None:
        witness["labels"] = [int(c) for c in labels]
    payload = {
        "format": WITNESS_FORMAT,
        "version": WITNESS_VERSION,
        "kind": kind,
        "alpha": float(alpha),
        "budget": int(budget),
        "n": int(n),
        "threshold": float(threshold),
        "rank": int(rank),
        "witness": witness,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_witness_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != WITNESS_FORMAT:
        raise InputError(f"{path}: not a poisoning witness file")
    if payload.get("version") != WITNESS_VERSION:
        raise InputError(f"{path}: unsupported witness version {payload.get('version')}")
    return payload
