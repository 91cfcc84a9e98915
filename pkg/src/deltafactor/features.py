"""File I/O for feature records and score tables.

Feature records travel as JSON lines: one object per line with an `id`, a
`class` label, optional checkpoint/category/subclass/prompt_type labels,
and exactly one of `vector` (flat list of floats) or `maps` (a list of
{layer, c, h, w, data} objects holding row-major feature maps). Score
tables are plain CSV with a fixed header. All parse failures raise
FeatureFileError naming the file and line.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .metrics import CategoryScore, ScoreRecord

__all__ = [
    "FeatureFileError",
    "FeatureRecord",
    "LABEL_FIELDS",
    "load_features",
    "write_features",
    "feature_matrix",
    "feature_labels",
    "SCORE_COLUMNS",
    "CATEGORY_COLUMNS",
    "load_scores",
    "write_scores",
    "write_category_scores",
]

LABEL_FIELDS = {
    "id": "id",
    "class": "class_name",
    "checkpoint": "checkpoint",
    "category": "category",
    "subclass": "subclass",
    "prompt_type": "prompt_type",
}
_OPTIONAL_KEYS = ("checkpoint", "category", "subclass", "prompt_type")
_RECORD_KEYS = {"id", "class", "vector", "maps", *_OPTIONAL_KEYS}
_MAP_KEYS = {"layer", "c", "h", "w", "data"}

SCORE_COLUMNS = ("checkpoint", "category", "class", "subclass",
                 "prompt_type", "metric", "value", "higher_is_better")
CATEGORY_COLUMNS = ("checkpoint", "category", "prompt_type", "metric", "value")


class FeatureFileError(ValueError):
    """Malformed feature or score file."""


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    """One embedded sample: labels plus a vector or a stack of feature maps.

    `maps` holds (layer_name, array) pairs with (C, H, W) arrays; `vector`
    holds a single 1-D embedding. Exactly one of the two is present.
    """

    id: str
    class_name: str
    checkpoint: str | None = None
    category: str | None = None
    subclass: str | None = None
    prompt_type: str | None = None
    vector: np.ndarray | None = None
    maps: tuple[tuple[str, np.ndarray], ...] | None = None

    def __post_init__(self):
        for field in ("id", "class_name"):
            label = getattr(self, field)
            if not isinstance(label, str) or not label:
                raise ValueError(f"{field} must be a non-empty string, got {label!r}")
        for field in _OPTIONAL_KEYS:
            label = getattr(self, LABEL_FIELDS.get(field, field))
            if label is not None and (not isinstance(label, str) or not label):
                raise ValueError(f"{field} must be None or a non-empty string")
        if (self.vector is None) == (self.maps is None):
            raise ValueError(f"record {self.id!r} needs exactly one of vector/maps")
        if self.vector is not None:
            vec = np.asarray(self.vector, dtype=np.float64)
            if vec.ndim != 1 or vec.size == 0:
                raise ValueError(f"record {self.id!r}: vector must be 1-D and non-empty")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {self.id!r}: vector holds non-finite values")
            object.__setattr__(self, "vector", vec)
        else:
            pairs = []
            seen = set()
            for layer, arr in self.maps:
                if not isinstance(layer, str) or not layer:
                    raise ValueError(f"record {self.id!r}: empty feature map layer name")
                if layer in seen:
                    raise ValueError(f"record {self.id!r}: duplicate layer {layer!r}")
                seen.add(layer)
                arr = np.asarray(arr, dtype=np.float64)
                if arr.ndim != 3 or arr.size == 0:
                    raise ValueError(
                        f"record {self.id!r}: map {layer!r} must be (C, H, W)")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(
                        f"record {self.id!r}: map {layer!r} holds non-finite values")
                pairs.append((layer, arr))
            if not pairs:
                raise ValueError(f"record {self.id!r}: maps may not be empty")
            object.__setattr__(self, "maps", tuple(pairs))


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_numbers(values, where: str):
    if not isinstance(values, list) or not values:
        raise ValueError(f"{where} must be a non-empty list of numbers")
    for v in values:
        if not _is_number(v) or not math.isfinite(v):
            raise ValueError(f"{where} holds a non-numeric or non-finite entry: {v!r}")


def _parse_maps(raw):
    if not isinstance(raw, list) or not raw:
        raise ValueError("maps must be a non-empty list")
    pairs = []
    for mi, entry in enumerate(raw):
        where = f"map {mi}"
        if not isinstance(entry, dict) or set(entry) != _MAP_KEYS:
            raise ValueError(f"{where} must be an object with keys {sorted(_MAP_KEYS)}")
        dims = [entry[k] for k in ("c", "h", "w")]
        if not all(isinstance(d, int) and not isinstance(d, bool) and d > 0
                   for d in dims):
            raise ValueError(f"{where} has non-positive dimensions {dims}")
        _check_numbers(entry["data"], f"{where} data")
        c, h, w = dims
        if len(entry["data"]) != c * h * w:
            raise ValueError(
                f"{where} data has {len(entry['data'])} values, expected {c * h * w}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(c, h, w)
        pairs.append((entry["layer"], arr))
    return tuple(pairs)


def _parse_record(obj) -> FeatureRecord:
    if not isinstance(obj, dict):
        raise ValueError("each line must hold a JSON object")
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    if "vector" in obj and "maps" in obj:
        raise ValueError("record carries both vector and maps")
    vector = None
    maps = None
    if "vector" in obj:
        _check_numbers(obj["vector"], "vector")
        vector = np.array(obj["vector"], dtype=np.float64)
    elif "maps" in obj:
        maps = _parse_maps(obj["maps"])
    else:
        raise ValueError("record carries neither vector nor maps")
    return FeatureRecord(
        id=obj.get("id"),
        class_name=obj.get("class"),
        checkpoint=obj.get("checkpoint"),
        category=obj.get("category"),
        subclass=obj.get("subclass"),
        prompt_type=obj.get("prompt_type"),
        vector=vector,
        maps=maps,
    )


def load_features(path) -> list[FeatureRecord]:
    """Read a JSONL feature file; all records must share one payload mode."""
    records = []
    mode = None
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FeatureFileError(f"{path}: line {line_no}: invalid JSON: {exc}")
            try:
                rec = _parse_record(obj)
            except (ValueError, TypeError) as exc:
                raise FeatureFileError(f"{path}: line {line_no}: {exc}")
            kind = "vector" if rec.vector is not None else "maps"
            if mode is None:
                mode = kind
            elif kind != mode:
                raise FeatureFileError(
                    f"{path}: line {line_no}: {kind} record in a {mode} file")
            if rec.vector is not None:
                if dim is None:
                    dim = rec.vector.size
                elif rec.vector.size != dim:
                    raise FeatureFileError(
                        f"{path}: line {line_no}: vector has {rec.vector.size} "
                        f"entries, expected {dim}")
            records.append(rec)
    if not records:
        raise FeatureFileError(f"{path}: no records")
    return records


def _record_json(rec: FeatureRecord) -> dict:
    obj = {"id": rec.id, "class": rec.class_name}
    for key in _OPTIONAL_KEYS:
        value = getattr(rec, LABEL_FIELDS[key])
        if value is not None:
            obj[key] = value
    if rec.vector is not None:
        obj["vector"] = rec.vector.tolist()
    else:
        obj["maps"] = [{"layer": layer, "c": arr.shape[0], "h": arr.shape[1],
                        "w": arr.shape[2], "data": arr.ravel().tolist()}
                       for layer, arr in rec.maps]
    return obj


def write_features(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(_record_json(rec)) + "\n")


def feature_matrix(records) -> np.ndarray:
    """Stack vector records into an (n, d) array, in file order."""
    recs = list(records)
    if not recs:
        raise ValueError("no records to stack")
    if any(rec.vector is None for rec in recs):
        raise ValueError("feature_matrix requires vector records")
    return np.stack([rec.vector for rec in recs])


def feature_labels(records, field: str) -> list[str]:
    """Pull one label per record; every record must carry the field."""
    if field not in LABEL_FIELDS:
        raise ValueError(f"unknown field {field!r}, expected one of "
                         f"{sorted(LABEL_FIELDS)}")
    attr = LABEL_FIELDS[field]
    labels = []
    for rec in records:
        value = getattr(rec, attr)
        if value is None:
            raise ValueError(f"record {rec.id!r} has no {field} label")
        labels.append(value)
    return labels


# ---------------------------------------------------------------------------
# score tables


def _score_cell(path, line_no, name, cell, allow_empty=False):
    if cell == "" and not allow_empty:
        raise FeatureFileError(f"{path}: line {line_no}: empty {name} column")
    return cell


def load_scores(path) -> list[ScoreRecord]:
    """Read a score CSV with the fixed SCORE_COLUMNS header."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise FeatureFileError(
            f"{path}: header must be {','.join(SCORE_COLUMNS)}")
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(SCORE_COLUMNS):
            raise FeatureFileError(
                f"{path}: line {line_no}: expected {len(SCORE_COLUMNS)} columns, "
                f"got {len(row)}")
        (checkpoint, category, class_name, subclass,
         prompt_type, metric, value_cell, flag_cell) = row
        for name, cell in (("checkpoint", checkpoint), ("category", category),
                           ("class", class_name), ("prompt_type", prompt_type),
                           ("metric", metric)):
            _score_cell(path, line_no, name, cell)
        try:
            value = float(value_cell)
        except ValueError:
            raise FeatureFileError(
                f"{path}: line {line_no}: bad value {value_cell!r}")
        if not math.isfinite(value):
            raise FeatureFileError(
                f"{path}: line {line_no}: non-finite value {value_cell!r}")
        flag = flag_cell.strip().lower()
        if flag not in ("true", "false"):
            raise FeatureFileError(
                f"{path}: line {line_no}: higher_is_better must be true or "
                f"false, got {flag_cell!r}")
        records.append(ScoreRecord(
            checkpoint=checkpoint, category=category, class_name=class_name,
            subclass=subclass or None, prompt_type=prompt_type, metric=metric,
            value=value, higher_is_better=(flag == "true")))
    if not records:
        raise FeatureFileError(f"{path}: no score rows")
    return records


def write_scores(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for rec in records:
            writer.writerow([
                rec.checkpoint, rec.category, rec.class_name,
                rec.subclass or "", rec.prompt_type, rec.metric,
                repr(float(rec.value)),
                "true" if rec.higher_is_better else "false",
            ])


def write_category_scores(records: list[CategoryScore], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CATEGORY_COLUMNS)
        for rec in records:
            writer.writerow([rec.checkpoint, rec.category, rec.prompt_type,
                             rec.metric, repr(float(rec.value))])
