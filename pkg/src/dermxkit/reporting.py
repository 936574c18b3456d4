"""CSV/JSON report writers, run manifests and cross-run consolidation.

Every CSV starts with one version line ``# dermxkit-<kind> v<N>`` followed by
optional ``# key: value`` lines and then a fixed header. Undefined values
are written as ``NA``.
"""

import contextlib
import csv
import datetime as _dt
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .bundle import atomic_write_bytes, canonical_json
from .constants import DISEASES
from .errors import DermxError
from .metrics import BinaryMetrics, aggregate

logger = logging.getLogger(__name__)

CSV_VERSION = 1
MANIFEST = "manifest.json"
LOCK = ".dermxkit.lock"
MODEL_LABELS = {"dx": "Dx", "dermx": "DermX", "dermx+": "DermX+"}

# Column order per report type; stable across runs.
COLUMNS = {
    "metrics": ["name", *BinaryMetrics.FIELDS],
    "summary": [
        "name", "f1_mean", "f1_std", "sensitivity_mean", "sensitivity_std",
        "specificity_mean", "specificity_std", "support",
    ],
    "faithfulness": ["image_id", "predicted_class", "m_x", "m_xe", "F", "occlusion_source", "occluded_fraction"],
    "precision": [
        "image_id", "predicted_diagnosis", "gold_diagnosis", "correct",
        "predicted_characteristics", "expected_set", "precision",
    ],
    "sample_counts": ["characteristic", "samples", "pairwise_f1", "retained"],
    "prevalence": ["characteristic", *DISEASES],
    "comparison": ["name"],  # model columns appended at run time
    "agreement_diagnosis": [
        "disease", "f1_mean", "f1_std", "sensitivity_mean", "sensitivity_std",
        "specificity_mean", "specificity_std", "selection_mean", "selection_std",
    ],
    "agreement_characteristics": [
        "characteristic", "f1_mean", "f1_std", "kappa_mean", "kappa_std", "sensitivity_mean",
        "specificity_mean", "selection_mean", "loc_f1_mean", "loc_f1_std", "loc_sensitivity_mean",
        "loc_specificity_mean", "loc_images",
    ],
}


def fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "NA" if math.isnan(v) else f"{float(v):.6g}"
    if isinstance(v, (set, frozenset, tuple, list)):
        return ";".join(sorted(str(x) for x in v))
    return str(v)


def render_csv(kind, rows, columns=None, header=None):
    columns = columns or COLUMNS[kind]
    buf = io.StringIO()
    buf.write(f"# dermxkit-{kind} v{CSV_VERSION}\n")
    for key, value in (header or {}).items():
        buf.write(f"# {key}: {value if isinstance(value, str) else canonical_json(value)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(c) for c in columns]
        if len(row) != len(columns):
            raise ValueError(f"{kind} row has {len(row)} fields, expected {len(columns)}")
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, kind, rows, columns=None, header=None):
    atomic_write_bytes(path, render_csv(kind, rows, columns, header).encode())


def read_csv(path):
    """Rows of a report CSV as dicts plus its ``# key: value`` header."""
    header, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            header[key] = value
        else:
            lines.append(line)
    return list(csv.DictReader(lines)), header


def metric_rows(named):
    return [[name, *m.astuple()] for name, m in named.items()]


def summary_rows(rows):
    return [
        [r.name, r.f1.mean, r.f1.std, r.sensitivity.mean, r.sensitivity.std, r.specificity.mean, r.specificity.std,
         r.support]
        for r in rows
    ]


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [_jsonable(v) for v in items]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


# -- run management --------------------------------------------------------------


@dataclass
class RunManifest:
    command: list
    config: dict = field(default_factory=dict)
    dataset_hash: str | None = None
    fold_plan_hash: str | None = None
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""
    inputs: dict = field(default_factory=dict)

    def write(self, out_dir):
        write_json(Path(out_dir) / MANIFEST, asdict(self))

    @classmethod
    def read(cls, out_dir):
        return cls(**json.loads((Path(out_dir) / MANIFEST).read_text()))


def now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class OutputLocked(DermxError, OSError):
    category = "locked"


@contextlib.contextmanager
def output_dir(path, manifest):
    """Create ``path``, hold its lock file and write the manifest on success."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(path / LOCK))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise OutputLocked(f"{path} is being written by another process") from exc
    try:
        manifest.started = manifest.started or now()
        yield path
        manifest.finished = now()
        manifest.write(path)
    finally:
        lock.release()
        with contextlib.suppress(OSError):
            (path / LOCK).unlink()


# -- consolidation ------------------------------------------------------------------


def find_summaries(runs_dir):
    return sorted(Path(runs_dir).rglob("summary.json"))


def _label(summary):
    return summary.get("label") or MODEL_LABELS.get(summary.get("kind"), summary.get("kind", "?"))


def comparison_table(summaries, expert=None, diseases=DISEASES, metric="f1"):
    """Diagnosis comparison: rows diseases + mean, columns model labels (+ Expert).

    Each summary is one evaluated fold. Per-disease cells are mean ± std
    over folds; the mean row summarises the per-fold macro average.
    ``expert`` is an agreement report dict (``diagnosis`` section).
    """
    by_label = {}
    for s in summaries:
        by_label.setdefault(_label(s), []).append(s)
    table = {d: {} for d in [*diseases, "mean"]}
    for label, runs in sorted(by_label.items()):
        for d in diseases:
            vals = [r["diagnosis"].get(d, {}).get(metric) for r in runs]
            table[d][label] = aggregate(np.nan if v is None else v for v in vals)
        macro = []
        for r in runs:
            vals = [r["diagnosis"].get(d, {}).get(metric) for d in diseases]
            macro.append(aggregate(np.nan if v is None else v for v in vals).mean)
        table["mean"][label] = aggregate(macro)
    if expert is not None:
        diag = expert["diagnosis"]
        for d in diseases:
            cell = diag.get(metric, {}).get(d)
            if cell is not None:
                table[d]["Expert"] = _summary_from(cell)
        mean_cell = diag.get(f"mean_{metric}")
        if mean_cell is not None:
            table["mean"]["Expert"] = _summary_from(mean_cell)
    return table


def _summary_from(cell):
    from .metrics import Summary

    mean = cell.get("mean")
    std = cell.get("std")
    return Summary(np.nan if mean is None else mean, np.nan if std is None else std, cell.get("n", 0))


def comparison_rows(table, labels=None):
    labels = labels or _ordered_labels(table)
    rows = []
    for name, cells in table.items():
        row = [name]
        for label in labels:
            s = cells.get(label)
            row += [np.nan, np.nan] if s is None else [s.mean, s.std]
        rows.append(row)
    columns = ["name"] + [f"{label}_{part}" for label in labels for part in ("mean", "std")]
    return columns, rows


def _ordered_labels(table):
    from .plotting import _column_order

    labels = {label for cells in table.values() for label in cells}
    return sorted(labels, key=_column_order)
