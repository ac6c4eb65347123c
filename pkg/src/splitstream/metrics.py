"""Per-epoch logs, CSV/JSON reports, accuracy and the distance-correlation probe."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

__all__ = [
    "EpochRecord",
    "MetricsLog",
    "PrivacyScore",
    "distance_correlation",
    "evaluate_accuracy",
    "write_reports",
    "read_csv",
    "reduction_report",
    "CSV_COLUMNS",
]


@dataclass
class EpochRecord:
    epoch: int
    state: str
    avg_loss: float
    test_accuracy: float
    payload_up: int
    payload_down: int
    header_bytes: int
    handoff_bytes: int
    client_updates: int
    flop_proxy: int
    act_fp8_format: str = ""
    grad_fp8_format: str = ""
    label_bytes: int = 0
    payload_up_raw: int = 0
    payload_down_raw: int = 0
    client_forward: int = 0
    client_backward: int = 0
    delta_loss: float = math.nan
    next_state: str = ""

    @property
    def payload(self) -> int:
        return self.payload_up + self.payload_down

    @property
    def total_bytes(self) -> int:
        """Every ledgered byte except model handoffs."""
        return self.payload + self.label_bytes + self.header_bytes


CSV_COLUMNS = [f.name for f in fields(EpochRecord)]
_INT_COLS = {f.name for f in fields(EpochRecord) if f.type in ("int", int)}
_FLOAT_COLS = {f.name for f in fields(EpochRecord) if f.type in ("float", float)}


@dataclass
class MetricsLog:
    records: list[EpochRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def total(self, name: str) -> int | float:
        return sum(getattr(r, name) for r in self.records)

    @property
    def payload_bytes(self) -> int:
        return self.total("payload")

    @property
    def states(self) -> list[str]:
        return [r.state for r in self.records]

    @property
    def update_epochs(self) -> int:
        """Epochs in which the client model trained (state A)."""
        return self.states.count("A")

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy if self.records else math.nan

    def summary(self) -> dict:
        return {
            "epochs": len(self.records),
            "final_accuracy": self.final_accuracy,
            "final_loss": self.records[-1].avg_loss if self.records else math.nan,
            "update_epochs": self.update_epochs,
            "payload_bytes": self.payload_bytes,
            "label_bytes": self.total("label_bytes"),
            "header_bytes": self.total("header_bytes"),
            "handoff_bytes": self.total("handoff_bytes"),
            "client_flop_proxy": self.total("flop_proxy"),
            "client_updates": self.total("client_updates"),
        }


@dataclass(frozen=True)
class PrivacyScore:
    score: float
    sample_size: int


def _double_centered(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def _pairwise(a: np.ndarray) -> np.ndarray:
    return squareform(pdist(a, "euclidean"))


def distance_correlation(x, z) -> PrivacyScore:
    """Empirical distance correlation between paired samples.

    ``x`` and ``z`` are flattened per sample (first axis). The result lies in
    [0, 1]; it is 0 when either side has zero distance variance.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
    if x.shape[0] != z.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {z.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    a = _double_centered(_pairwise(x))
    b = _double_centered(_pairwise(z))
    dcov2 = (a * b).mean()
    var = (a * a).mean() * (b * b).mean()
    if var <= 0:
        return PrivacyScore(0.0, x.shape[0])
    r2 = max(dcov2, 0.0) / math.sqrt(var)
    return PrivacyScore(float(min(math.sqrt(r2), 1.0)), x.shape[0])


def evaluate_accuracy(model, x, y, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    n = len(y)
    if n == 0:
        raise ValueError("empty test set")
    correct = 0
    for i in range(0, n, batch_size):
        logits = model.predict(x[i:i + batch_size])
        correct += int(np.count_nonzero(logits.argmax(axis=1) == np.asarray(y[i:i + batch_size])))
    return correct / n


def _ratio(num, den):
    if den == 0:
        return (math.inf if num else 1.0), True
    return num / den, False


def reduction_report(baseline: MetricsLog, treated: MetricsLog) -> dict:
    """Communication and client-computation reduction of ``treated``.

    ``communication`` uses tensor payload bytes only; ``communication_total``
    also counts labels and frame headers. Handoff bytes are excluded from both.
    A zero denominator yields ``inf`` and sets the matching ``*_infinite`` flag.
    """
    comm, comm_inf = _ratio(baseline.payload_bytes, treated.payload_bytes)
    total, total_inf = _ratio(
        baseline.total("total_bytes"), treated.total("total_bytes"))
    comp, comp_inf = _ratio(baseline.total("flop_proxy"), treated.total("flop_proxy"))
    return {
        "communication": comm,
        "communication_infinite": comm_inf,
        "communication_total": total,
        "communication_total_infinite": total_inf,
        "computation": comp,
        "computation_infinite": comp_inf,
        "accuracy_delta": treated.final_accuracy - baseline.final_accuracy,
        "update_epochs": treated.update_epochs,
        "baseline_update_epochs": baseline.update_epochs,
    }


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(log: MetricsLog, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in log.records:
            w.writerow([_fmt(getattr(rec, c)) for c in CSV_COLUMNS])
    return path


def read_csv(path) -> MetricsLog:
    log = MetricsLog()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            kw = {}
            for k, v in row.items():
                if k in _INT_COLS:
                    kw[k] = int(v)
                elif k in _FLOAT_COLS:
                    kw[k] = float(v)
                else:
                    kw[k] = v
            log.append(EpochRecord(**kw))
    return log


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if dataclasses.is_dataclass(obj):
        return _json_safe(dataclasses.asdict(obj))
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_reports(log: MetricsLog, directory, baseline: MetricsLog | None = None,
                  baseline_name: str = "baseline", extra: dict | None = None) -> dict:
    """Write ``metrics.csv`` and ``summary.json`` into ``directory``.

    When ``baseline`` is given the summary carries the reduction ratios of
    ``log`` against it.
    """
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    csv_path = write_csv(log, directory / "metrics.csv")
    summary = dict(log.summary())
    summary.update(log.meta)
    if baseline is not None:
        summary["baseline"] = baseline_name
        summary["reduction"] = reduction_report(baseline, log)
    if extra:
        summary.update(extra)
    json_path = write_json(summary, directory / "summary.json")
    return {"csv": csv_path, "summary": json_path, "data": summary}
