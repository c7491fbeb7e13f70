"""Session accuracies, experiment summaries and the results tables built from them."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Dict, Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from data_sources import LabeledDataset, LabeledSample
from model import extract_features_batch, predict_labels

if TYPE_CHECKING:
    from protocol import TrainedState

OutputFormat = Literal["text", "csv", "json"]
TableLayout = Literal["results", "sessions", "metrics"]
FORMATS: tuple[str, ...] = ("text", "csv", "json")
LAYOUTS: tuple[str, ...] = ("results", "sessions", "metrics")

METRIC_COLUMNS = ["base", "old", "new", "avg", "pd", "harmonic"]
CSV_FLOAT_FORMAT = "%.17g"
TOLERANCE = 1e-9


class MetricsError(ValueError):
    """Raised when reports cannot be computed, summarized or tabulated."""


def _check_fraction(name: str, value: Optional[float]) -> None:
    if value is None:
        return
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise MetricsError(f"{name} must be a fraction in [0, 1], got {value}")


@dataclass(frozen=True)
class SessionReport:
    """Accuracies measured after one session on every class seen so far."""

    session_index: int
    acc_overall: float
    acc_base_classes: Optional[float]
    acc_new_classes: Optional[float] = None
    per_class_acc: Mapping[int, float] = field(default_factory=dict)
    per_class_count: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("acc_overall", "acc_base_classes", "acc_new_classes"):
            _check_fraction(name, getattr(self, name))
        for class_id, value in self.per_class_acc.items():
            _check_fraction(f"per_class_acc[{class_id}]", value)
        if self.per_class_count:
            total = sum(self.per_class_count.values())
            weighted = sum(self.per_class_acc[c] * n for c, n in self.per_class_count.items()) / total
            if abs(weighted - self.acc_overall) > TOLERANCE:
                raise MetricsError(
                    f"overall accuracy {self.acc_overall} disagrees with per-class accuracies ({weighted})"
                )


@dataclass(frozen=True)
class ExperimentSummary:
    base: float
    avg: float
    sessions: tuple[float, ...]
    old: Optional[float] = None
    new: Optional[float] = None
    pd: Optional[float] = None
    harmonic: Optional[float] = None
    final_improv: Optional[float] = None

    @property
    def final(self) -> float:
        return self.sessions[-1]


def _as_dataset(test_union: LabeledDataset | Sequence[LabeledSample], input_dim: int) -> LabeledDataset:
    if isinstance(test_union, LabeledDataset):
        return test_union
    return LabeledDataset.from_samples(test_union, input_dim, "test")


def evaluate(state: "TrainedState", test_union: LabeledDataset | Sequence[LabeledSample]) -> SessionReport:
    """Score ``state`` on every test sample of the classes seen so far."""

    data = _as_dataset(test_union, state.extractor.input_dim)
    if len(data) == 0:
        raise MetricsError("no test samples to evaluate")
    known = set(state.classifier.class_ids)
    unseen = sorted(data.label_set - known)
    if unseen:
        raise MetricsError(f"test labels {unseen} are unknown to the classifier")

    predictions = predict_labels(state.classifier, extract_features_batch(state.extractor, data.inputs))
    correct = predictions == data.labels
    per_class_acc: Dict[int, float] = {}
    per_class_count: Dict[int, int] = {}
    for class_id in sorted(data.label_set):
        rows = data.labels == class_id
        per_class_count[class_id] = int(rows.sum())
        per_class_acc[class_id] = float(correct[rows].mean())

    base_rows = np.isin(data.labels, np.asarray(state.base_class_ids, dtype=np.int64))
    acc_base = float(correct[base_rows].mean()) if base_rows.any() else None
    acc_new = None
    if state.session_index >= 1 and (~base_rows).any():
        acc_new = float(correct[~base_rows].mean())
    return SessionReport(
        session_index=state.session_index,
        acc_overall=float(correct.mean()),
        acc_base_classes=acc_base,
        acc_new_classes=acc_new,
        per_class_acc=per_class_acc,
        per_class_count=per_class_count,
    )


def harmonic(old: float, new: float) -> float:
    """Harmonic mean of old-class and new-class accuracy; 0 when both are 0."""

    total = old + new
    return 2.0 * old * new / total if total > 0 else 0.0


def final_improvement(ours_final: float, baseline_final: float) -> float:
    _check_fraction("ours_final", ours_final)
    _check_fraction("baseline_final", baseline_final)
    return ours_final - baseline_final


def summarize(reports: Sequence[SessionReport], baseline_final: Optional[float] = None) -> ExperimentSummary:
    if not reports:
        raise MetricsError("cannot summarize an empty report list")
    indices = [r.session_index for r in reports]
    if indices != list(range(len(reports))):
        raise MetricsError(f"reports must be ordered by session starting at 0, got {indices}")

    sessions = tuple(r.acc_overall for r in reports)
    base = reports[0].acc_overall
    summary = ExperimentSummary(
        base=base,
        avg=float(np.mean(sessions)),
        sessions=sessions,
        final_improv=None if baseline_final is None else final_improvement(sessions[-1], baseline_final),
    )
    final = reports[-1]
    if len(reports) == 1 or final.acc_new_classes is None or final.acc_base_classes is None:
        return summary
    old, new = final.acc_base_classes, final.acc_new_classes
    return replace(summary, old=old, new=new, pd=base - old, harmonic=harmonic(old, new))


# ---------------------------------------------------------------------------
# Results tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    method: str
    seed: int
    summary: ExperimentSummary

    def record(self) -> Dict[str, Any]:
        s = self.summary
        record: Dict[str, Any] = {"method": self.method, "seed": self.seed}
        record.update({f"session_{i}": value for i, value in enumerate(s.sessions)})
        record.update(
            {
                "avg": s.avg,
                "final_improv": s.final_improv,
                "base": s.base,
                "old": s.old,
                "new": s.new,
                "pd": s.pd,
                "harmonic": s.harmonic,
            }
        )
        return record


def result_rows(
    runs: Iterable[tuple[str, int, Sequence[SessionReport]]],
    baseline_method: Optional[str] = None,
) -> list[ResultRow]:
    """Summaries for ``(method, seed, reports)`` triples.

    With ``baseline_method`` the final improvement of every row is measured
    against that method's final accuracy for the same seed.
    """

    runs = list(runs)
    baselines: Dict[int, float] = {}
    if baseline_method is not None:
        baselines = {seed: reports[-1].acc_overall for method, seed, reports in runs if method == baseline_method}
        if not baselines:
            raise MetricsError(f"baseline method {baseline_method!r} has no runs")
    return [ResultRow(method, seed, summarize(reports, baselines.get(seed))) for method, seed, reports in runs]


def results_frame(rows: Sequence[ResultRow], layout: TableLayout = "results") -> pd.DataFrame:
    if not rows:
        raise MetricsError("no result rows to tabulate")
    lengths = {len(r.summary.sessions) for r in rows}
    if len(lengths) != 1:
        raise MetricsError(f"rows cover different session counts: {sorted(lengths)}")
    n_sessions = lengths.pop()
    frame = pd.DataFrame([r.record() for r in rows])
    session_columns = [f"session_{i}" for i in range(n_sessions)]
    if layout == "results":
        return frame[["method", "seed", *session_columns, "avg", "final_improv", "base", "old", "new", "pd", "harmonic"]]
    if layout == "sessions":
        return frame.set_index("method")[[*session_columns, "avg", "final_improv"]]
    if layout == "metrics":
        return frame.set_index("method")[METRIC_COLUMNS]
    raise MetricsError(f"Unsupported table layout: {layout}")


def _percent(value: Any, signed: bool = False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value * 100:+.2f}" if signed else f"{value * 100:.2f}"


def _signed_percent(value: Any) -> str:
    return _percent(value, signed=True)


def _render_text(frame: pd.DataFrame) -> str:
    formatters = {
        column: _signed_percent if column == "final_improv" else _percent
        for column in frame.columns
        if column not in ("method", "seed")
    }
    return frame.to_string(formatters=formatters, na_rep="-") + "\n"


def _native(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def _render_json(frame: pd.DataFrame, rows: Sequence[ResultRow]) -> str:
    nested: Dict[str, Dict[str, Dict[str, Any]]] = {}
    for row, record in zip(rows, frame.to_dict(orient="records")):
        values = {key: _native(value) for key, value in record.items() if key not in ("method", "seed")}
        nested.setdefault(row.method, {})[str(row.seed)] = values
    return json.dumps(nested, indent=2) + "\n"


def emit_table(
    rows: Sequence[ResultRow],
    fmt: OutputFormat = "text",
    layout: TableLayout = "results",
) -> str:
    """Render ``rows``; text shows percentages to two decimals, csv and json keep full precision."""

    frame = results_frame(rows, layout)
    if fmt == "text":
        return _render_text(frame)
    if fmt == "csv":
        flat = frame if layout == "results" else frame.reset_index()
        return flat.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    if fmt == "json":
        return _render_json(frame, rows)
    raise MetricsError(f"Unsupported output format: {fmt}")


def emit_grid(
    values: np.ndarray,
    row_values: Sequence[float],
    column_values: Sequence[float],
    *,
    row_name: str = "gamma",
    column_name: str = "alpha",
    fmt: OutputFormat = "text",
) -> str:
    """Render a 2-D accuracy grid such as the (gamma, alpha) sweep."""

    grid = np.asarray(values, dtype=np.float64)
    if grid.shape != (len(row_values), len(column_values)):
        raise MetricsError(f"grid shape {grid.shape} does not match {len(row_values)}x{len(column_values)} labels")
    if fmt == "json":
        nested = {
            f"{row_name}={float(r)!r}": {
                f"{column_name}={float(c)!r}": float(grid[i, j]) for j, c in enumerate(column_values)
            }
            for i, r in enumerate(row_values)
        }
        return json.dumps(nested, indent=2) + "\n"
    frame = pd.DataFrame(
        grid,
        index=pd.Index([float(r) for r in row_values], name=row_name),
        columns=[f"{column_name}={float(c)!r}" for c in column_values],
    )
    if fmt == "text":
        return frame.to_string(float_format=lambda v: f"{v * 100:.2f}") + "\n"
    if fmt == "csv":
        return frame.to_csv(float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    raise MetricsError(f"Unsupported output format: {fmt}")


def read_results_csv(source: str | io.StringIO) -> pd.DataFrame:
    """Parse a results csv back without losing float precision."""

    return pd.read_csv(source, float_precision="round_trip")


__all__ = [
    "ExperimentSummary",
    "FORMATS",
    "LAYOUTS",
    "METRIC_COLUMNS",
    "MetricsError",
    "ResultRow",
    "SessionReport",
    "emit_grid",
    "emit_table",
    "evaluate",
    "final_improvement",
    "harmonic",
    "read_results_csv",
    "result_rows",
    "results_frame",
    "summarize",
]
