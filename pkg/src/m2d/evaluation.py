"""Threshold-free and threshold-based detection metrics, reports and grids.

Scores follow the convention "higher means more in-distribution".
Detection accuracy is the balanced form ``max_t 0.5 * (TPR(t) + TNR(t))``
with TPR the fraction of in-distribution scores above ``t`` and TNR the
fraction of OOD scores at or below ``t``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

DETECTION_ACCURACY_DEFINITION = "max over thresholds of 0.5*TPR + 0.5*TNR (balanced priors)"
CSV_COLUMNS = ("dataset_pair", "method", "steps", "taps", "auroc", "det_acc", "threshold", "seed", "wall_ms")


@dataclass
class ScoredSet:
    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        self.in_scores = np.asarray(self.in_scores, dtype=np.float64).reshape(-1)
        self.out_scores = np.asarray(self.out_scores, dtype=np.float64).reshape(-1)
        if self.in_scores.size == 0 or self.out_scores.size == 0:
            raise ValueError("both score lists must be nonempty")
        if not (np.all(np.isfinite(self.in_scores)) and np.all(np.isfinite(self.out_scores))):
            raise ValueError("scores must be finite")


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney estimate of P(in > out), ties counted as one half."""
    n_in, n_out = s.in_scores.size, s.out_scores.size
    ranks = rankdata(np.concatenate([s.in_scores, s.out_scores]), method="average")
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_out))


def _balanced(tp: int, n_in: int, tn: int, n_out: int) -> float:
    return 0.5 * (tp / n_in) + 0.5 * (tn / n_out)


def threshold_candidates(pooled: np.ndarray) -> np.ndarray:
    """-inf, midpoints between adjacent distinct scores, +inf (ascending)."""
    u = np.unique(pooled)
    mids = u[:-1] / 2.0 + u[1:] / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def detection_accuracy(s: ScoredSet) -> tuple[float, float]:
    """Best balanced accuracy and the smallest threshold achieving it."""
    cands = threshold_candidates(np.concatenate([s.in_scores, s.out_scores]))
    ins, outs = np.sort(s.in_scores), np.sort(s.out_scores)
    n_in, n_out = ins.size, outs.size
    tp = n_in - np.searchsorted(ins, cands, side="right")
    tn = np.searchsorted(outs, cands, side="right")
    best, best_t = -1.0, math.inf
    for t, a, b in zip(cands, tp, tn):
        acc = _balanced(int(a), n_in, int(b), n_out)
        if acc > best:
            best, best_t = acc, float(t)
    return best, best_t


@dataclass
class EvalReport:
    dataset_pair: str
    method: str
    auroc: float
    detection_accuracy: float
    threshold: float
    n_in: int
    n_out: int
    steps: int | None = None
    taps: str = ""
    seed: int | None = None
    wall_ms: float | None = None
    error: str | None = None
    detection_accuracy_definition: str = DETECTION_ACCURACY_DEFINITION
    extra: dict = field(default_factory=dict)

    def fingerprint(self) -> dict:
        return {"method": self.method, "steps": self.steps, "taps": self.taps, "seed": self.seed}

    @property
    def ok(self) -> bool:
        return self.error is None


def evaluate(
    scorer: Callable[[np.ndarray], np.ndarray],
    in_data,
    out_data,
    method: str = "",
    dataset_pair: str = "",
    steps: int | None = None,
    taps: str = "",
    seed: int | None = None,
) -> EvalReport:
    """Score both test sets with ``scorer`` and compute both metrics."""
    t0 = time.perf_counter()
    s = ScoredSet(scorer(in_data), scorer(out_data))
    a = auroc(s)
    acc, thr = detection_accuracy(s)
    wall = (time.perf_counter() - t0) * 1000.0
    logger.info("event=evaluate method=%s pair=%s auroc=%.6f det_acc=%.6f", method, dataset_pair, a, acc)
    return EvalReport(dataset_pair, method, a, acc, thr, s.in_scores.size, s.out_scores.size, steps, taps, seed, wall)


@dataclass
class GridCell:
    """One configuration of an ablation grid; ``run`` returns an EvalReport."""

    dataset_pair: str
    method: str
    run: Callable[[], EvalReport]
    steps: int | None = None
    taps: str = ""
    seed: int | None = None

    @property
    def key(self) -> tuple:
        return (self.dataset_pair, self.method, -1 if self.steps is None else self.steps, self.taps)


def ablation_grid(cells: Sequence[GridCell], workers: int = 1) -> list[EvalReport]:
    """Run every cell; a failing cell becomes an error report and the grid goes on.

    Results come back in input order regardless of ``workers``.
    """

    def run_one(cell: GridCell) -> EvalReport:
        try:
            return cell.run()
        except Exception as exc:  # recorded per cell
            logger.warning("event=cell_failed method=%s error=%r", cell.method, exc)
            return EvalReport(
                cell.dataset_pair, cell.method, math.nan, math.nan, math.nan, 0, 0,
                cell.steps, cell.taps, cell.seed, error=f"{type(exc).__name__}: {exc}",
            )

    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, cells))
    else:
        results = [run_one(c) for c in cells]
    return results


# ---------------------------------------------------------------------------
# report files


def column_label(method: str, steps: int | None, n_taps: int) -> str:
    layer = f"{n_taps} Layer"
    if method == "m2d":
        return f"{layer}, {steps} step"
    if method == "m2d-no-retrain":
        return f"{layer} Mahalanobis"
    if method == "vanilla-ae":
        return f"Vanilla AE {steps} steps"
    if method == "msp":
        return "Tau-Softmax"
    if method == "odin":
        return "ODIN"
    return method


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return repr(float(x))


def _row(r: EvalReport, timing: bool) -> list[str]:
    return [
        r.dataset_pair,
        r.method,
        "" if r.steps is None else str(r.steps),
        r.taps,
        _fmt(r.auroc),
        _fmt(r.detection_accuracy),
        _fmt(r.threshold),
        "" if r.seed is None else str(r.seed),
        _fmt(r.wall_ms) if timing else "",
    ]


def reports_to_csv(reports: Sequence[EvalReport], timing: bool = False) -> str:
    """Long-format CSV, one row per cell, columns :data:`CSV_COLUMNS`.

    Wall-clock is left blank unless ``timing`` is set, so that re-runs of the
    same configuration produce identical bytes.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(_row(r, timing))
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport], timing: bool = False) -> str:
    rows = []
    for r in reports:
        d = {k: v for k, v in zip(CSV_COLUMNS, _row(r, timing))}
        d.update(auroc=_num(r.auroc), det_acc=_num(r.detection_accuracy), threshold=_num(r.threshold))
        d["steps"] = r.steps
        d["seed"] = r.seed
        d["wall_ms"] = r.wall_ms if timing else None
        d["n_in"], d["n_out"] = r.n_in, r.n_out
        d["error"] = r.error
        d["detection_accuracy_definition"] = r.detection_accuracy_definition
        rows.append(d)
    return json.dumps({"columns": list(CSV_COLUMNS), "rows": rows}, indent=2, sort_keys=False) + "\n"


def _num(x: float) -> float | str | None:
    if x is None:
        return None
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _split_pair(pair: str) -> tuple[str, str]:
    """``"in/out"`` -> ``("in", "out")``; a pair without a slash keeps an empty OOD name."""
    left, _, right = pair.partition("/")
    return left, right


def table(reports: Sequence[EvalReport]) -> tuple[list[str], list[list[str]]]:
    """Wide table: rows = (pretraining, OOD) pair, columns = configuration, cells = "AUROC/DetAcc" in percent."""
    columns: list[str] = []
    rows: dict[str, dict[str, str]] = {}
    for r in reports:
        ntap = len(r.taps.split("+")) if r.taps else 1
        col = column_label(r.method, r.steps, ntap)
        if col not in columns:
            columns.append(col)
        cell = "error" if not r.ok else f"{100 * r.auroc:.2f}/{100 * r.detection_accuracy:.2f}"
        rows.setdefault(r.dataset_pair, {})[col] = cell
    header = ["Pretraining", "OOD"] + columns
    body = [list(_split_pair(pair)) + [rows[pair].get(c, "") for c in columns] for pair in rows]
    return header, body


def table_to_csv(reports: Sequence[EvalReport]) -> str:
    header, body = table(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()
