"""Evaluation metrics and their CSV/JSON plumbing.

The positive class for detection precision/recall/F1 is "clean": a true
positive is an instance that is both predicted clean and truly clean
(open-set instances are truly noisy by definition).
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import truncation as trunc
from .datagen import Dataset
from .errors import ConfigurationError, DataFormatError

METRICS_HEADER = ("epoch", "ce_loss", "ncl_loss", "det_precision", "det_recall",
                  "det_f1", "n_clean_est", "test_acc", "wall_s")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    ce_loss: float
    ncl_loss: float
    detection_precision: float
    detection_recall: float
    detection_f1: float
    estimated_clean_count: int
    test_accuracy: float
    wall_time_seconds: float


def detection_metrics(split, true_clean_mask: np.ndarray) -> tuple:
    """(precision, recall, F1) of clean-instance detection; 0 on empty denominators."""
    predicted = np.asarray(split.clean_mask, dtype=bool)
    truth = np.asarray(true_clean_mask, dtype=bool)
    tp = int((predicted & truth).sum())
    fp = int((predicted & ~truth).sum())
    fn = int((~predicted & truth).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def intersection_score(proposed, oracle, b: int) -> float:
    """Percentage overlap of two size-b channel selections, averaged over
    categories when lists of selections are given."""
    proposed_sets = _as_selection_list(proposed)
    oracle_sets = _as_selection_list(oracle)
    if len(proposed_sets) != len(oracle_sets):
        raise ConfigurationError("selection lists must pair up one per category")
    scores = []
    for sel_p, sel_o in zip(proposed_sets, oracle_sets):
        if len(sel_p) != b or len(sel_o) != b:
            raise ConfigurationError(f"selections must have size b={b}")
        scores.append(100.0 * len(set(map(int, sel_p)) & set(map(int, sel_o))) / b)
    return float(np.mean(scores))


def _as_selection_list(sel):
    if isinstance(sel, dict):
        return [sel[a] for a in sorted(sel)]
    arr = list(sel)
    if arr and np.isscalar(arr[0]):
        return [arr]
    return arr


@dataclass(frozen=True)
class RankCurve:
    """probabilities[r] = share of categories whose rank-r channel (rank 0 =
    largest category-averaged statistic) lies in that category's oracle top-b."""

    probabilities: np.ndarray
    statistic: str
    b: int


def rank_curve(data: Dataset, true_clean_mask: np.ndarray, statistic: str,
               b: int) -> RankCurve:
    """Statistic-rank vs oracle-membership curve over all categories."""
    if statistic not in ("amplitude", "variance"):
        raise ConfigurationError(f"unknown statistic {statistic!r}")
    mode = "ave" if statistic == "amplitude" else "var"
    d = data.d
    hits = np.zeros(d)
    n_cats = 0
    for a in range(data.K):
        ids = np.flatnonzero(data.noisy_label == a)
        if ids.size == 0:
            continue
        try:
            oracle_top = set(map(int, trunc.oracle_score(data, true_clean_mask, a).top(b)))
        except Exception:
            continue
        phi = np.stack([trunc.instance_score(data.features[i], mode) for i in ids])
        ranking = trunc.rank_channels(phi.mean(axis=0))
        hits += np.fromiter((1.0 if int(ch) in oracle_top else 0.0 for ch in ranking),
                            dtype=np.float64, count=d)
        n_cats += 1
    if n_cats == 0:
        raise ConfigurationError("rank_curve needs at least one category with a defined oracle")
    return RankCurve(probabilities=hits / n_cats, statistic=statistic, b=b)


def rank_slice_experiment(data: Dataset, cfg, slice_mode: str,
                          test_data: Dataset | None = None) -> float:
    """Train with the top / centered-middle / bottom-b channel slice standing
    in for the usual selection; returns the best test accuracy."""
    from . import model  # local import: model depends on this module

    from dataclasses import replace
    if slice_mode not in trunc.SLICE_MODES:
        raise ConfigurationError(f"unknown slice mode {slice_mode!r}")
    run_cfg = replace(cfg, slice_mode=slice_mode, ct_mode="ct")
    d_enc = run_cfg.encoder_dim or data.d
    if run_cfg.encoder == "identity":
        d_enc = data.d
    if 3 * run_cfg.b > d_enc:
        raise ConfigurationError(
            f"b={run_cfg.b} > d/3 makes the top/middle/bottom slices overlap")
    result = model.run(data, run_cfg, test_data=test_data)
    return max(m.test_accuracy for m in result.history)


def write_metrics_header(fh) -> None:
    fh.write(",".join(METRICS_HEADER) + "\n")


def format_metrics_row(m: EpochMetrics, deterministic_wall: bool = False) -> str:
    wall = 0.0 if deterministic_wall else m.wall_time_seconds
    fields = [str(m.epoch), _fmt(m.ce_loss), _fmt(m.ncl_loss),
              _fmt(m.detection_precision), _fmt(m.detection_recall),
              _fmt(m.detection_f1), str(m.estimated_clean_count),
              _fmt(m.test_accuracy), _fmt(wall)]
    return ",".join(fields) + "\n"


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def read_metrics_csv(path) -> list:
    """Parse a metrics.csv back into EpochMetrics rows."""
    rows = []
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_HEADER:
                raise DataFormatError(f"{path}: bad metrics header")
            for rec in reader:
                if len(rec) != len(METRICS_HEADER):
                    raise DataFormatError(f"{path}: malformed metrics row {rec!r}")
                rows.append(EpochMetrics(
                    epoch=int(rec[0]), ce_loss=float(rec[1]), ncl_loss=float(rec[2]),
                    detection_precision=float(rec[3]), detection_recall=float(rec[4]),
                    detection_f1=float(rec[5]), estimated_clean_count=int(rec[6]),
                    test_accuracy=float(rec[7]), wall_time_seconds=float(rec[8])))
    except (ValueError, StopIteration) as exc:
        raise DataFormatError(f"{path}: malformed metrics CSV") from exc
    if not rows:
        raise DataFormatError(f"{path}: metrics CSV has no rows")
    return rows


def summarize(rows) -> dict:
    """Best accuracy / best F1 (with their epochs) and tail means."""
    acc = np.array([m.test_accuracy for m in rows])
    f1 = np.array([m.detection_f1 for m in rows])
    tail = min(5, len(rows))
    best_acc = int(np.argmax(acc))
    best_f1 = int(np.argmax(f1))
    return {
        "epochs": len(rows),
        "best_test_acc": float(acc[best_acc]),
        "best_test_acc_epoch": rows[best_acc].epoch,
        "best_det_f1": float(f1[best_f1]),
        "best_det_f1_epoch": rows[best_f1].epoch,
        "mean_last5_test_acc": float(acc[-tail:].mean()),
        "mean_last5_det_f1": float(f1[-tail:].mean()),
    }
