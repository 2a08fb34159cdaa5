import csv
import json
import logging
from os.path import isdir
from typing import Any, Dict, List, Optional, Tuple

from flatdict import FlatterDict

from lenie.evalcore.metrics import MetricReport, EvaluationError, METRIC_NAMES, aggregate

logger = logging.getLogger(__name__)

CSV_FIELDS = ["arm", "model", "seed", "fold", "metric", "value"]


def report_stem(arm: str, model: str, seed: int) -> str:
    return f"report-{arm}-{model}-seed{seed}"


class ExperimentReport:
    """
    Cross-validated metrics of one (arm, model, seed) with full configuration echo
    """

    def __init__(self, arm: str, model: str, seed: int,
                 learning_rate: Optional[float],
                 folds: List[MetricReport],
                 config: Optional[Dict[str, Any]] = None,
                 grid: Optional[Dict[str, Optional[float]]] = None,
                 config_hash: Optional[str] = None):
        """
        :param arm: feature source
        :param model: model kind
        :param seed: global seed
        :param learning_rate: selected learning rate, None for topology models
        :param folds: test metrics per fold
        :param config: normalized configuration echo
        :param grid: mean test RMSE per tried learning rate, None for diverged ones
        :param config_hash: hash of configuration that produced report
        """
        self.arm = arm
        self.model = model
        self.seed = seed
        self.learning_rate = learning_rate
        self.folds = folds
        self.config = config if config is not None else {}
        self.grid = grid if grid is not None else {}
        self.config_hash = config_hash
        self.timings: Dict[str, float] = {}
        self.predictions: Dict[int, float] = {}

    @property
    def stem(self) -> str:
        return report_stem(self.arm, self.model, self.seed)

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """
        :return: mean and population std of every metric over folds
        """
        return {metric: aggregate([getattr(fold, metric) for fold in self.folds]) for metric in METRIC_NAMES}

    def as_dict(self) -> Dict[str, Any]:
        return {
            "arm": self.arm,
            "model": self.model,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "config_hash": self.config_hash,
            "config": self.config,
            "grid": self.grid,
            "folds": [fold.as_dict() for fold in self.folds],
            "aggregate": self.aggregate(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentReport":
        try:
            folds = [MetricReport(**fold) for fold in data["folds"]]
            return cls(arm=data["arm"], model=data["model"], seed=data["seed"],
                       learning_rate=data["learning_rate"], folds=folds, config=data.get("config"),
                       grid=data.get("grid"), config_hash=data.get("config_hash"))
        except (KeyError, TypeError) as e:
            raise ReportError("Incorrect experiment report structure") from e

    def csv_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for index, fold in enumerate(self.folds):
            for metric in METRIC_NAMES:
                rows.append({"arm": self.arm, "model": self.model, "seed": self.seed, "fold": index,
                             "metric": metric, "value": getattr(fold, metric)})
        return rows

    def __eq__(self, other):
        return isinstance(other, ExperimentReport) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"ExperimentReport({self.arm}, {self.model}, seed={self.seed})"


def write_report(report: ExperimentReport, directory: str) -> Tuple[str, str]:
    """
    Writes report as pretty JSON, flat CSV (one row per fold and metric) and timings sidecar
    :return: JSON and CSV paths
    :raises ReportError
    """
    if not isdir(directory):
        raise ReportError(f"Issue writing report. Directory '{directory}' doesn't exist")
    json_path = f"{directory}/{report.stem}.json"
    csv_path = f"{directory}/{report.stem}.csv"
    timings_path = f"{directory}/{report.stem}.timings.json"
    logger.info(f"Writing report into '{json_path}'")
    try:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, CSV_FIELDS)
            writer.writeheader()
            writer.writerows(report.csv_rows())
        with open(timings_path, "w", encoding="utf-8") as fh:
            json.dump(report.timings, fh, indent=2, sort_keys=True)
    except OSError as e:
        raise ReportError(f"Issue writing report files for '{report.stem}'") from e
    return json_path, csv_path


def load_report(path: str) -> ExperimentReport:
    """
    :raises ReportError
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return ExperimentReport.from_dict(json.load(fh))
    except (OSError, ValueError) as e:
        raise ReportError(f"Issue reading report '{path}'") from e


def summarize_reports(reports: List[ExperimentReport]) -> List[Dict[str, Any]]:
    """
    Pools fold metrics of reports sharing (arm, model), e.g. over several seeds
    :return: one row per (arm, model) with per-metric mean and std, sorted by arm then model
    """
    pooled: Dict[Tuple[str, str], List[ExperimentReport]] = {}
    for report in reports:
        pooled.setdefault((report.arm, report.model), []).append(report)
    rows = []
    for (arm, model), group in sorted(pooled.items()):
        folds = [fold for report in group for fold in report.folds]
        rows.append({
            "arm": arm,
            "model": model,
            "seeds": sorted(report.seed for report in group),
            "learning_rates": [report.learning_rate for report in sorted(group, key=lambda r: r.seed)],
            "metrics": {metric: aggregate([getattr(fold, metric) for fold in folds]) for metric in METRIC_NAMES},
        })
    return rows


def write_summary(rows: List[Dict[str, Any]], directory: str, name: str) -> Tuple[str, str]:
    """
    Writes summary table as JSON and as CSV of flattened rows
    :raises ReportError
    """
    if not isdir(directory):
        raise ReportError(f"Issue writing summary. Directory '{directory}' doesn't exist")
    json_path = f"{directory}/{name}.json"
    csv_path = f"{directory}/{name}.csv"
    flat_rows = [dict(FlatterDict(row)) for row in rows]
    fieldnames = ["arm", "model"] + sorted({key for row in flat_rows for key in row} - {"arm", "model"})
    logger.info(f"Writing summary of {len(rows)} rows into '{json_path}'")
    try:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames)
            writer.writeheader()
            writer.writerows(flat_rows)
    except OSError as e:
        raise ReportError(f"Issue writing summary '{name}'") from e
    return json_path, csv_path


class ReportError(EvaluationError):
    pass
