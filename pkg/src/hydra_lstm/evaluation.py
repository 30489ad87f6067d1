"""Per-date prediction tables and the reports derived from them.

Every number in a report is a function of the prediction table alone, which
is what lets ``report`` recompute and cross-check results from the CSV.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .objectives import (
    UndefinedScoreError,
    crossing_fraction,
    cumulative_quantile_loss,
    empirical_coverage,
)

PREDICTION_COLUMNS = [
    "catchment_id",
    "date",
    "q10",
    "q50",
    "q90",
    "observed",
    "clim_q10",
    "clim_q50",
    "clim_q90",
    "label",
    "fold",
]

# Rows of the two comparison tables: (setting, label)
WITHOUT_DISCHARGE = ("multi_catchment_no_q", "flag_ungauged", "hydra_multi_head")
WITH_DISCHARGE = ("single_catchment", "multi_catchment_with_q", "flag_gauged", "hydra_single_head")


def _losses(frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    obs = frame["observed"].to_numpy()
    model = cumulative_quantile_loss(obs, frame[["q10", "q50", "q90"]].to_numpy())
    clim = cumulative_quantile_loss(obs, frame[["clim_q10", "clim_q50", "clim_q90"]].to_numpy())
    return np.atleast_1d(model), np.atleast_1d(clim)


def _score(frame: pd.DataFrame) -> dict:
    l_model, l_clim = _losses(frame)
    obs = frame["observed"].to_numpy()
    mean_model, mean_clim = float(np.mean(l_model)), float(np.mean(l_clim))
    return {
        "n": int(len(frame)),
        "loss": mean_model,
        "climatology_loss": mean_clim,
        "cqes": None if mean_clim == 0.0 else 1.0 - mean_model / mean_clim,
        "coverage_q10": empirical_coverage(obs, frame["q10"].to_numpy()),
        "coverage_q90": empirical_coverage(obs, frame["q90"].to_numpy()),
        "crossing_fraction": crossing_fraction(frame[["q10", "q50", "q90"]].to_numpy()),
    }


@dataclass
class EvaluationReport:
    label: str
    records: list[dict]
    aggregate: dict
    undefined: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "aggregate": self.aggregate,
            "records": self.records,
            "undefined": self.undefined,
        }

    def cqes_values(self) -> list[float]:
        return sorted(r["cqes"] for r in self.records if r["cqes"] is not None)


def evaluate_frame(frame: pd.DataFrame, label: str) -> EvaluationReport:
    """Catchment-year scores and pooled aggregates for one model label.

    The pooled ``cqes`` is 1 - mean(L_tot)/mean(L_clim) over every row;
    ``cqes_mean`` averages the catchment-year scores. Catchment-years whose
    climatology loss is zero are listed under ``undefined``.
    """
    if frame.empty:
        raise ValueError(f"no predictions for {label!r}")
    frame = frame.assign(year=pd.to_datetime(frame["date"]).dt.year)
    records, undefined = [], []
    for (cid, year), part in frame.groupby(["catchment_id", "year"], sort=True):
        rec = {"catchment_id": str(cid), "year": int(year), **_score(part)}
        if rec["cqes"] is None:
            undefined.append({"catchment_id": str(cid), "year": int(year)})
        records.append(rec)
    aggregate = _score(frame)
    if aggregate["cqes"] is None:
        raise UndefinedScoreError(f"{label}: climatology loss is zero over the whole table")
    defined = [r["cqes"] for r in records if r["cqes"] is not None]
    aggregate["cqes_mean"] = float(np.mean(defined)) if defined else None
    aggregate["cqes_median"] = float(np.median(defined)) if defined else None
    aggregate["catchment_years"] = len(records)
    return EvaluationReport(label, records, aggregate, undefined)


def evaluate_predictions(frame: pd.DataFrame) -> dict[str, EvaluationReport]:
    return {
        str(label): evaluate_frame(part, str(label))
        for label, part in frame.groupby("label", sort=True)
    }


def write_predictions(frame: pd.DataFrame, path: str | Path) -> None:
    frame = frame[PREDICTION_COLUMNS].sort_values(["label", "catchment_id", "date"], kind="stable")
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_predictions(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"catchment_id": str, "label": str, "date": str}, float_precision="round_trip")
    missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path}: prediction table lacks columns {missing}")
    return frame


def dump_json(doc, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def comparison_table(reports: dict[str, EvaluationReport]) -> pd.DataFrame:
    """Tables 4/5-shaped rows: one per model label present."""
    rows = []
    for setting, labels in (("without_discharge", WITHOUT_DISCHARGE), ("with_discharge", WITH_DISCHARGE)):
        for label in labels:
            if label in reports:
                rows.append(_row(setting, reports[label]))
    known = set(WITHOUT_DISCHARGE + WITH_DISCHARGE)
    for label in sorted(set(reports) - known):
        rows.append(_row("other", reports[label]))
    return pd.DataFrame(
        rows,
        columns=["setting", "model", "cqes", "cqes_mean", "coverage_q10", "coverage_q90", "n"],
    )


def _row(setting: str, report: EvaluationReport) -> dict:
    agg = report.aggregate
    return {
        "setting": setting,
        "model": report.label,
        "cqes": agg["cqes"],
        "cqes_mean": agg["cqes_mean"],
        "coverage_q10": agg["coverage_q10"],
        "coverage_q90": agg["coverage_q90"],
        "n": agg["n"],
    }


def cdf_table(reports: dict[str, EvaluationReport]) -> pd.DataFrame:
    rows = []
    for label in sorted(reports):
        values = reports[label].cqes_values()
        n = len(values)
        for k, v in enumerate(values):
            rows.append({"model": label, "cqes": v, "cumulative_fraction": (k + 1) / n})
    return pd.DataFrame(rows, columns=["model", "cqes", "cumulative_fraction"])
