"""Rejection-count and specificity tables, text rendering and null ECDF export."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Sequence, Union

import numpy as np
import pandas as pd

from .ccm_stats import ConfusionCounts, CouplingTestResult, specificity
from .errors import EmptyRecords
from .experiment_service import ResultRecord

logger = logging.getLogger(__name__)

REJECTIONS_FILE = "rejections.csv"
SPECIFICITY_FILE = "specificity.csv"
SUMMARY_FILE = "summary.txt"
ECDF_COLUMNS = ["k", "ecdf", "is_observed"]
GROUP_KEYS = ["coupling", "group", "mode"]


@dataclass(frozen=True, eq=False)
class Summary:
    rejections: pd.DataFrame
    specificity: pd.DataFrame
    pooled: pd.DataFrame

    def rejection_count(self, coupling: str, group: str, mode: str) -> int:
        row = self.rejections[
            (self.rejections["coupling"] == coupling)
            & (self.rejections["group"] == group)
            & (self.rejections["mode"] == mode)
        ]
        return int(row["rejections"].sum())

    def pooled_specificity(self, mode: str) -> float:
        row = self.pooled[self.pooled["mode"] == mode]
        return float(row["specificity"].iloc[0])


def records_frame(records: Iterable[ResultRecord]) -> pd.DataFrame:
    rows = [
        {
            "coupling": r.coupling,
            "group": r.group,
            "mode": r.mode,
            "reject": bool(r.reject),
            "is_null": r.is_null,
        }
        for r in records
    ]
    if not rows:
        raise EmptyRecords("no result records to summarize")
    return pd.DataFrame(rows)


def _specificity_of(frame: pd.DataFrame) -> float:
    counts = ConfusionCounts(int((~frame["reject"]).sum()), int(frame["reject"].sum()))
    return specificity(counts)


def summarize(records: Iterable[ResultRecord]) -> Summary:
    """Rejections per (coupling, group, mode) and specificity over the true-null tests."""
    frame = records_frame(records)
    rejections = (
        frame.groupby(GROUP_KEYS, sort=True)["reject"]
        .agg(rejections="sum", tests="count")
        .reset_index()
        .astype({"rejections": int, "tests": int})
    )

    nulls = frame[frame["is_null"].astype(object).eq(True)]
    spec_rows = [
        {"coupling": c, "group": g, "mode": m, "tests": len(cell), "specificity": _specificity_of(cell)}
        for (c, g, m), cell in nulls.groupby(GROUP_KEYS, sort=True)
    ]
    pooled_rows = [
        {"mode": m, "tests": len(cell), "specificity": _specificity_of(cell)}
        for m, cell in nulls.groupby("mode", sort=True)
    ]
    return Summary(
        rejections,
        pd.DataFrame(spec_rows, columns=GROUP_KEYS + ["tests", "specificity"]),
        pd.DataFrame(pooled_rows, columns=["mode", "tests", "specificity"]),
    )


def rejection_table(summary: Summary) -> pd.DataFrame:
    """Wide layout: one row per coupling, one column per (mode, group)."""
    return summary.rejections.pivot_table(
        index="coupling", columns=["mode", "group"], values="rejections", aggfunc="sum", fill_value=0
    )


def format_summary_table(summary: Summary) -> str:
    blocks = [
        "Rejected H0 per coupling and direction",
        rejection_table(summary).to_string(),
        "",
        "Specificity over true-null tests",
        summary.specificity.to_string(index=False, float_format=lambda v: f"{v:.4f}")
        if not summary.specificity.empty
        else "(no true-null tests)",
        "",
        "Pooled specificity",
        summary.pooled.to_string(index=False, float_format=lambda v: f"{v:.4f}")
        if not summary.pooled.empty
        else "(no true-null tests)",
    ]
    return "\n".join(blocks) + "\n"


def save_summary(summary: Summary, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "rejections": out_dir / REJECTIONS_FILE,
        "specificity": out_dir / SPECIFICITY_FILE,
        "summary": out_dir / SUMMARY_FILE,
    }
    summary.rejections.to_csv(paths["rejections"], index=False)
    summary.specificity.to_csv(paths["specificity"], index=False, float_format="%.6f")
    paths["summary"].write_text(format_summary_table(summary), encoding="utf-8")
    logger.info(f"Summary tables written to {out_dir}")
    return paths


def ecdf_frame(k_observed: float, null_samples: Sequence[float]) -> pd.DataFrame:
    null = np.sort(np.asarray(null_samples, dtype=np.float64))
    if null.size == 0:
        raise ValueError("an ECDF needs at least one null sample")
    n = null.size
    rows = pd.DataFrame({"k": null, "ecdf": np.arange(1, n + 1) / n, "is_observed": False})
    observed = pd.DataFrame(
        {"k": [float(k_observed)], "ecdf": [np.count_nonzero(null <= k_observed) / n], "is_observed": [True]}
    )
    frame = pd.concat([rows, observed], ignore_index=True)
    return frame.sort_values("k", kind="mergesort").reset_index(drop=True)[ECDF_COLUMNS]


def emit_ecdf(result: Union[ResultRecord, CouplingTestResult], path: Union[str, Path]) -> Path:
    """CSV of the null ECDF (k, ecdf) with the observed statistic as a marked row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ecdf_frame(result.k_observed, result.null_samples).to_csv(path, index=False)
    return path


def select_record(
    records: Iterable[ResultRecord], direction: str, mode: str, coupling: str = None, realization: int = 0
) -> ResultRecord:
    for record in records:
        if (
            record.direction == direction
            and record.mode == mode
            and record.realization == realization
            and (coupling is None or record.coupling == coupling)
        ):
            return record
    raise LookupError(f"no record for {direction} ({mode}), coupling {coupling}, realization {realization}")
