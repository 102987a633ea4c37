"""
Newline-delimited JSON metrics and their summaries.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Union

import polars as pl
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class MetricsSink:
    """Append-only writer of one JSON record per line."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self._fh = None
        self.records = 0
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")

    def write(self, record: BaseModel) -> None:
        self.records += 1
        if self._fh is not None:
            self._fh.write(record.model_dump_json() + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            logger.info(f"wrote {self.records} metrics records to {self.path}")

    def __enter__(self) -> "MetricsSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_metrics(path: Union[str, Path]) -> pl.DataFrame:
    try:
        return pl.read_ndjson(path)
    except Exception as e:
        logger.error(f"Error reading metrics file {path}: {e}")
        raise


def summarize_metrics(metrics: Union[str, Path, pl.DataFrame]) -> pl.DataFrame:
    """
    Per-dataset step counts, share of steps and mean losses.

    Args:
        metrics: A metrics file path or an already loaded frame

    Returns:
        DataFrame: one row per dataset_id, sorted by id
    """
    df = metrics if isinstance(metrics, pl.DataFrame) else load_metrics(metrics)
    total = df.height
    return (
        df.group_by("dataset_id")
        .agg(
            pl.len().alias("steps"),
            pl.col("task_loss").mean().alias("mean_task_loss"),
            pl.col("mi_loss").mean().alias("mean_mi_loss"),
            pl.col("clipped_norm").max().alias("max_clipped_norm"),
        )
        .with_columns((pl.col("steps") / total).alias("share"))
        .sort("dataset_id")
    )
