"""Aggregate per-seed metrics into per-cycle mean and standard error."""

import os
from glob import glob
from typing import List, Sequence

import hydra
import numpy as np
import pandas as pd
from omegaconf import DictConfig

from activeda.cli import with_exit_codes
from activeda.data import FLOAT_FORMAT
from activeda.error import InvalidInputError
from activeda.logging import REPORT_LOG

METRICS = ("test_accuracy", "val_accuracy")


def expand_runs(runs: Sequence[str]) -> List[str]:
    """A run directory holds metrics.csv; a root holds seed_* run directories."""
    dirs = []
    for run in runs:
        if os.path.isfile(os.path.join(run, "metrics.csv")):
            dirs.append(run)
            continue
        seeds = sorted(
            d for d in glob(os.path.join(run, "seed_*"))
            if os.path.isfile(os.path.join(d, "metrics.csv"))
        )
        if not seeds:
            raise InvalidInputError(f"no metrics.csv under {run}")
        dirs.extend(seeds)
    return dirs


def aggregate(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Per-cycle mean and SE = sd / sqrt(n) across runs; n = 1 gives SE 0."""
    if not frames:
        raise InvalidInputError("report needs at least one run")
    lengths = sorted({len(f) for f in frames})
    if len(lengths) > 1:
        raise InvalidInputError(f"mismatched cycle counts across runs: {lengths}")

    merged = pd.concat(frames, keys=range(len(frames)), names=["run"]).reset_index(level=0)
    grouped = merged.groupby("cycle", sort=True)
    n_runs = len(frames)
    summary = pd.DataFrame({"cycle": sorted(merged["cycle"].unique())})
    summary["n_runs"] = n_runs
    summary["n_labeled"] = grouped["n_labeled"].mean().to_numpy()
    for metric in METRICS:
        summary[f"{metric}_mean"] = grouped[metric].mean().to_numpy()
        if n_runs > 1:
            summary[f"{metric}_se"] = grouped[metric].std(ddof=1).to_numpy() / np.sqrt(n_runs)
        else:
            summary[f"{metric}_se"] = 0.0
    return summary


def plot_data(summary: pd.DataFrame) -> pd.DataFrame:
    """Long format: one row per (cycle, metric) with the mean +- SE band."""
    rows = []
    for metric in METRICS:
        mean, se = summary[f"{metric}_mean"], summary[f"{metric}_se"]
        rows.append(
            pd.DataFrame(
                {
                    "cycle": summary["cycle"],
                    "n_labeled": summary["n_labeled"],
                    "metric": metric,
                    "mean": mean,
                    "lower": mean - se,
                    "upper": mean + se,
                }
            )
        )
    return pd.concat(rows, ignore_index=True)


def report_cmd(cfg: DictConfig) -> pd.DataFrame:
    runs = cfg["report"]["runs"]
    runs = [runs] if isinstance(runs, str) else list(runs)
    dirs = expand_runs(runs)
    frames = [pd.read_csv(os.path.join(d, "metrics.csv")) for d in dirs]
    summary = aggregate(frames)
    if len(dirs) == 1:
        REPORT_LOG.warning(f"single run {dirs[0]}: standard errors are 0 by convention")

    out = cfg["report"]["out"]
    os.makedirs(out, exist_ok=True)
    summary.to_csv(os.path.join(out, "summary.csv"), index=False, float_format=FLOAT_FORMAT)
    plot_data(summary).to_csv(
        os.path.join(out, "plot_data.csv"), index=False, float_format=FLOAT_FORMAT
    )
    last = summary.iloc[-1]
    REPORT_LOG.info(
        f"{len(dirs)} runs, final cycle test accuracy "
        f"{last['test_accuracy_mean']:.4f} +- {last['test_accuracy_se']:.4f}"
    )
    return summary


@hydra.main(version_base=None, config_path="../config", config_name="main")
@with_exit_codes
def main(cfg: DictConfig):
    report_cmd(cfg)


if __name__ == "__main__":
    main()
