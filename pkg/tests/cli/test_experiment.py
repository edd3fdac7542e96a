import filecmp
import os
import time

import pandas as pd
import pytest
from hydra import compose, initialize_config_module

from activeda.cli.run import run_all, seed_dir

SEEDS = [0, 1, 2, 3, 4]

# two moons rotated by 30 degrees, 500 per domain, B = 2%, five selection cycles
DESK_SCALE = [
    "data.generator=two_moons",
    "data.n_per_domain=500",
    "data.rotation_deg=30.0",
    "data.noise_sd=0.1",
    "select.budget_fraction=0.02",
    "loop.cycles=5",
    "loop.export_embeddings=false",
    "train.epochs=20",
    f"run.seeds=[{','.join(map(str, SEEDS))}]",
    f"run.parallel={min(len(SEEDS), os.cpu_count() or 1)}",
]

ARMS = {
    "s3_vaada": ["select.sampler=s3", "train.method=vaada"],
    "random_vaada": ["select.sampler=random", "train.method=vaada"],
    "s3_supervised": ["select.sampler=s3", "train.method=supervised"],
}


def run_arm(root, arm):
    out = os.path.join(root, arm)
    with initialize_config_module(version_base=None, config_module="activeda.config"):
        cfg = compose(config_name="main", overrides=DESK_SCALE + ARMS[arm] + [f"run.out={out}"])
    run_all(cfg)
    return out


def accuracies(out, cycle):
    frames = [pd.read_csv(os.path.join(seed_dir(out, s), "metrics.csv")) for s in SEEDS]
    return pd.Series([f.loc[f["cycle"] == cycle, "test_accuracy"].item() for f in frames])


@pytest.fixture(scope="module")
def paired(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("paired"))
    start = time.perf_counter()
    outs = {arm: run_arm(root, arm) for arm in ARMS}
    return outs, time.perf_counter() - start


@pytest.mark.slow
def test_paired_runs_finish_in_time(paired):
    outs, seconds = paired
    assert seconds < 600
    for out in outs.values():
        frame = pd.read_csv(os.path.join(seed_dir(out, 0), "metrics.csv"))
        assert frame["n_labeled"].tolist() == [0, 8, 16, 24, 32, 40]


@pytest.mark.slow
def test_subset_selection_beats_random_at_final_cycle(paired):
    outs, _ = paired
    gap = accuracies(outs["s3_vaada"], 5) - accuracies(outs["random_vaada"], 5)
    assert gap.mean() >= 0.02


@pytest.mark.slow
def test_adaptation_beats_supervised_at_cycle_zero(paired):
    outs, _ = paired
    gap = accuracies(outs["s3_vaada"], 0) - accuracies(outs["s3_supervised"], 0)
    assert gap.mean() >= 0.02


@pytest.mark.slow
def test_rerun_metrics_are_byte_identical(paired, tmp_path):
    outs, _ = paired
    again = run_arm(str(tmp_path), "s3_vaada")
    for s in SEEDS:
        assert filecmp.cmp(
            os.path.join(seed_dir(outs["s3_vaada"], s), "metrics.csv"),
            os.path.join(seed_dir(again, s), "metrics.csv"),
            shallow=False,
        )
