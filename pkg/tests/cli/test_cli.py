import json
import os

import numpy as np
import pandas as pd
import pytest
import torch
from hydra import compose, initialize_config_module

from activeda.cli import (
    EXIT_INVALID,
    EXIT_RUNTIME,
    load_run_config,
    parse_seeds,
    with_exit_codes,
)
from activeda.cli.gradcheck import ALL_TERMS, gradcheck, gradcheck_cmd, relative_error
from activeda.cli.report import aggregate, plot_data, report_cmd
from activeda.cli.run import run_all, seed_dir
from activeda.cli.select import select_cmd
from activeda.data import ExternalScores, read_manifest, write_external_scores
from activeda.error import ConfigError, InvalidInputError, NumericError
from activeda.nn import NetDims
from activeda.subsel import SelectionResult

PATCH = os.path.join(os.path.dirname(__file__), "..", "mock", "sampler_patch.py")

TINY = [
    "data.n_per_domain=40",
    "data.n_test=20",
    "train.epochs=1",
    "loop.cycles=1",
    "select.budget_fraction=0.125",
    "vat.n_restarts=2",
    "net.hidden=8",
    "net.embed=4",
    "net.disc_hidden=8",
]


def make_cfg(overrides=(), **values):
    with initialize_config_module(version_base=None, config_module="activeda.config"):
        cfg = compose(config_name="main", overrides=list(overrides))
    for dotted, value in values.items():
        section, key = dotted.split("__")
        cfg[section][key] = value
    return cfg


def test_default_config_composes():
    cfg = make_cfg()
    assert cfg.select.sampler == "s3"
    assert cfg.select.alpha == 0.5 and cfg.select.beta == 0.3
    assert cfg.loss.lambda_s == 1.0
    assert cfg.gradcheck.dims == [2, 4, 3, 3]


def test_exit_codes():
    def raiser(exc):
        @with_exit_codes
        def fn(cfg):
            raise exc

        return fn

    for exc, code in [
        (ConfigError("x: bad"), EXIT_INVALID),
        (InvalidInputError("bad input"), EXIT_INVALID),
        (NumericError("nan"), EXIT_RUNTIME),
        (RuntimeError("boom"), EXIT_RUNTIME),
    ]:
        with pytest.raises(SystemExit) as e:
            raiser(exc)(None)
        assert e.value.code == code
    assert with_exit_codes(lambda cfg: None)(None) is None


def test_parse_seeds():
    assert parse_seeds(3) == [3]
    assert parse_seeds("0,1,2") == [0, 1, 2]
    assert parse_seeds([4, 5]) == [4, 5]
    with pytest.raises(ConfigError):
        parse_seeds([1, 1])
    with pytest.raises(ConfigError):
        parse_seeds("a,b")


def test_seed_override_forms():
    assert parse_seeds(make_cfg(["run.seeds=[1,2,3]"]).run.seeds) == [1, 2, 3]
    assert parse_seeds(make_cfg(['run.seeds="1,2,3"']).run.seeds) == [1, 2, 3]
    assert parse_seeds(make_cfg(["run.seeds=4"]).run.seeds) == [4]


def test_run_config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("select:\n  sampler: margin\nloop:\n  cycles: 7\n")
    cfg = load_run_config(make_cfg(run__config=str(path)))
    assert cfg.select.sampler == "margin" and cfg.loop.cycles == 7
    as_json = tmp_path / "exp.json"
    as_json.write_text(json.dumps({"select": {"alpha": 0.25}}))
    assert load_run_config(make_cfg(run__config=str(as_json))).select.alpha == 0.25


def test_run_config_unknown_key(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("select:\n  samplr: margin\n")
    with pytest.raises(ConfigError, match="select.samplr"):
        load_run_config(make_cfg(run__config=str(path)))
    with pytest.raises(ConfigError):
        load_run_config(make_cfg(run__config=str(tmp_path / "missing.yaml")))


def test_run_writes_every_seed(tmp_path):
    out = str(tmp_path / "runs")
    cfg = make_cfg(TINY + ["run.seeds=[0,1]"], run__out=out)
    assert run_all(cfg) == [0, 1]
    for seed in (0, 1):
        d = seed_dir(out, seed)
        metrics = pd.read_csv(os.path.join(d, "metrics.csv"))
        assert metrics["cycle"].tolist() == [0, 1]
        assert metrics["n_labeled"].tolist() == [0, 4]
        manifest = read_manifest(os.path.join(d, "manifest.json"))
        assert manifest["seed"] == seed and manifest["budget"] == 4
        assert manifest["config"]["select"]["sampler"] == "s3"
        assert len(manifest["inputs_sha256"]) == 64

    # existing output directories are not overwritten silently
    with pytest.raises(InvalidInputError):
        run_all(cfg)
    cfg.run.overwrite = True
    run_all(cfg)


def test_run_rejects_bad_config(tmp_path):
    with pytest.raises(ConfigError):
        run_all(make_cfg(TINY + ["select.sampler=unknown"], run__out=str(tmp_path)))
    with pytest.raises(ConfigError):
        run_all(make_cfg(TINY + ["select.alpha=0.9", "select.beta=0.9"], run__out=str(tmp_path)))


@pytest.mark.slow
def test_parallel_run_matches_serial(tmp_path):
    serial, parallel = str(tmp_path / "serial"), str(tmp_path / "parallel")
    run_all(make_cfg(TINY + ["run.seeds=[0,1]"], run__out=serial))
    run_all(make_cfg(TINY + ["run.seeds=[0,1]", "run.parallel=2"], run__out=parallel))
    for seed in (0, 1):
        a = pd.read_csv(os.path.join(seed_dir(serial, seed), "metrics.csv"))
        b = pd.read_csv(os.path.join(seed_dir(parallel, seed), "metrics.csv"))
        pd.testing.assert_frame_equal(a, b)


def write_scores(path, n=8, seed=0):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(3), size=n)
    perturbed = 0.8 * probs[:, None, :] + 0.2 * rng.dirichlet(np.ones(3), size=(n, 2))
    scores = ExternalScores(
        np.arange(20, 20 + n), probs, perturbed, embeddings=rng.normal(size=(n, 2))
    )
    write_external_scores(scores, path)
    return scores


def test_select_from_score_file(tmp_path):
    scores = str(tmp_path / "scores.csv")
    write_scores(scores)
    out = str(tmp_path / "selection.json")
    result = select_cmd(make_cfg(["select.budget=3"], select__scores=scores, select__out=out))
    loaded = SelectionResult.load(out)
    assert loaded.ids == result.ids and len(set(loaded.ids)) == 3
    assert all(20 <= i < 28 for i in loaded.ids)
    assert loaded.params["sampler"] == "s3" and loaded.params["alpha"] == 0.5
    assert len(loaded.steps) == 3 and "vap_norm" in loaded.steps[0]


def test_select_budget_from_fraction(tmp_path):
    scores = str(tmp_path / "scores.csv")
    write_scores(scores, n=40)
    out = str(tmp_path / "selection.json")
    result = select_cmd(
        make_cfg(
            ["select.sampler=kcenter", "select.budget_fraction=0.1"],
            select__scores=scores,
            select__out=out,
        )
    )
    assert len(result.ids) == 4


def test_select_errors(tmp_path):
    scores = str(tmp_path / "scores.csv")
    write_scores(scores, n=5)
    out = str(tmp_path / "selection.json")
    with pytest.raises(InvalidInputError):
        select_cmd(make_cfg(["select.budget=6"], select__scores=scores, select__out=out))
    with pytest.raises(InvalidInputError):
        select_cmd(
            make_cfg(
                ["select.sampler=aada", "select.budget=2"], select__scores=scores, select__out=out
            )
        )
    assert not os.path.exists(out)


def test_select_with_sampler_patch(tmp_path):
    scores = str(tmp_path / "scores.csv")
    write_scores(scores)
    out = str(tmp_path / "selection.json")
    cfg = make_cfg(
        ["select.sampler=lowest_id", "select.budget=2"],
        select__patch=[os.path.abspath(PATCH)],
        select__scores=scores,
        select__out=out,
    )
    assert select_cmd(cfg).ids == [20, 21]


def metrics_frame(accs):
    return pd.DataFrame(
        {
            "cycle": [0, 1],
            "n_labeled": [0, 10],
            "test_accuracy": accs,
            "val_accuracy": accs,
            "n_selected": [0, 10],
        }
    )


def test_aggregate_mean_and_se():
    frames = [metrics_frame([0.5, acc]) for acc in (0.70, 0.72, 0.74)]
    summary = aggregate(frames)
    last = summary.iloc[1]
    assert last["n_runs"] == 3
    assert last["test_accuracy_mean"] == pytest.approx(0.72)
    assert last["test_accuracy_se"] == pytest.approx(0.01155, abs=1e-5)
    assert summary.iloc[0]["test_accuracy_se"] == 0.0
    band = plot_data(summary)
    row = band[(band["metric"] == "test_accuracy") & (band["cycle"] == 1)].iloc[0]
    assert row["lower"] == pytest.approx(0.72 - 0.011547, abs=1e-5)


def test_aggregate_single_run_and_mismatch():
    summary = aggregate([metrics_frame([0.5, 0.6])])
    assert summary["test_accuracy_se"].tolist() == [0.0, 0.0]
    assert summary["test_accuracy_mean"].tolist() == [0.5, 0.6]
    with pytest.raises(InvalidInputError):
        aggregate([metrics_frame([0.5, 0.6]), metrics_frame([0.5, 0.6]).iloc[:1]])
    with pytest.raises(InvalidInputError):
        aggregate([])


def test_report_from_run_roots(tmp_path):
    root = tmp_path / "runs"
    for seed, acc in enumerate((0.70, 0.72, 0.74)):
        d = root / f"seed_{seed}"
        d.mkdir(parents=True)
        metrics_frame([0.5, acc]).to_csv(d / "metrics.csv", index=False)
    out = tmp_path / "report"
    cfg = make_cfg(report__runs=str(root), report__out=str(out))
    first = report_cmd(cfg)
    again = report_cmd(cfg)
    pd.testing.assert_frame_equal(first, again)
    assert (out / "summary.csv").is_file() and (out / "plot_data.csv").is_file()
    with pytest.raises(InvalidInputError):
        report_cmd(make_cfg(report__runs=str(tmp_path / "empty"), report__out=str(out)))


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_passes(seed):
    table = gradcheck(NetDims(2, 3, hidden=4, embed=3, disc_hidden=4), seed=seed)
    assert table["term"].tolist() == list(ALL_TERMS)
    assert table["passed"].all()
    assert (table["max_rel_error"] <= 1e-4).all()


def test_relative_error_is_per_entry():
    analytic = {"w": torch.ones(1000, dtype=torch.float64), "b": torch.zeros(2, dtype=torch.float64)}
    numeric = {"w": analytic["w"].clone(), "b": torch.tensor([1e-12, 3e-12], dtype=torch.float64)}
    numeric["w"][7] = 1.001
    # one bad entry in a large block is not averaged away
    assert relative_error(analytic, numeric) == pytest.approx(0.001 / 2.001)
    numeric["w"][7] = 1.0
    # near-zero entries fall back to the absolute floor
    assert relative_error(analytic, numeric) < 1e-4


def test_gradcheck_detects_corruption():
    table = gradcheck(NetDims(2, 3, hidden=4, embed=3, disc_hidden=4), seed=1, corrupt="domain")
    failed = table.loc[~table["passed"], "term"].tolist()
    assert failed == ["domain"]


def test_gradcheck_cmd():
    assert gradcheck_cmd(make_cfg())["passed"].all()
    with pytest.raises(NumericError):
        gradcheck_cmd(make_cfg(["gradcheck.corrupt=entropy"]))
    with pytest.raises(ConfigError):
        gradcheck_cmd(make_cfg(["gradcheck.dims=[2,4,3]"]))
