"""The active-adaptation cycle loop: train, select B, label, move pools, retrain."""

import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from activeda.baselines import SAMPLERS, SamplerParams, make_selection_inputs, run_sampler
from activeda.data import FLOAT_FORMAT, Domains, Standardizer, split_train_val, write_frame
from activeda.error import ConfigCheck, NumericError
from activeda.logging import LOOP_LOG
from activeda.nn.net import DANet, NetDims, dump_checkpoint, make_net, predict_numpy
from activeda.perturb import VatConfig
from activeda.pools import LabeledSet, LabelOracle, Pools, evaluate
from activeda.subsel import MixWeights, SelectionResult
from activeda.train import LossWeights, TrainConfig, fit
from activeda.util import derive_seed

# derived-seed streams of one experiment seed
SPLIT_STREAM = 7
NET_STREAM = 11
TRAIN_STREAM = 1 << 10
SELECT_STREAM = 2 << 10
BUNDLE_STREAM = 3 << 10

METRICS_COLUMNS = ["cycle", "n_labeled", "test_accuracy", "val_accuracy", "n_selected"]
TIMING_COLUMNS = ["cycle", "selection_ms", "train_ms"]


@dataclass(frozen=True)
class ExperimentConfig:
    budget_fraction: float = 0.02
    cycles: int = 5
    sampler: str = "s3"
    weights: MixWeights = field(default_factory=MixWeights)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    vat: VatConfig = field(default_factory=VatConfig)
    hidden: int = 32
    embed: int = 16
    disc_hidden: int = 32
    seed: int = 0
    warm_start: bool = True
    badge_deterministic: bool = False
    export_embeddings: bool = True
    train_fraction: float = 0.8
    standardize: bool = True

    def __post_init__(self):
        ConfigCheck.gt(self.budget_fraction, 0, "select.budget_fraction")
        ConfigCheck.le(self.budget_fraction, 1, "select.budget_fraction")
        ConfigCheck.ge(self.cycles, 1, "loop.cycles")
        ConfigCheck.true(
            self.sampler in SAMPLERS, f"select.sampler: unknown sampler {self.sampler}"
        )
        ConfigCheck.true(0 < self.train_fraction < 1, "data.train_fraction: must lie in (0, 1)")

    @staticmethod
    def from_cfg(cfg, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(
            budget_fraction=cfg["select"]["budget_fraction"],
            cycles=cfg["loop"]["cycles"],
            sampler=cfg["select"]["sampler"],
            weights=MixWeights(cfg["select"]["alpha"], cfg["select"]["beta"]),
            loss=LossWeights(**cfg["loss"]),
            train=TrainConfig(**cfg["train"], seed=seed),
            vat=VatConfig(**cfg["vat"]),
            hidden=cfg["net"]["hidden"],
            embed=cfg["net"]["embed"],
            disc_hidden=cfg["net"]["disc_hidden"],
            seed=seed,
            warm_start=cfg["loop"]["warm_start"],
            badge_deterministic=cfg["select"]["badge_deterministic"],
            export_embeddings=cfg["loop"]["export_embeddings"],
            train_fraction=cfg["data"]["train_fraction"],
            standardize=cfg["data"]["standardize"],
        )

    def dims(self, in_dim: int, n_classes: int) -> NetDims:
        return NetDims(in_dim, n_classes, self.hidden, self.embed, self.disc_hidden)


@dataclass
class CycleMetrics:
    cycle: int
    n_labeled: int
    test_accuracy: float
    val_accuracy: float
    selected_ids: List[int]
    history: pd.DataFrame
    selection_ms: float = 0.0
    train_ms: float = 0.0
    selection: Optional[SelectionResult] = None

    def metrics_row(self) -> Dict[str, Any]:
        return {
            "cycle": self.cycle,
            "n_labeled": self.n_labeled,
            "test_accuracy": self.test_accuracy,
            "val_accuracy": self.val_accuracy,
            "n_selected": len(self.selected_ids),
        }

    def timing_row(self) -> Dict[str, Any]:
        return {"cycle": self.cycle, "selection_ms": self.selection_ms, "train_ms": self.train_ms}


@dataclass
class ExperimentResult:
    cycles: List[CycleMetrics]
    pools: Pools
    net: DANet
    budget: int


def build_pools(cfg: ExperimentConfig, domains: Domains) -> Pools:
    """Split the target pool into D_u and validation; standardize with source statistics."""
    train, val = split_train_val(
        domains.target, cfg.train_fraction, derive_seed(cfg.seed, SPLIT_STREAM)
    )
    source, test = domains.source, domains.test
    if cfg.standardize:
        scaler = Standardizer.fit(source.x)
        source, train, val, test = (scaler(d) for d in (source, train, val, test))
    return Pools(
        source=LabeledSet(source.x, source.y),
        target_x=train.x,
        oracle=LabelOracle(range(len(train)), train.y),
        val=LabeledSet(val.x, val.y),
        test=LabeledSet(test.x, test.y),
    )


def compute_budget(fraction: float, n_target_train: int) -> int:
    return int(round(fraction * n_target_train))


def _export_embeddings(net: DANet, pools: Pools, path: str):
    target = predict_numpy(net, pools.test.x)["embeddings"]
    source = predict_numpy(net, pools.source.x)["embeddings"]
    np.savez(
        path,
        embeddings=np.concatenate([source, target]),
        labels=np.concatenate([pools.source.y, pools.test.y]),
        domain=np.concatenate([np.zeros(len(source), np.int64), np.ones(len(target), np.int64)]),
    )


def _select(cfg: ExperimentConfig, net: DANet, pools: Pools, budget: int, cycle: int) -> SelectionResult:
    inputs = make_selection_inputs(
        net,
        pools.unlabeled_x(),
        np.asarray(pools.unlabeled_ids, dtype=np.int64),
        pools.labeled().x,
        cfg.vat,
        derive_seed(cfg.seed, BUNDLE_STREAM + cycle),
    )
    params = SamplerParams(
        seed=derive_seed(cfg.seed, SELECT_STREAM + cycle),
        weights=cfg.weights,
        badge_deterministic=cfg.badge_deterministic,
    )
    return run_sampler(cfg.sampler, inputs, budget, params)


def run_experiment(
    cfg: ExperimentConfig, domains: Domains, out_dir: Optional[str] = None
) -> ExperimentResult:
    """Cycle 0 adapts with an empty D_t; each of the `cycles` rounds after it selects B ids,
    labels them and retrains. A zero budget leaves only cycle 0.
    """
    pools = build_pools(cfg, domains)
    budget = compute_budget(cfg.budget_fraction, pools.n_target_train)
    rounds = cfg.cycles
    if budget == 0:
        LOOP_LOG.warning("budget rounds to 0; only the initial adaptation runs")
        rounds = 0
    elif budget * cfg.cycles > pools.n_target_train:
        LOOP_LOG.warning(
            f"{cfg.cycles} rounds of {budget} exceed |D_u| = {pools.n_target_train}; "
            "final cycles are truncated"
        )
    dims = cfg.dims(pools.dim, domains.source.n_classes)
    init_seed = derive_seed(cfg.seed, NET_STREAM)
    net = make_net(dims, init_seed)
    LOOP_LOG.info(
        f"sampler={cfg.sampler} method={cfg.train.method} B={budget} C={cfg.cycles} seed={cfg.seed}"
    )

    cycles: List[CycleMetrics] = []
    for c in range(rounds + 1):
        selection, selection_ms = None, 0.0
        n_pick = min(budget, len(pools.unlabeled_ids)) if c > 0 else 0
        if c > 0 and n_pick < budget:
            LOOP_LOG.warning(f"cycle {c}: only {n_pick} of {budget} candidates left")
        if n_pick > 0:
            start = time.perf_counter()
            selection = _select(cfg, net, pools, n_pick, c)
            selection_ms = 1e3 * (time.perf_counter() - start)
            pools.label_and_move(selection.ids)

        start_net = net if cfg.warm_start else make_net(dims, init_seed)
        train_cfg = replace(cfg.train, seed=derive_seed(cfg.seed, TRAIN_STREAM + c))
        start = time.perf_counter()
        try:
            result = fit(pools, start_net, train_cfg, cfg.loss, cfg.vat)
        except NumericError as e:
            LOOP_LOG.error(f"cycle {c}: training diverged: {e}")
            raise NumericError(f"cycle {c}: {e}") from e
        train_ms = 1e3 * (time.perf_counter() - start)
        net = result.net

        metrics = CycleMetrics(
            cycle=c,
            n_labeled=len(pools.labeled_ids),
            test_accuracy=evaluate(net, pools.test),
            val_accuracy=result.best_val_accuracy,
            selected_ids=[] if selection is None else list(selection.ids),
            history=result.history,
            selection_ms=selection_ms,
            train_ms=train_ms,
            selection=selection,
        )
        cycles.append(metrics)
        LOOP_LOG.info(
            f"cycle {c}: |D_t|={metrics.n_labeled} test_acc={metrics.test_accuracy:.4f} "
            f"val_acc={metrics.val_accuracy:.4f}"
        )

        if out_dir is not None:
            result.history.to_csv(
                os.path.join(out_dir, f"history_cycle{c}.csv"), index=False, float_format=FLOAT_FORMAT
            )
            if selection is not None:
                selection.dump(os.path.join(out_dir, f"selection_cycle{c}.json"))
            if cfg.export_embeddings:
                _export_embeddings(net, pools, os.path.join(out_dir, f"embeddings_cycle{c}.npz"))

    if out_dir is not None:
        write_metrics(cycles, out_dir)
        dump_checkpoint(net, os.path.join(out_dir, "checkpoint.json"))
    return ExperimentResult(cycles, pools, net, budget)


def write_metrics(cycles: List[CycleMetrics], out_dir: str):
    write_frame(
        [m.metrics_row() for m in cycles], os.path.join(out_dir, "metrics.csv"), METRICS_COLUMNS
    )
    write_frame(
        [m.timing_row() for m in cycles], os.path.join(out_dir, "timing.csv"), TIMING_COLUMNS
    )
