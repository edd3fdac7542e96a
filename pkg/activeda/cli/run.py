import multiprocessing
import os
from typing import Any, Dict, List, Optional

import hydra
import torch
from omegaconf import DictConfig, OmegaConf

from activeda import __version__
from activeda.baselines import load_sampler_patches
from activeda.cli import load_run_config, parse_seeds, with_exit_codes
from activeda.data import make_domains, write_manifest
from activeda.error import ConfigCheck
from activeda.logging import LOOP_LOG
from activeda.loop import ExperimentConfig, run_experiment
from activeda.util import content_hash, mkdir, set_seed


def seed_dir(root: str, seed: int) -> str:
    return os.path.join(root, f"seed_{seed}")


def run_seed(container: Dict[str, Any], seed: int) -> float:
    """One complete experiment for one seed; returns the final-cycle test accuracy."""
    cfg = OmegaConf.create(container)
    torch.set_num_threads(cfg["run"]["threads"])
    set_seed(seed)
    load_sampler_patches(list(cfg["select"]["patch"]))
    exp = ExperimentConfig.from_cfg(cfg, seed)

    out_dir = seed_dir(cfg["run"]["out"], seed)
    mkdir(out_dir, overwrite=cfg["run"]["overwrite"])
    domains = make_domains(cfg["data"], seed)
    manifest = {
        "version": __version__,
        "seed": seed,
        "config": container,
        "inputs_sha256": content_hash(
            [d.x for d in (domains.source, domains.target, domains.test)]
            + [d.y for d in (domains.source, domains.target, domains.test)]
        ),
    }
    result = run_experiment(exp, domains, out_dir)
    manifest["budget"] = result.budget
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return result.cycles[-1].test_accuracy


def _run_seed_safe(container: Dict[str, Any], seed: int) -> Optional[Exception]:
    try:
        acc = run_seed(container, seed)
        LOOP_LOG.info(f"seed {seed}: final test accuracy {acc:.4f}")
        return None
    except Exception as e:
        LOOP_LOG.error(f"seed {seed} failed: {type(e).__name__}: {e}")
        return e


def run_all(cfg: DictConfig) -> List[int]:
    """Run every seed into `run.out/seed_<s>`; raises the first failure after all finish."""
    cfg = load_run_config(cfg)
    seeds = parse_seeds(cfg["run"]["seeds"])
    ConfigCheck.ge(cfg["run"]["parallel"], 1, "run.parallel")
    ConfigCheck.ge(cfg["run"]["threads"], 1, "run.threads")
    # validate before fanning out
    load_sampler_patches(list(cfg["select"]["patch"]))
    ExperimentConfig.from_cfg(cfg, seeds[0])
    container = OmegaConf.to_container(cfg, resolve=True)
    os.makedirs(cfg["run"]["out"], exist_ok=True)

    jobs = [(container, s) for s in seeds]
    n_workers = min(cfg["run"]["parallel"], len(seeds))
    if n_workers > 1:
        with multiprocessing.get_context("spawn").Pool(n_workers) as pool:
            failures = pool.starmap(_run_seed_safe, jobs)
    else:
        failures = [_run_seed_safe(*job) for job in jobs]

    failed = [(s, e) for s, e in zip(seeds, failures) if e is not None]
    if failed:
        LOOP_LOG.error(f"{len(failed)}/{len(seeds)} runs failed: {[s for s, _ in failed]}")
        raise failed[0][1]
    return seeds


@hydra.main(version_base=None, config_path="../config", config_name="main")
@with_exit_codes
def main(cfg: DictConfig):
    run_all(cfg)


if __name__ == "__main__":
    main()
