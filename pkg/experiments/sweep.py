"""
Parameter sensitivity of the selector over (alpha, beta) and the budget ablation.

Every grid point runs the full loop for each seed into `<out>/<point>/seed_<s>` and the final
cycle is summarized the way `activeda.report` does it:

    python experiments/sweep.py --mode weights --out sweep_ab --seeds 0 1 2
    python experiments/sweep.py --mode budget --out sweep_b --budgets 0.01 0.02 0.05
"""
import multiprocessing as mp
import os
from itertools import product

import pandas as pd
from hydra import compose, initialize_config_module
from omegaconf import OmegaConf
from tqdm import tqdm

from activeda.cli.report import aggregate
from activeda.cli.run import run_seed, seed_dir

GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def grid_points(args):
    if args.mode == "weights":
        for alpha, beta in product(GRID, GRID):
            if alpha + beta <= 1.0:
                yield f"a{alpha}_b{beta}", [f"select.alpha={alpha}", f"select.beta={beta}"]
    else:
        for fraction in args.budgets:
            yield f"budget{fraction}", [f"select.budget_fraction={fraction}"]


def job(args):
    container, seed = args
    try:
        run_seed(container, seed)
        return None
    except Exception as e:
        return f"{container['run']['out']} seed {seed}: {type(e).__name__}: {e}"


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", choices=["weights", "budget"], default="weights")
    parser.add_argument("--out", type=str, required=True, help="Root folder of all runs.")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--budgets", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.1])
    parser.add_argument("--parallel", type=int, default=mp.cpu_count())
    parser.add_argument(
        "--overrides", nargs="*", default=[], help="Extra config overrides, e.g. train.epochs=20"
    )
    args = parser.parse_args()

    points = list(grid_points(args))
    jobs = []
    with initialize_config_module(version_base=None, config_module="activeda.config"):
        for name, overrides in points:
            cfg = compose(
                config_name="main",
                overrides=overrides + args.overrides + [f"run.out={os.path.join(args.out, name)}"],
            )
            container = OmegaConf.to_container(cfg, resolve=True)
            jobs.extend((container, s) for s in args.seeds)

    with mp.get_context("spawn").Pool(max(1, args.parallel)) as pool:
        errors = [e for e in tqdm(pool.imap(job, jobs), total=len(jobs)) if e is not None]
    for e in errors:
        print(f"==> FAILED {e}")

    rows = []
    for name, overrides in points:
        root = os.path.join(args.out, name)
        dirs = [seed_dir(root, s) for s in args.seeds]
        frames = [
            pd.read_csv(os.path.join(d, "metrics.csv"))
            for d in dirs
            if os.path.isfile(os.path.join(d, "metrics.csv"))
        ]
        if not frames:
            continue
        last = aggregate(frames).iloc[-1].to_dict()
        rows.append({"point": name, "overrides": " ".join(overrides), **last})
    pd.DataFrame(rows).to_csv(os.path.join(args.out, "sweep_summary.csv"), index=False)
    print(f"@ {len(rows)} grid points summarized into {args.out}/sweep_summary.csv")
