import hydra
from omegaconf import DictConfig

from activeda import __version__
from activeda.baselines import (
    SamplerParams,
    load_sampler_patches,
    make_selection_inputs,
    run_sampler,
)
from activeda.cli import load_run_config, with_exit_codes
from activeda.data import load_external_scores
from activeda.error import InputCheck
from activeda.logging import SEL_LOG
from activeda.loop import compute_budget
from activeda.subsel import MixWeights, SelectionResult


def select_cmd(cfg: DictConfig) -> SelectionResult:
    """Select a batch from an external score file without any network."""
    cfg = load_run_config(cfg)
    sel = cfg["select"]
    load_sampler_patches(list(sel["patch"]))
    scores = load_external_scores(sel["scores"])
    inputs = make_selection_inputs(scores)

    budget = sel["budget"]
    if budget is None:
        budget = compute_budget(sel["budget_fraction"], len(inputs))
    InputCheck.le(budget, len(inputs), f"select.budget: exceeds the {len(inputs)} rows")

    weights = MixWeights(sel["alpha"], sel["beta"])
    result = run_sampler(
        sel["sampler"],
        inputs,
        budget,
        SamplerParams(
            seed=sel["seed"],
            weights=weights,
            badge_deterministic=sel["badge_deterministic"],
        ),
    )
    result.params.update(
        {
            "sampler": sel["sampler"],
            "alpha": weights.alpha,
            "beta": weights.beta,
            "seed": sel["seed"],
            "scores": str(sel["scores"]),
            "version": __version__,
        }
    )
    result.dump(sel["out"])
    SEL_LOG.info(f"{sel['sampler']} selected {len(result.ids)} ids -> {sel['out']}")
    return result


@hydra.main(version_base=None, config_path="../config", config_name="main")
@with_exit_codes
def main(cfg: DictConfig):
    select_cmd(cfg)


if __name__ == "__main__":
    main()
