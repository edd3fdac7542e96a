"""Central finite-difference check of every training loss term on a tiny network."""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import hydra
import pandas as pd
import torch
from omegaconf import DictConfig

from activeda.cli import with_exit_codes
from activeda.error import ConfigCheck, InternalError, NumericError
from activeda.logging import CORE_LOG
from activeda.nn.grad import GradientSet, backward
from activeda.nn.net import DTYPE, DANet, NetDims, make_net
from activeda.perturb import VatConfig, vat_loss, vat_perturbation
from activeda.train import (
    Batches,
    LossWeights,
    conditional_entropy_loss,
    domain_loss,
    supervised_loss,
    total_loss,
)
from activeda.util import derive_seed, torch_generator

STEP = 1e-5
TOLERANCE = 1e-4
KINK = 1e-4
# entries with |a| + |n| below this are compared on absolute error
GRAD_FLOOR = 1e-5
BATCH = 4
MAX_REDRAWS = 100
ALL_TERMS = ("supervised", "domain", "vat_labeled", "vat_unlabeled", "entropy", "total")


@dataclass
class Problem:
    net: DANet
    batches: Batches
    r_labeled: torch.Tensor
    r_unlabeled: torch.Tensor
    target_labeled: torch.Tensor
    target_unlabeled: torch.Tensor


def _min_abs_preactivation(net: DANet, xs: List[torch.Tensor]) -> float:
    lowest = float("inf")
    with torch.no_grad():
        for x in xs:
            h = net.feature[0](x)
            d1 = net.discriminator[0](net.embed(x))
            d2 = net.discriminator[2](torch.relu(d1))
            for z in (h, d1, d2):
                lowest = min(lowest, float(z.abs().min()))
    return lowest


def make_problem(dims: NetDims, seed: int, vat: VatConfig) -> Problem:
    """Random net and batches, redrawn until every ReLU input is KINK away from zero."""
    for attempt in range(MAX_REDRAWS):
        gen = torch_generator(derive_seed(seed, attempt))
        net = make_net(dims, derive_seed(seed, MAX_REDRAWS + attempt))
        with torch.no_grad():
            for p in net.parameters():
                # nonzero biases so pre-activations are not all proportional to x
                p.add_(0.1 * torch.randn(p.shape, dtype=DTYPE, generator=gen))
        lx = torch.randn((BATCH, dims.in_dim), dtype=DTYPE, generator=gen)
        ux = torch.randn((BATCH, dims.in_dim), dtype=DTYPE, generator=gen)
        ly = torch.randint(0, dims.n_classes, (BATCH,), generator=gen)
        r_l = vat_perturbation(net, lx, vat, gen).r
        r_u = vat_perturbation(net, ux, vat, gen).r
        if _min_abs_preactivation(net, [lx, ux, lx + r_l, ux + r_u]) < KINK:
            continue
        with torch.no_grad():
            t_l, t_u = net.class_logits(lx), net.class_logits(ux)
        batches = Batches(
            labeled_x=lx.numpy(),
            labeled_y=ly.numpy(),
            unlabeled_x=ux.numpy(),
            domain_labeled_x=lx.numpy(),
            domain_unlabeled_x=ux.numpy(),
        )
        return Problem(net, batches, r_l, r_u, t_l, t_u)
    raise InternalError(f"no kink-free instance in {MAX_REDRAWS} draws (seed {seed})")


def term_functions(p: Problem, weights: LossWeights, vat: VatConfig) -> Dict[str, Callable[[], torch.Tensor]]:
    """Scalar losses as functions of the current parameters, VAT targets frozen."""
    b = p.batches
    terms = {
        "supervised": lambda: supervised_loss(p.net, b.labeled_x, b.labeled_y),
        "domain": lambda: domain_loss(p.net, b.domain_labeled_x, b.domain_unlabeled_x),
        "vat_labeled": lambda: vat_loss(
            p.net, b.labeled_x, vat, r=p.r_labeled, target_logits=p.target_labeled
        ),
        "vat_unlabeled": lambda: vat_loss(
            p.net, b.unlabeled_x, vat, r=p.r_unlabeled, target_logits=p.target_unlabeled
        ),
        "entropy": lambda: conditional_entropy_loss(p.net, b.unlabeled_x),
    }
    terms["total"] = lambda: (
        terms["supervised"]()
        + weights.lambda_d * terms["domain"]()
        + weights.lambda_s * terms["vat_labeled"]()
        + weights.lambda_t * (terms["vat_unlabeled"]() + terms["entropy"]())
    )
    return terms


def numeric_gradient(net: DANet, fn: Callable[[], torch.Tensor], step: float = STEP) -> GradientSet:
    grads = {}
    with torch.no_grad():
        for name, param in net.named_parameters():
            flat = param.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                plus = float(fn())
                flat[i] = orig - step
                minus = float(fn())
                flat[i] = orig
                g[i] = (plus - minus) / (2 * step)
            grads[name] = g.view_as(param)
    return grads


def relative_error(analytic: GradientSet, numeric: GradientSet, floor: float = GRAD_FLOOR) -> float:
    """Max over every parameter entry of |a - n| / max(|a| + |n|, floor)."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = (a - n).abs() / (a.abs() + n.abs()).clamp_min(floor)
        worst = max(worst, float(err.max()) if err.numel() else 0.0)
    return worst


def analytic_gradients(p: Problem, weights: LossWeights, vat: VatConfig) -> Dict[str, GradientSet]:
    fns = term_functions(p, weights, vat)
    grads = {name: backward(p.net, fns[name]()) for name in ALL_TERMS if name != "total"}
    # the combined objective goes through the training code path, plain domain gradient
    _, grads["total"] = total_loss(
        p.net,
        p.batches,
        weights,
        vat,
        adversarial=False,
        frozen={"vat_labeled": p.r_labeled, "vat_unlabeled": p.r_unlabeled},
    )
    return grads


def corrupt_gradient(g: GradientSet) -> GradientSet:
    name = next(iter(g))
    out = dict(g)
    out[name] = g[name] * 1.5 + 1e-3
    return out


def gradcheck(
    dims: NetDims,
    seed: int = 0,
    weights: Optional[LossWeights] = None,
    vat: Optional[VatConfig] = None,
    corrupt: Optional[str] = None,
) -> pd.DataFrame:
    weights = LossWeights() if weights is None else weights
    vat = VatConfig() if vat is None else vat
    ConfigCheck.true(corrupt is None or corrupt in ALL_TERMS, f"gradcheck.corrupt: one of {ALL_TERMS}")
    problem = make_problem(dims, seed, vat)
    analytic = analytic_gradients(problem, weights, vat)
    fns = term_functions(problem, weights, vat)
    rows = []
    for name in ALL_TERMS:
        a = corrupt_gradient(analytic[name]) if name == corrupt else analytic[name]
        err = relative_error(a, numeric_gradient(problem.net, fns[name]))
        rows.append({"term": name, "max_rel_error": err, "passed": err <= TOLERANCE})
    return pd.DataFrame(rows)


def gradcheck_cmd(cfg: DictConfig) -> pd.DataFrame:
    gc = cfg["gradcheck"]
    ConfigCheck.eq(len(gc["dims"]), 4, "gradcheck.dims: [d, H, E, K]")
    d, h, e, k = (int(v) for v in gc["dims"])
    dims = NetDims(d, k, hidden=h, embed=e, disc_hidden=h)
    table = gradcheck(
        dims,
        seed=gc["seed"],
        weights=LossWeights(**cfg["loss"]),
        vat=VatConfig(**cfg["vat"]),
        corrupt=gc["corrupt"],
    )
    CORE_LOG.info(f"gradient check, central differences with step {STEP}:\n{table.to_string(index=False)}")
    failed = table.loc[~table["passed"], "term"].tolist()
    if failed:
        raise NumericError(f"gradient check failed for {failed}")
    return table


@hydra.main(version_base=None, config_path="../config", config_name="main")
@with_exit_codes
def main(cfg: DictConfig):
    gradcheck_cmd(cfg)


if __name__ == "__main__":
    main()
