import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from activeda.error import ConfigCheck, InputCheck, NumericError
from activeda.logging import TRAIN_LOG
from activeda.nn.grad import (
    GradientSet,
    OptimState,
    backward,
    clip_gradients,
    global_norm,
    grad_reverse,
    sgd_step,
)
from activeda.nn.net import ArrayLike, DANet, as_input
from activeda.perturb import VatConfig, vat_loss
from activeda.pools import Pools, domain_accuracy, evaluate
from activeda.util import derive_seed, torch_generator

METHODS = ("vaada", "dann", "supervised")
TERMS = ("supervised", "domain", "vat_labeled", "vat_unlabeled", "entropy")


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.01
    lambda_s: float = 1.0
    lambda_t: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            ConfigCheck.ge(value, 0, f"loss.{name}")

    def for_method(self, method: str) -> "LossWeights":
        """Weights actually used by an adaptation method."""
        ConfigCheck.true(method in METHODS, f"train.method must be one of {METHODS}")
        if method == "dann":
            return LossWeights(self.lambda_d, 0.0, 0.0)
        if method == "supervised":
            return LossWeights(0.0, 0.0, 0.0)
        return self


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    # None disables clipping
    clip_norm: Optional[float] = 1.0
    seed: int = 0
    method: str = "vaada"

    def __post_init__(self):
        ConfigCheck.gt(self.batch_size, 0, "train.batch_size")
        ConfigCheck.ge(self.epochs, 0, "train.epochs")
        ConfigCheck.gt(self.lr, 0, "train.lr")
        ConfigCheck.ge(self.momentum, 0, "train.momentum")
        ConfigCheck.ge(self.weight_decay, 0, "train.weight_decay")
        if self.clip_norm is not None:
            ConfigCheck.gt(self.clip_norm, 0, "train.clip_norm")
        ConfigCheck.true(self.method in METHODS, f"train.method must be one of {METHODS}")


def _labels(y) -> torch.Tensor:
    return torch.as_tensor(np.asarray(y), dtype=torch.int64)


def supervised_loss(net: DANet, x: ArrayLike, y) -> torch.Tensor:
    """Mean negative log-likelihood of the true class."""
    x = as_input(net, x)
    InputCheck.gt(x.shape[0], 0, "supervised_loss: empty batch")
    return F.cross_entropy(net.class_logits(x), _labels(y))


def conditional_entropy_loss(net: DANet, x: ArrayLike) -> torch.Tensor:
    x = as_input(net, x)
    InputCheck.gt(x.shape[0], 0, "conditional_entropy_loss: empty batch")
    log_p = torch.log_softmax(net.class_logits(x), dim=-1)
    return -(log_p.exp() * log_p).sum(dim=-1).mean()


def domain_loss(
    net: DANet,
    labeled_x: ArrayLike,
    unlabeled_x: ArrayLike,
    reverse_coeff: Optional[float] = None,
) -> torch.Tensor:
    """Discriminator BCE, labeled pool -> 1 and D_u -> 0, averaged over the two sides.

    With `reverse_coeff`, the embedding passes through a gradient-reversal connection: the
    discriminator still descends this loss while the feature extractor receives the gradient
    scaled by -reverse_coeff.
    """
    xl, xu = as_input(net, labeled_x), as_input(net, unlabeled_x)
    InputCheck.gt(xl.shape[0], 0, "domain_loss: empty labeled batch")
    InputCheck.gt(xu.shape[0], 0, "domain_loss: empty unlabeled batch")
    zl, zu = net.embed(xl), net.embed(xu)
    if reverse_coeff is not None:
        zl, zu = grad_reverse(zl, reverse_coeff), grad_reverse(zu, reverse_coeff)
    logit_l, logit_u = net.domain_logits(zl), net.domain_logits(zu)
    side_l = F.binary_cross_entropy_with_logits(logit_l, torch.ones_like(logit_l))
    side_u = F.binary_cross_entropy_with_logits(logit_u, torch.zeros_like(logit_u))
    return 0.5 * (side_l + side_u)


@dataclass
class Batches:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    domain_labeled_x: np.ndarray
    domain_unlabeled_x: np.ndarray


@dataclass
class LossTerms:
    total: float
    values: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        return {"total": self.total, **{t: self.values.get(t, math.nan) for t in TERMS}}


def total_loss(
    net: DANet,
    batches: Batches,
    weights: LossWeights,
    cfg: VatConfig,
    rng: Optional[torch.Generator] = None,
    adversarial: bool = True,
    frozen: Optional[Dict[str, torch.Tensor]] = None,
) -> Tuple[LossTerms, GradientSet]:
    """L_y + lambda_d L_d + lambda_s L_v(labeled) + lambda_t (L_v(D_u) + L_c(D_u)).

    Terms with zero weight (or no data) are skipped. `adversarial` routes the domain gradient
    through gradient reversal; otherwise the gradient is that of the returned scalar.
    `frozen` maps "vat_labeled"/"vat_unlabeled" to fixed perturbations.
    """
    frozen = frozen or {}
    has_unlabeled = len(batches.unlabeled_x) > 0
    terms: Dict[str, torch.Tensor] = {
        "supervised": supervised_loss(net, batches.labeled_x, batches.labeled_y)
    }
    objective = terms["supervised"]

    if weights.lambda_d > 0 and len(batches.domain_unlabeled_x) > 0:
        if adversarial:
            routed = domain_loss(
                net,
                batches.domain_labeled_x,
                batches.domain_unlabeled_x,
                reverse_coeff=weights.lambda_d,
            )
            terms["domain"] = routed
            objective = objective + routed
        else:
            terms["domain"] = domain_loss(
                net, batches.domain_labeled_x, batches.domain_unlabeled_x
            )
            objective = objective + weights.lambda_d * terms["domain"]

    if weights.lambda_s > 0:
        terms["vat_labeled"] = vat_loss(
            net, batches.labeled_x, cfg, rng, r=frozen.get("vat_labeled")
        )
        objective = objective + weights.lambda_s * terms["vat_labeled"]

    if weights.lambda_t > 0 and has_unlabeled:
        terms["vat_unlabeled"] = vat_loss(
            net, batches.unlabeled_x, cfg, rng, r=frozen.get("vat_unlabeled")
        )
        terms["entropy"] = conditional_entropy_loss(net, batches.unlabeled_x)
        objective = objective + weights.lambda_t * (
            terms["vat_unlabeled"] + terms["entropy"]
        )

    values = {name: float(t.detach()) for name, t in terms.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss term `{name}`: {value}")

    total = values["supervised"]
    total += weights.lambda_d * values.get("domain", 0.0)
    total += weights.lambda_s * values.get("vat_labeled", 0.0)
    total += weights.lambda_t * (
        values.get("vat_unlabeled", 0.0) + values.get("entropy", 0.0)
    )
    return LossTerms(total=total, values=values), backward(net, objective)


class BatchStream:
    """Endless reshuffled pass over `n` indices with its own generator."""

    def __init__(self, n: int, batch_size: int, generator: torch.Generator):
        self.n = n
        self.batch_size = batch_size
        self.generator = generator
        self._order = torch.zeros(0, dtype=torch.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        need = min(self.batch_size, self.n)
        while need > 0:
            if self._pos >= len(self._order):
                self._order = torch.randperm(self.n, generator=self.generator)
                self._pos = 0
            take = self._order[self._pos : self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return torch.cat(out).numpy()


@dataclass
class FitResult:
    net: DANet
    history: pd.DataFrame
    best_epoch: int
    best_val_accuracy: float


def fit(
    pools: Pools,
    net: DANet,
    cfg: TrainConfig,
    weights: LossWeights,
    vat_cfg: VatConfig,
) -> FitResult:
    """Minibatch SGD on the combined objective; returns the best-validation snapshot.

    An epoch is one pass over the labeled stream (D_s union D_t). Unlabeled and discriminator
    batches come from independent reshuffled streams.
    """
    InputCheck.gt(len(pools.source), 0, "fit needs a non-empty source pool")
    InputCheck.gt(len(pools.val), 0, "fit needs a validation set")
    net = copy.deepcopy(net)
    weights = weights.for_method(cfg.method)

    rows: List[Dict[str, float]] = []
    if cfg.epochs == 0:
        return FitResult(net, pd.DataFrame(rows), 0, evaluate(net, pools.val))
    best_state, best_acc, best_epoch = None, -1.0, 0

    labeled = pools.labeled()
    unlabeled_x = pools.unlabeled_x()
    streams = {
        name: BatchStream(n, cfg.batch_size, torch_generator(derive_seed(cfg.seed, tag)))
        for tag, (name, n) in enumerate(
            [
                ("labeled", len(labeled)),
                ("unlabeled", len(unlabeled_x)),
                ("domain_labeled", len(labeled)),
                ("domain_unlabeled", len(unlabeled_x)),
            ],
            start=1,
        )
    }
    vat_rng = torch_generator(derive_seed(cfg.seed, 5))
    opt = OptimState.create(net, cfg.lr, cfg.momentum, cfg.weight_decay)
    steps = math.ceil(len(labeled) / cfg.batch_size)

    for epoch in range(1, cfg.epochs + 1):
        sums = {k: 0.0 for k in ("total",) + TERMS}
        counts = {k: 0 for k in sums}
        max_pre, max_post = 0.0, 0.0
        for _ in range(steps):
            lab = streams["labeled"].next()
            batches = Batches(
                labeled_x=labeled.x[lab],
                labeled_y=labeled.y[lab],
                unlabeled_x=unlabeled_x[streams["unlabeled"].next()],
                domain_labeled_x=labeled.x[streams["domain_labeled"].next()],
                domain_unlabeled_x=unlabeled_x[streams["domain_unlabeled"].next()],
            )
            terms, grads = total_loss(net, batches, weights, vat_cfg, rng=vat_rng)
            if cfg.clip_norm is not None:
                grads, pre_norm = clip_gradients(grads, cfg.clip_norm)
                post_norm = min(pre_norm, cfg.clip_norm)
            else:
                pre_norm = post_norm = global_norm(grads)
            max_pre, max_post = max(max_pre, pre_norm), max(max_post, post_norm)
            sgd_step(net, grads, opt)
            for k, v in terms.as_row().items():
                if not math.isnan(v):
                    sums[k] += v
                    counts[k] += 1

        for name, p in net.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite parameters in `{name}` after epoch {epoch}")

        val_acc = evaluate(net, pools.val)
        row = {"epoch": epoch}
        row.update({k: sums[k] / counts[k] if counts[k] else math.nan for k in sums})
        row.update(
            {
                "val_accuracy": val_acc,
                "disc_accuracy": domain_accuracy(net, pools.source.x, pools.val.x),
                "max_grad_norm": max_pre,
                "max_clipped_norm": max_post,
            }
        )
        rows.append(row)
        TRAIN_LOG.debug(
            f"epoch {epoch}: loss={row['total']:.4f} val_acc={val_acc:.4f}"
        )
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(net.state_dict())

    net.load_state_dict(best_state)
    TRAIN_LOG.info(f"best val_acc={best_acc:.4f} at epoch {best_epoch}/{cfg.epochs}")
    return FitResult(net, pd.DataFrame(rows), best_epoch, best_acc)
