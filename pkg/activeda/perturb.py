"""Virtual adversarial perturbations by the power method.

One routine (`_power_directions`) serves both uses: the smoothness loss of training and the
N-restart bundles that feed the VAP uncertainty score.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from activeda.error import ConfigCheck, InputCheck
from activeda.logging import NN_LOG
from activeda.nn.net import DTYPE, ArrayLike, DANet, as_input
from activeda.util import derive_seed, torch_generator

_TINY = torch.finfo(DTYPE).tiny


@dataclass(frozen=True)
class VatConfig:
    epsilon: float = 5.0
    # finite-difference step xi = xi_scale * RMS(x)
    xi_scale: float = 1e-2
    power_iters: int = 1
    n_restarts: int = 5

    def __post_init__(self):
        ConfigCheck.gt(self.epsilon, 0, "vat.epsilon")
        ConfigCheck.gt(self.xi_scale, 0, "vat.xi_scale")
        ConfigCheck.ge(self.power_iters, 1, "vat.power_iters")
        ConfigCheck.ge(self.n_restarts, 1, "vat.n_restarts")


@dataclass
class Perturbation:
    r: torch.Tensor
    # rows whose power iteration hit a zero gradient and kept the random direction
    fallback: torch.Tensor


@dataclass
class PerturbationBundle:
    original: np.ndarray  # (K,)
    perturbed: np.ndarray  # (N, K)
    fallback: np.ndarray  # (N,) bool

    @property
    def n_restarts(self) -> int:
        return self.perturbed.shape[0]


@dataclass
class BundleSet:
    """Bundles of a whole candidate pool, stacked."""

    original: np.ndarray  # (n, K)
    perturbed: np.ndarray  # (n, N, K)
    fallback: np.ndarray  # (n, N) bool

    def __len__(self) -> int:
        return self.original.shape[0]

    def __getitem__(self, i: int) -> PerturbationBundle:
        return PerturbationBundle(self.original[i], self.perturbed[i], self.fallback[i])


def kl_logits_rows(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(softmax(p) || softmax(q)) from logits."""
    p_log = torch.log_softmax(p_logits, dim=-1)
    q_log = torch.log_softmax(q_logits, dim=-1)
    return (p_log.exp() * (p_log - q_log)).sum(dim=-1)


def _unit_rows(u: torch.Tensor) -> torch.Tensor:
    return u / u.norm(dim=-1, keepdim=True)


def _step_scale(x: torch.Tensor, cfg: VatConfig) -> torch.Tensor:
    rms = x.pow(2).mean(dim=-1).sqrt()
    return torch.where(rms > 0, cfg.xi_scale * rms, torch.full_like(rms, cfg.xi_scale))


def _power_directions(
    net: DANet, x: torch.Tensor, u0: torch.Tensor, cfg: VatConfig
) -> Perturbation:
    with torch.no_grad():
        target = net.class_logits(x)
    xi = _step_scale(x, cfg).unsqueeze(-1)
    u = _unit_rows(u0)
    fallback = torch.zeros(x.shape[0], dtype=torch.bool)
    for _ in range(cfg.power_iters):
        step = u.clone().requires_grad_(True)
        kl = kl_logits_rows(target, net.class_logits(x + xi * step)).sum()
        (grad,) = torch.autograd.grad(kl, step)
        norms = grad.norm(dim=-1, keepdim=True)
        ok = norms > _TINY
        u = torch.where(ok, grad / torch.where(ok, norms, torch.ones_like(norms)), u)
        fallback |= ~ok.squeeze(-1)
    if fallback.any():
        NN_LOG.debug(f"{int(fallback.sum())} zero-gradient power iterations")
    return Perturbation(r=(cfg.epsilon * _unit_rows(u)).detach(), fallback=fallback)


def vat_perturbation(
    net: DANet, x: ArrayLike, cfg: VatConfig, rng: torch.Generator
) -> Perturbation:
    """Adversarial perturbation of norm epsilon for a sample or a batch of samples."""
    x = as_input(net, x)
    single = x.dim() == 1
    xb = x.unsqueeze(0) if single else x
    InputCheck.gt(xb.shape[0], 0, "empty batch")
    u0 = torch.randn(xb.shape, dtype=DTYPE, generator=rng)
    pert = _power_directions(net, xb, u0, cfg)
    if single:
        return Perturbation(r=pert.r[0], fallback=pert.fallback[0])
    return pert


def _bundle_from_directions(
    net: DANet, x: torch.Tensor, u0: torch.Tensor, cfg: VatConfig
) -> BundleSet:
    # x: (n, d); u0: (n, N, d)
    n, n_restarts, d = u0.shape
    rows = x.unsqueeze(1).expand(n, n_restarts, d).reshape(-1, d)
    pert = _power_directions(net, rows, u0.reshape(-1, d), cfg)
    with torch.no_grad():
        original = torch.softmax(net.class_logits(x), dim=-1)
        perturbed = torch.softmax(net.class_logits(rows + pert.r), dim=-1)
    k = original.shape[-1]
    return BundleSet(
        original=original.numpy(),
        perturbed=perturbed.reshape(n, n_restarts, k).numpy(),
        fallback=pert.fallback.reshape(n, n_restarts).numpy(),
    )


def make_bundle(
    net: DANet, x: ArrayLike, cfg: VatConfig, rng: torch.Generator
) -> PerturbationBundle:
    x = as_input(net, x)
    InputCheck.eq(x.dim(), 1, "make_bundle takes a single sample")
    u0 = torch.randn((1, cfg.n_restarts, x.shape[0]), dtype=DTYPE, generator=rng)
    return _bundle_from_directions(net, x.unsqueeze(0), u0, cfg)[0]


def make_bundles(
    net: DANet, x: ArrayLike, ids: Sequence[int], cfg: VatConfig, seed: int
) -> BundleSet:
    """Bundles for a pool; sample `ids[i]` draws its directions from seed XOR id."""
    x = as_input(net, x)
    InputCheck.eq(x.dim(), 2, "make_bundles takes a batch")
    InputCheck.eq(len(ids), x.shape[0], "one id per sample")
    shape = (cfg.n_restarts, x.shape[1])
    directions = [
        torch.randn(shape, dtype=DTYPE, generator=torch_generator(derive_seed(seed, i)))
        for i in ids
    ]
    if not directions:
        k = net.dims.n_classes
        return BundleSet(
            original=np.zeros((0, k)),
            perturbed=np.zeros((0, cfg.n_restarts, k)),
            fallback=np.zeros((0, cfg.n_restarts), dtype=bool),
        )
    return _bundle_from_directions(net, x, torch.stack(directions), cfg)


def vat_loss(
    net: DANet,
    batch: ArrayLike,
    cfg: VatConfig,
    rng: Optional[torch.Generator] = None,
    r: Optional[torch.Tensor] = None,
    target_logits: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean KL(h(x) || h(x + r)) with h(x) and r held constant.

    Pass `r` to freeze the perturbation and `target_logits` to freeze h(x) at other parameters
    (gradient checks); otherwise r is drawn from `rng`.
    """
    x = as_input(net, batch)
    InputCheck.eq(x.dim(), 2, "vat_loss takes a batch")
    InputCheck.gt(x.shape[0], 0, "empty batch")
    if r is None:
        InputCheck.not_none(rng, "vat_loss needs rng or a frozen perturbation")
        r = vat_perturbation(net, x, cfg, rng).r
    if target_logits is None:
        with torch.no_grad():
            target_logits = net.class_logits(x)
    return kl_logits_rows(target_logits, net.class_logits(x + r)).mean()
