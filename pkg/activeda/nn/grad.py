import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch

from activeda.error import InputCheck
from activeda.nn.net import DANet

# Parameter name (as in `named_parameters`) -> gradient block of the same shape.
GradientSet = Dict[str, torch.Tensor]


class GradReverseFunc(torch.autograd.Function):
    @staticmethod
    def forward(ctx, input, coeff):
        ctx.coeff = coeff
        return input.view_as(input)

    @staticmethod
    def backward(ctx, grad_output):
        # identity forward, -coeff * grad backward
        return grad_output.neg() * ctx.coeff, None


def grad_reverse(x: torch.Tensor, coeff: float) -> torch.Tensor:
    return GradReverseFunc.apply(x, coeff)


def backward(net: DANet, loss: torch.Tensor) -> GradientSet:
    """Gradient of a scalar loss w.r.t. every parameter block; unused blocks get zeros."""
    names, params = zip(*net.named_parameters())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in zip(names, params)}
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: torch.zeros_like(p) if g is None else g.detach()
        for n, p, g in zip(names, params, grads)
    }


def scale_gradients(g: GradientSet, factor: float) -> GradientSet:
    return {k: v * factor for k, v in g.items()}


def global_norm(g: GradientSet) -> float:
    return math.sqrt(sum(float((v * v).sum()) for v in g.values()))


def clip_gradients(
    g: GradientSet, max_norm: float = 1.0
) -> Tuple[GradientSet, float]:
    """Scale every block by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns the (possibly) scaled set and the pre-clip global norm.
    """
    norm = global_norm(g)
    if norm <= max_norm:
        return dict(g), norm
    factor = max_norm / norm
    return scale_gradients(g, factor), norm


@dataclass
class OptimState:
    optimizer: torch.optim.SGD
    lr: float
    momentum: float
    weight_decay: float

    @staticmethod
    def create(
        net: DANet, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0005
    ) -> "OptimState":
        # one parameter group: the same learning rate for every block
        optimizer = torch.optim.SGD(
            net.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay
        )
        return OptimState(optimizer, lr, momentum, weight_decay)

    def momentum_buffer(self, param: torch.nn.Parameter) -> Optional[torch.Tensor]:
        return self.optimizer.state.get(param, {}).get("momentum_buffer")


def sgd_step(net: DANet, g: GradientSet, opt: OptimState) -> None:
    """v <- mu * v + (g + wd * theta); theta <- theta - lr * v, in place."""
    params = dict(net.named_parameters())
    InputCheck.eq(set(params), set(g), "gradient blocks must match parameters")
    for name, p in params.items():
        InputCheck.eq(tuple(p.shape), tuple(g[name].shape), f"gradient shape of {name}")
        p.grad = g[name].clone()
    opt.optimizer.step()
    opt.optimizer.zero_grad(set_to_none=True)
