import json
import math
from dataclasses import asdict, dataclass
from os import PathLike
from typing import Dict, Union

import numpy as np
import torch
from torch import nn

from activeda.error import InputCheck, InvalidInputError
from activeda.logging import NN_LOG

DTYPE = torch.float64

ArrayLike = Union[torch.Tensor, np.ndarray, list, tuple]


@dataclass(frozen=True)
class NetDims:
    in_dim: int
    n_classes: int
    hidden: int = 32
    embed: int = 16
    disc_hidden: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            InputCheck.gt(value, 0, f"NetDims.{name}")
        InputCheck.ge(self.n_classes, 2, "NetDims.n_classes")


class DANet(nn.Module):
    """Feature extractor g, linear classifier f (h = f . g) and domain discriminator D.

    g: Linear(d, H) -> ReLU -> Linear(H, E), no nonlinearity on the embedding.
    D: Linear(E, Hd) -> ReLU -> Linear(Hd, Hd) -> ReLU -> Linear(Hd, 1), logistic output
       giving the probability of the labeled pool.
    """

    def __init__(self, dims: NetDims):
        super().__init__()
        self.dims = dims
        self.feature = nn.Sequential(
            nn.Linear(dims.in_dim, dims.hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dims.hidden, dims.embed, dtype=DTYPE),
        )
        self.classifier = nn.Linear(dims.embed, dims.n_classes, dtype=DTYPE)
        self.discriminator = nn.Sequential(
            nn.Linear(dims.embed, dims.disc_hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dims.disc_hidden, dims.disc_hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(dims.disc_hidden, 1, dtype=DTYPE),
        )

    def reset_parameters(self, generator: torch.Generator) -> "DANet":
        """Glorot-uniform weights, zero biases, drawn from `generator` only."""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    fan_out, fan_in = module.weight.shape
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()
        return self

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature(x)

    def class_logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.feature(x))

    def domain_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.discriminator(z).squeeze(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.class_logits(x)


NetParams = DANet


def make_net(dims: NetDims, seed: int) -> DANet:
    gen = torch.Generator().manual_seed(seed)
    net = DANet(dims).reset_parameters(gen)
    NN_LOG.debug(f"Initialized {dims} with seed {seed}")
    return net


def as_input(net: DANet, x: ArrayLike) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    InputCheck.true(x.dim() in (1, 2), f"input must be a vector or a batch, got {x.dim()}-d")
    InputCheck.eq(x.shape[-1], net.dims.in_dim, "input dimension mismatch")
    return x


def forward_features(net: DANet, x: ArrayLike) -> torch.Tensor:
    return net.embed(as_input(net, x))


def forward_classifier(net: DANet, x: ArrayLike) -> torch.Tensor:
    return torch.softmax(net.class_logits(as_input(net, x)), dim=-1)


def forward_discriminator(net: DANet, x: ArrayLike) -> torch.Tensor:
    return torch.sigmoid(net.domain_logits(forward_features(net, x)))


@torch.no_grad()
def predict_numpy(net: DANet, x: ArrayLike) -> Dict[str, np.ndarray]:
    """Classifier outputs, embeddings and discriminator outputs for a batch."""
    x = as_input(net, x)
    z = net.embed(x)
    return {
        "probs": torch.softmax(net.classifier(z), dim=-1).numpy(),
        "embeddings": z.numpy(),
        "disc": torch.sigmoid(net.domain_logits(z)).numpy(),
    }


def dump_checkpoint(net: DANet, path: PathLike) -> None:
    blocks = {
        name: {"shape": list(t.shape), "data": t.detach().reshape(-1).tolist()}
        for name, t in net.state_dict().items()
    }
    with open(path, "w") as f:
        json.dump({"dims": asdict(net.dims), "blocks": blocks}, f)


def load_checkpoint(path: PathLike) -> DANet:
    with open(path, "r") as f:
        payload = json.load(f)
    net = DANet(NetDims(**payload["dims"]))
    state = {}
    for name, block in payload["blocks"].items():
        data = torch.tensor(block["data"], dtype=DTYPE)
        state[name] = data.reshape(block["shape"])
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise InvalidInputError(f"Checkpoint {path} does not match its dims: {e}") from e
    return net
