import hashlib
import os
import random
import shutil
from typing import Iterable, List

import numpy as np
import torch

from activeda.error import InvalidInputError
from activeda.logging import CORE_LOG

SEED_SETTERS = {
    "random": random.seed,
    "numpy": np.random.seed,
    "torch": torch.manual_seed,
}

_SEED_MASK = (1 << 63) - 1


def set_seed(seed: int, names: List = None):
    if names is None:
        names = SEED_SETTERS.keys()
    for name in names:
        SEED_SETTERS[name](seed)


def derive_seed(seed: int, sample_id: int) -> int:
    """Per-sample seed: experiment seed XOR sample id."""
    return (int(seed) ^ int(sample_id)) & _SEED_MASK


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & _SEED_MASK)


def mkdir(dir: os.PathLike, overwrite=False):
    if os.path.exists(dir) and os.listdir(dir):
        if not overwrite:
            CORE_LOG.error(f"{dir} already exist... Remove it or use a different name.")
            raise InvalidInputError(f"Folder already exists: {dir}")
        CORE_LOG.warning(f"Overwriting {dir}")
        shutil.rmtree(dir)

    os.makedirs(dir, exist_ok=True)


def content_hash(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over dtype, shape and bytes of every array, in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
