"""Divergences and similarities between discrete probability distributions.

Scalar functions take `ProbDist` (or anything `as_dist` accepts); the `*_table` variants take
row-stacked distributions and are what the samplers use.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from activeda.error import InputCheck

# Floor applied to the second KL argument before the log.
PROB_FLOOR = 1e-12
# Bhattacharyya coefficients are clamped at 1 - SIM_CLAMP before -ln(1 - BC).
SIM_CLAMP = 1e-6
# Tolerance on the unit-sum invariant.
SUM_TOL = 1e-9


@dataclass(frozen=True)
class ProbDist:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        InputCheck.eq(values.ndim, 1, "ProbDist must be a vector")
        InputCheck.ge(values.shape[0], 2, "ProbDist needs K >= 2")
        InputCheck.true(np.isfinite(values).all(), "ProbDist entries must be finite")
        InputCheck.true((values >= 0).all(), "ProbDist entries must be non-negative")
        InputCheck.le(abs(values.sum() - 1.0), SUM_TOL, "ProbDist must sum to 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def uniform(k: int) -> "ProbDist":
        return ProbDist(np.full(k, 1.0 / k))


DistLike = Union[ProbDist, np.ndarray, list, tuple]


def as_dist(p: DistLike) -> np.ndarray:
    if isinstance(p, ProbDist):
        return p.values
    return ProbDist(p).values


def _same_length(p: np.ndarray, q: np.ndarray):
    InputCheck.eq(p.shape[-1], q.shape[-1], "distribution length mismatch")


def _kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    q = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / q), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_divergence(p: DistLike, q: DistLike) -> float:
    p, q = as_dist(p), as_dist(q)
    _same_length(p, q)
    return float(_kl_rows(p, q))


def entropy(p: DistLike) -> float:
    p = as_dist(p)
    return float(entropy_rows(p))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=-1), 0.0)


def _bc_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.clip(np.sqrt(p * q).sum(axis=-1), 0.0, 1.0)


def bhattacharyya(p: DistLike, q: DistLike) -> float:
    p, q = as_dist(p), as_dist(q)
    _same_length(p, q)
    return float(_bc_rows(p, q))


def _similarity_from_bc(bc: np.ndarray) -> np.ndarray:
    return -np.log1p(-np.minimum(bc, 1.0 - SIM_CLAMP))


def similarity(p: DistLike, q: DistLike) -> float:
    """-ln(1 - BC(p, q)), finite thanks to the BC clamp."""
    return float(_similarity_from_bc(np.float64(bhattacharyya(p, q))))


def kl_table(probs: np.ndarray) -> np.ndarray:
    """`table[j, i] = KL(probs[j] || probs[i])`, zero diagonal."""
    probs = np.asarray(probs, dtype=np.float64)
    table = _kl_rows(probs[:, None, :], probs[None, :, :])
    np.fill_diagonal(table, 0.0)
    return table


def similarity_table(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    bc = _bc_rows(probs[:, None, :], probs[None, :, :])
    bc = np.maximum(bc, bc.T)  # exact symmetry
    return _similarity_from_bc(bc)
