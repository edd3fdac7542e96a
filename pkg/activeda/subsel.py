"""Submodular batch selection: VAP uncertainty, KL diversity, facility-location coverage.

Scores are normalized with constants fixed once per selection cycle (`Normalization`), so the
greedy gains keep the diminishing-returns property of the unnormalized combination.
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from os import PathLike
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from activeda.error import ConfigCheck, InputCheck, InvalidInputError
from activeda.logging import SEL_LOG
from activeda.metrics import _kl_rows, kl_table, similarity_table
from activeda.perturb import BundleSet, PerturbationBundle

# brute-force oracle limits
MAX_SUBSETS = 10**6
MAX_ORACLE_BUDGET = 5


@dataclass(frozen=True)
class MixWeights:
    alpha: float = 0.5
    beta: float = 0.3

    def __post_init__(self):
        ConfigCheck.ge(self.alpha, 0, "select.alpha")
        ConfigCheck.ge(self.beta, 0, "select.beta")
        ConfigCheck.le(self.alpha + self.beta, 1 + 1e-12, "select.alpha + select.beta")

    @property
    def gamma(self) -> float:
        return max(0.0, 1.0 - self.alpha - self.beta)


def vap_score(bundle: PerturbationBundle) -> float:
    """Mean pairwise KL among the original and N perturbed outputs."""
    orig, pert = np.asarray(bundle.original), np.asarray(bundle.perturbed)
    InputCheck.ge(pert.shape[0], 1, "VAP needs at least one perturbed output")
    return float(vap_scores_from(orig[None], pert[None])[0])


def vap_scores_from(original: np.ndarray, perturbed: np.ndarray) -> np.ndarray:
    # original: (n, K); perturbed: (n, N, K)
    n_restarts = perturbed.shape[1]
    to_orig = _kl_rows(original[:, None, :], perturbed).sum(axis=1)
    pairwise = _kl_rows(perturbed[:, :, None, :], perturbed[:, None, :, :])
    idx = np.arange(n_restarts)
    pairwise[:, idx, idx] = 0.0
    return (to_orig + pairwise.sum(axis=(1, 2))) / n_restarts**2


@dataclass
class CandidatePool:
    """Per-candidate VAP scores plus the pairwise KL and similarity tables.

    `kl[j, i] = KL(h(x_j) || h(x_i))`; `sim` is symmetric.
    """

    vap: np.ndarray
    kl: np.ndarray
    sim: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        self.vap = np.asarray(self.vap, dtype=np.float64)
        self.kl = np.asarray(self.kl, dtype=np.float64)
        self.sim = np.asarray(self.sim, dtype=np.float64)
        n = self.vap.shape[0]
        if self.ids is None:
            self.ids = np.arange(n)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        InputCheck.eq(self.kl.shape, (n, n), "KL table must be square over the pool")
        InputCheck.eq(self.sim.shape, (n, n), "similarity table must be square over the pool")
        InputCheck.eq(self.ids.shape, (n,), "one id per candidate")
        InputCheck.true((self.vap >= 0).all(), "VAP scores must be non-negative")
        InputCheck.true((self.kl >= 0).all(), "KL entries must be non-negative")
        InputCheck.true(np.all(np.diag(self.kl) == 0), "KL diagonal must be zero")
        InputCheck.true(np.isfinite(self.sim).all(), "similarities must be finite")
        InputCheck.true((self.sim >= 0).all(), "similarities must be non-negative")
        InputCheck.true(np.array_equal(self.sim, self.sim.T), "similarity must be symmetric")

    def __len__(self) -> int:
        return self.vap.shape[0]

    @staticmethod
    def from_outputs(
        original: np.ndarray, perturbed: np.ndarray, ids: Optional[Sequence[int]] = None
    ) -> "CandidatePool":
        original = np.asarray(original, dtype=np.float64)
        perturbed = np.asarray(perturbed, dtype=np.float64)
        InputCheck.eq(perturbed.ndim, 3, "perturbed outputs must be (n, N, K)")
        return CandidatePool(
            vap=vap_scores_from(original, perturbed),
            kl=kl_table(original),
            sim=similarity_table(original),
            ids=None if ids is None else np.asarray(ids),
        )

    @staticmethod
    def from_bundles(bundles: BundleSet, ids: Optional[Sequence[int]] = None) -> "CandidatePool":
        return CandidatePool.from_outputs(bundles.original, bundles.perturbed, ids)


@dataclass(frozen=True)
class Normalization:
    vap_min: float
    vap_range: float
    d_max: float
    r_max: float

    def vap(self, raw):
        if self.vap_range <= 0:
            return np.zeros_like(raw, dtype=np.float64)
        return (raw - self.vap_min) / self.vap_range

    def diversity(self, raw):
        return raw / self.d_max if self.d_max > 0 else np.zeros_like(raw, dtype=np.float64)

    def representativeness(self, raw):
        return raw / self.r_max if self.r_max > 0 else np.zeros_like(raw, dtype=np.float64)


def normalize_scores(pool: CandidatePool) -> Normalization:
    """Per-cycle constants: min-max for VAP, max pairwise KL, max first-step coverage gain."""
    InputCheck.gt(len(pool), 0, "cannot normalize an empty pool")
    vap_min = float(pool.vap.min())
    return Normalization(
        vap_min=vap_min,
        vap_range=float(pool.vap.max()) - vap_min,
        d_max=float(pool.kl.max()),
        r_max=float(pool.sim.sum(axis=1).max()),
    )


class SelectionState:
    """Selected set S with the min-divergence and max-similarity caches."""

    def __init__(self, pool: CandidatePool, norm: Optional[Normalization] = None):
        self.pool = pool
        self.norm = normalize_scores(pool) if norm is None else norm
        self.selected: List[int] = []
        self.is_selected = np.zeros(len(pool), dtype=bool)
        # m-[i] = min over S of D(x, x_i); +inf while S is empty
        self.min_div = np.full(len(pool), np.inf)
        # m+[k] = max over S of s_kj; 0 while S is empty
        self.max_sim = np.zeros(len(pool))
        self.gain = 0.0

    def add(self, i: int, gain: float = 0.0):
        InputCheck.false(self.is_selected[i], f"candidate {i} already selected")
        self.selected.append(i)
        self.is_selected[i] = True
        self.min_div = np.minimum(self.min_div, self.pool.kl[i])
        self.max_sim = np.maximum(self.max_sim, self.pool.sim[i])
        self.gain += gain

    @staticmethod
    def naive_caches(pool: CandidatePool, selected: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        if not selected:
            return np.full(len(pool), np.inf), np.zeros(len(pool))
        idx = list(selected)
        return pool.kl[idx, :].min(axis=0), pool.sim[:, idx].max(axis=1)

    def copy(self) -> "SelectionState":
        other = SelectionState(self.pool, self.norm)
        other.selected = list(self.selected)
        other.is_selected = self.is_selected.copy()
        other.min_div = self.min_div.copy()
        other.max_sim = self.max_sim.copy()
        other.gain = self.gain
        return other


def _check_candidate(state: SelectionState, i: int):
    InputCheck.true(0 <= i < len(state.pool), f"candidate {i} out of range")
    InputCheck.false(state.is_selected[i], f"candidate {i} already selected")


def diversity_score(state: SelectionState, i: int) -> float:
    _check_candidate(state, i)
    if not state.selected:
        return state.norm.d_max
    return float(state.min_div[i])


def representativeness_score(state: SelectionState, i: int) -> float:
    _check_candidate(state, i)
    return float(np.maximum(0.0, state.pool.sim[i] - state.max_sim).sum())


@dataclass
class GainParts:
    vap: float
    diversity: float
    representativeness: float
    vap_norm: float
    diversity_norm: float
    representativeness_norm: float
    gain: float


def _combine(w: MixWeights, v, d, r):
    return w.alpha * v + w.beta * d + w.gamma * r


def marginal_gain_parts(state: SelectionState, i: int, w: MixWeights) -> GainParts:
    raw_v = float(state.pool.vap[i])
    raw_d = diversity_score(state, i)
    raw_r = representativeness_score(state, i)
    v = float(state.norm.vap(raw_v))
    d = float(state.norm.diversity(raw_d))
    r = float(state.norm.representativeness(raw_r))
    return GainParts(raw_v, raw_d, raw_r, v, d, r, float(_combine(w, v, d, r)))


def marginal_gain(state: SelectionState, i: int, w: MixWeights) -> float:
    return marginal_gain_parts(state, i, w).gain


def all_gains(state: SelectionState, w: MixWeights) -> np.ndarray:
    """Gains of every candidate at once; selected candidates get -inf."""
    pool, norm = state.pool, state.norm
    raw_d = state.min_div if state.selected else np.full(len(pool), norm.d_max)
    raw_r = np.maximum(0.0, pool.sim - state.max_sim[None, :]).sum(axis=1)
    gains = _combine(
        w, norm.vap(pool.vap), norm.diversity(raw_d), norm.representativeness(raw_r)
    )
    return np.where(state.is_selected, -np.inf, gains)


@dataclass
class SelectionResult:
    sampler: str
    ids: List[int]
    steps: List[Dict[str, Any]] = field(default_factory=list)
    accumulated_gain: Optional[float] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def dump(self, path: PathLike):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @staticmethod
    def load(path: PathLike) -> "SelectionResult":
        with open(path, "r") as f:
            return SelectionResult(**json.load(f))


def _argmax_lowest_id(gains: np.ndarray, ids: np.ndarray) -> int:
    best = gains.max()
    ties = np.flatnonzero(gains == best)
    return int(ties[np.argmin(ids[ties])])


def greedy_select(pool: CandidatePool, budget: int, w: MixWeights) -> SelectionResult:
    InputCheck.ge(budget, 0, "budget must be non-negative")
    if budget > len(pool):
        SEL_LOG.warning(f"budget {budget} exceeds pool size {len(pool)}; selecting all")
        budget = len(pool)

    state = SelectionState(pool)
    steps = []
    for _ in range(budget):
        gains = all_gains(state, w)
        pick = _argmax_lowest_id(gains, pool.ids)
        parts = marginal_gain_parts(state, pick, w)
        state.add(pick, parts.gain)
        steps.append(
            {"id": int(pool.ids[pick]), **asdict(parts), "accumulated": state.gain}
        )
    SEL_LOG.debug(f"greedy picked {len(steps)} candidates, f(S) = {state.gain:.6f}")
    return SelectionResult(
        sampler="s3",
        ids=[int(pool.ids[i]) for i in state.selected],
        steps=steps,
        accumulated_gain=state.gain,
        params={"alpha": w.alpha, "beta": w.beta, "budget": budget},
    )


def ordered_value(pool: CandidatePool, order: Sequence[int], w: MixWeights,
                  norm: Optional[Normalization] = None) -> float:
    """Accumulated gain of inserting `order` one by one into an empty set."""
    state = SelectionState(pool, norm)
    for i in order:
        state.add(i, marginal_gain(state, i, w))
    return state.gain


def brute_force_best_subset(
    pool: CandidatePool, budget: int, w: MixWeights
) -> Tuple[Tuple[int, ...], float]:
    """Exhaustive oracle: best size-B subset, each scored by its best insertion order."""
    n = len(pool)
    InputCheck.true(0 < budget <= n, f"budget must be in [1, {n}]")
    if budget > MAX_ORACLE_BUDGET or math.comb(n, budget) > MAX_SUBSETS:
        raise InvalidInputError(
            f"instance too large for brute force: n={n}, budget={budget}"
        )
    norm = normalize_scores(pool)
    best_set, best_value = None, -np.inf
    for subset in itertools.combinations(range(n), budget):
        value = max(
            ordered_value(pool, order, w, norm)
            for order in itertools.permutations(subset)
        )
        if value > best_value:
            best_set, best_value = subset, value
    return best_set, float(best_value)
