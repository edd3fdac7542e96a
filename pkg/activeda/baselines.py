"""Sampler registry: the submodular selector and the competing baselines.

Every sampler has the signature `(inputs: SelectionInputs, budget: int, params: SamplerParams)`
and returns a `SelectionResult`. Extra samplers can be registered from patch files with the
`@sampler` decorator (see `load_sampler_patches`).
"""

import os
from dataclasses import dataclass, field
from importlib.util import module_from_spec, spec_from_file_location
from inspect import signature
from types import FunctionType
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from multipledispatch import dispatch

from activeda.data import ExternalScores
from activeda.error import InputCheck, InvalidInputError, SanityCheck
from activeda.logging import SEL_LOG
from activeda.metrics import entropy_rows
from activeda.nn.net import DANet, predict_numpy
from activeda.perturb import VatConfig, make_bundles
from activeda.subsel import CandidatePool, MixWeights, SelectionResult, greedy_select

DISC_CLAMP = 1e-6

SAMPLERS: Dict[str, Callable] = {}
_LOADED_PATCHES = set()


class sampler:
    def __init__(self, name: str):
        self.name = name

    def __call__(self, fn: Callable) -> Callable:
        assert self.name not in SAMPLERS, f"Sampler {self.name} already exists."
        assert isinstance(
            fn, FunctionType
        ), f"sampler {fn} (aka {self.name}) should be a function."
        assert (
            len(signature(fn).parameters) == 3
        ), f"sampler {fn.__name__} (aka {self.name}) should implement fn(inputs, budget, params)."
        SAMPLERS[self.name] = fn
        return fn


def load_sampler_patches(patches: Union[None, str, Sequence[str]]) -> List[str]:
    """Import python files that register extra samplers; returns the new sampler names."""
    if not patches:
        return []
    patches = [patches] if isinstance(patches, str) else list(patches)
    before = set(SAMPLERS)
    for f in patches:
        InputCheck.true(isinstance(f, str), "select.patch must be a list of file locations.")
        InputCheck.true(os.path.isfile(f), f"select.patch: no such file {f}")
        if os.path.abspath(f) in _LOADED_PATCHES:
            continue
        _LOADED_PATCHES.add(os.path.abspath(f))
        spec = spec_from_file_location("activeda_sampler_patch", f)
        spec.loader.exec_module(module_from_spec(spec))
        SEL_LOG.info(f"Imported sampler patch: {f}")
    return sorted(set(SAMPLERS) - before)


@dataclass
class SelectionInputs:
    """Model outputs over the candidate pool, sorted by ascending id.

    Nothing here is derived from hidden labels.
    """

    ids: np.ndarray
    probs: np.ndarray  # (n, K)
    perturbed: Optional[np.ndarray] = None  # (n, N, K)
    embeddings: Optional[np.ndarray] = None  # (n, E)
    disc: Optional[np.ndarray] = None  # (n,)
    # embeddings of the labeled pool; k-center seeds
    labeled_embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = self.ids.shape[0]
        InputCheck.eq(len(np.unique(self.ids)), n, "candidate ids must be distinct")
        InputCheck.eq(self.probs.shape[0], n, "one distribution per candidate")
        order = np.argsort(self.ids, kind="stable")
        self.ids, self.probs = self.ids[order], self.probs[order]
        if self.perturbed is not None:
            self.perturbed = np.asarray(self.perturbed, dtype=np.float64)
            InputCheck.eq(self.perturbed.shape[0], n, "one bundle per candidate")
            self.perturbed = self.perturbed[order]
        if self.embeddings is not None:
            self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
            InputCheck.eq(self.embeddings.shape[0], n, "one embedding per candidate")
            self.embeddings = self.embeddings[order]
        if self.disc is not None:
            self.disc = np.asarray(self.disc, dtype=np.float64).reshape(-1)
            InputCheck.eq(self.disc.shape[0], n, "one discriminator output per candidate")
            InputCheck.true(
                ((self.disc >= 0) & (self.disc <= 1)).all(),
                "discriminator outputs must lie in [0, 1]",
            )
            self.disc = self.disc[order]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def require(self, attr: str, sampler_name: str) -> np.ndarray:
        value = getattr(self, attr)
        if value is None:
            raise InvalidInputError(f"sampler {sampler_name} needs {attr}, which is absent")
        return value


@dispatch(DANet, np.ndarray, np.ndarray, np.ndarray, VatConfig, int)
def make_selection_inputs(net, unlabeled_x, ids, labeled_x, vat_cfg, seed):
    out = predict_numpy(net, unlabeled_x)
    bundles = make_bundles(net, unlabeled_x, ids, vat_cfg, seed)
    labeled_emb = predict_numpy(net, labeled_x)["embeddings"] if len(labeled_x) else None
    return SelectionInputs(
        ids=ids,
        probs=out["probs"],
        perturbed=bundles.perturbed,
        embeddings=out["embeddings"],
        disc=out["disc"],
        labeled_embeddings=labeled_emb,
    )


@dispatch(ExternalScores)
def make_selection_inputs(scores):
    return SelectionInputs(
        ids=scores.ids,
        probs=scores.original,
        perturbed=scores.perturbed,
        embeddings=scores.embeddings,
        disc=scores.disc,
    )


@dataclass
class SamplerParams:
    seed: int = 0
    weights: MixWeights = field(default_factory=MixWeights)
    badge_deterministic: bool = False

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _top(scores: np.ndarray, budget: int, descending: bool = True) -> np.ndarray:
    # stable sort on positions keeps lowest-id-first among equal scores
    return np.argsort(-scores if descending else scores, kind="stable")[:budget]


def random_select(n: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    InputCheck.le(budget, n, "budget exceeds pool size")
    return rng.choice(n, size=budget, replace=False)


def entropy_select(probs: np.ndarray, budget: int) -> np.ndarray:
    return _top(entropy_rows(probs), budget)


def margins(probs: np.ndarray) -> np.ndarray:
    InputCheck.ge(probs.shape[1], 2, "margin needs K >= 2")
    top2 = np.sort(probs, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def margin_select(probs: np.ndarray, budget: int) -> np.ndarray:
    return _top(margins(probs), budget, descending=False)


def kcenter_select(
    embeddings: np.ndarray, budget: int, seeds: Optional[np.ndarray] = None
) -> np.ndarray:
    """Farthest-point traversal under Euclidean distance, starting from `seeds` as covered."""
    n = embeddings.shape[0]
    InputCheck.le(budget, n, "budget exceeds pool size")
    if seeds is None or len(seeds) == 0:
        dist = np.full(n, np.inf)
    else:
        diff = embeddings[:, None, :] - np.asarray(seeds)[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1)).min(axis=1)
    chosen = np.zeros(n, dtype=bool)
    picks = []
    for _ in range(budget):
        pick = int(np.argmax(np.where(chosen, -np.inf, dist)))
        picks.append(pick)
        chosen[pick] = True
        dist = np.minimum(dist, np.sqrt(((embeddings - embeddings[pick]) ** 2).sum(axis=1)))
    return np.array(picks, dtype=np.int64)


def aada_scores(probs: np.ndarray, disc: np.ndarray) -> np.ndarray:
    d = np.clip(disc, DISC_CLAMP, 1 - DISC_CLAMP)
    return entropy_rows(probs) * (1 - d) / d


def aada_select(probs: np.ndarray, disc: np.ndarray, budget: int) -> np.ndarray:
    return _top(aada_scores(probs, disc), budget)


def gradient_embeddings(probs: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Last-layer gradient under the predicted label: (p - onehot(argmax p)) (x) g(x)."""
    residual = probs.copy()
    residual[np.arange(len(probs)), np.argmax(probs, axis=1)] -= 1.0
    return (residual[:, :, None] * embeddings[:, None, :]).reshape(len(probs), -1)


def _seeding_weights(grad_emb: np.ndarray, centers: List[int], chosen: np.ndarray) -> np.ndarray:
    if not centers:
        weights = (grad_emb**2).sum(axis=1)
    else:
        diff = grad_emb[:, None, :] - grad_emb[centers][None, :, :]
        weights = (diff**2).sum(axis=-1).min(axis=1)
    # zero gradient embeddings are never drawn while a nonzero candidate remains
    live = ~chosen & (np.abs(grad_emb).sum(axis=1) > 0)
    if not live.any():
        live = ~chosen
    weights = np.where(live, weights, 0.0)
    if weights.sum() <= 0:
        SEL_LOG.warning("all k-means++ weights are zero; drawing uniformly")
        weights = live.astype(np.float64)
    return weights


def badge_select(
    grad_emb: np.ndarray,
    budget: int,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = False,
) -> np.ndarray:
    """k-means++ seeding on gradient embeddings; `deterministic` takes the heaviest point."""
    n = grad_emb.shape[0]
    InputCheck.le(budget, n, "budget exceeds pool size")
    InputCheck.true(deterministic or rng is not None, "badge needs an rng unless deterministic")
    chosen = np.zeros(n, dtype=bool)
    centers: List[int] = []
    for _ in range(budget):
        weights = _seeding_weights(grad_emb, centers, chosen)
        if deterministic:
            pick = int(np.argmax(weights))
        else:
            pick = int(rng.choice(n, p=weights / weights.sum()))
        centers.append(pick)
        chosen[pick] = True
    return np.array(centers, dtype=np.int64)


def _result(name: str, inputs: SelectionInputs, picks: np.ndarray,
            scores: Optional[np.ndarray] = None, **params) -> SelectionResult:
    steps = [
        {"id": int(inputs.ids[p]), **({} if scores is None else {"score": float(scores[p])})}
        for p in picks
    ]
    return SelectionResult(
        sampler=name,
        ids=[int(inputs.ids[p]) for p in picks],
        steps=steps,
        params={"budget": int(len(picks)), **params},
    )


@sampler("s3")
def sample_s3(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    perturbed = inputs.require("perturbed", "s3")
    pool = CandidatePool.from_outputs(inputs.probs, perturbed, ids=inputs.ids)
    return greedy_select(pool, budget, params.weights)


@sampler("random")
def sample_random(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    picks = random_select(len(inputs), budget, params.rng())
    return _result("random", inputs, picks, seed=params.seed)


@sampler("entropy")
def sample_entropy(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    picks = entropy_select(inputs.probs, budget)
    return _result("entropy", inputs, picks, entropy_rows(inputs.probs))


@sampler("margin")
def sample_margin(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    picks = margin_select(inputs.probs, budget)
    return _result("margin", inputs, picks, margins(inputs.probs))


@sampler("kcenter")
def sample_kcenter(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    picks = kcenter_select(
        inputs.require("embeddings", "kcenter"), budget, inputs.labeled_embeddings
    )
    return _result("kcenter", inputs, picks)


@sampler("aada")
def sample_aada(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    scores = aada_scores(inputs.probs, inputs.require("disc", "aada"))
    return _result("aada", inputs, _top(scores, budget), scores)


@sampler("badge")
def sample_badge(inputs: SelectionInputs, budget: int, params: SamplerParams) -> SelectionResult:
    grad_emb = gradient_embeddings(inputs.probs, inputs.require("embeddings", "badge"))
    picks = badge_select(
        grad_emb, budget, params.rng(), deterministic=params.badge_deterministic
    )
    return _result(
        "badge", inputs, picks, seed=params.seed, deterministic=params.badge_deterministic
    )


def run_sampler(
    name: str, inputs: SelectionInputs, budget: int, params: Optional[SamplerParams] = None
) -> SelectionResult:
    if name not in SAMPLERS:
        raise InvalidInputError(f"unknown sampler {name}; available: {sorted(SAMPLERS)}")
    InputCheck.ge(budget, 0, "budget must be non-negative")
    InputCheck.le(budget, len(inputs), f"budget exceeds the {len(inputs)} candidates")
    params = SamplerParams() if params is None else params
    result = SAMPLERS[name](inputs, budget, params)
    SanityCheck.eq(len(result.ids), budget, f"sampler {name} returned a wrong batch size")
    SanityCheck.eq(len(set(result.ids)), budget, f"sampler {name} returned duplicates")
    SEL_LOG.debug(f"{name} selected {result.ids}")
    return result
