from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from activeda.error import InputCheck, SanityCheck, SelectionLeakError
from activeda.logging import LOOP_LOG
from activeda.nn.net import DANet, as_input


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        InputCheck.eq(self.x.ndim, 2, "features must be a matrix")
        InputCheck.eq(self.x.shape[0], self.y.shape[0], "one label per row")

    def __len__(self) -> int:
        return self.y.shape[0]

    @staticmethod
    def empty(dim: int) -> "LabeledSet":
        return LabeledSet(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @staticmethod
    def concat(*sets: "LabeledSet") -> "LabeledSet":
        return LabeledSet(
            np.concatenate([s.x for s in sets]), np.concatenate([s.y for s in sets])
        )


class LabelOracle:
    """Simulated labeling authority. Holds the hidden target-train labels."""

    def __init__(self, ids: Sequence[int], labels: Sequence[int]):
        InputCheck.eq(len(ids), len(labels), "one hidden label per id")
        self.__labels: Dict[int, int] = {int(i): int(l) for i, l in zip(ids, labels)}
        self.n_labeled = 0

    def label(self, ids: Sequence[int]) -> np.ndarray:
        labels = np.array([self.__labels[int(i)] for i in ids], dtype=np.int64)
        self.n_labeled += len(labels)
        return labels


@dataclass
class Pools:
    """D_s, D_t, D_u plus target validation/test sets.

    Target-train samples are addressed by id (row index of `target_x`); D_t and D_u partition
    those ids at all times.
    """

    source: LabeledSet
    target_x: np.ndarray
    oracle: LabelOracle
    val: LabeledSet
    test: LabeledSet
    labeled_ids: List[int] = field(default_factory=list)
    labeled_y: List[int] = field(default_factory=list)
    unlabeled_ids: List[int] = None

    def __post_init__(self):
        self.target_x = np.asarray(self.target_x, dtype=np.float64)
        if self.unlabeled_ids is None:
            self.unlabeled_ids = list(range(self.target_x.shape[0]))
        self.check_invariants()

    @property
    def dim(self) -> int:
        return self.target_x.shape[1]

    @property
    def n_target_train(self) -> int:
        return self.target_x.shape[0]

    def target_labeled(self) -> LabeledSet:
        if not self.labeled_ids:
            return LabeledSet.empty(self.dim)
        return LabeledSet(self.target_x[self.labeled_ids], np.array(self.labeled_y))

    def labeled(self) -> LabeledSet:
        """D_s union D_t."""
        return LabeledSet.concat(self.source, self.target_labeled())

    def unlabeled_x(self) -> np.ndarray:
        return self.target_x[self.unlabeled_ids]

    def oracle_label(self, ids: Sequence[int]) -> np.ndarray:
        pool = set(self.unlabeled_ids)
        leaked = [int(i) for i in ids if int(i) not in pool]
        if leaked:
            raise SelectionLeakError(f"ids not in the unlabeled pool: {leaked}")
        return self.oracle.label(ids)

    def label_and_move(self, ids: Sequence[int]) -> np.ndarray:
        """Algorithm step: ask the oracle, then move the ids from D_u to D_t."""
        labels = self.oracle_label(ids)
        chosen = set(int(i) for i in ids)
        SanityCheck.eq(len(chosen), len(ids), "duplicate ids in selection")
        self.labeled_ids.extend(int(i) for i in ids)
        self.labeled_y.extend(int(l) for l in labels)
        self.unlabeled_ids = [i for i in self.unlabeled_ids if i not in chosen]
        self.check_invariants()
        LOOP_LOG.debug(f"|D_t| = {len(self.labeled_ids)}, |D_u| = {len(self.unlabeled_ids)}")
        return labels

    def check_invariants(self):
        labeled, unlabeled = set(self.labeled_ids), set(self.unlabeled_ids)
        SanityCheck.true(not (labeled & unlabeled), "D_t and D_u must be disjoint")
        SanityCheck.eq(
            labeled | unlabeled,
            set(range(self.n_target_train)),
            "D_t and D_u must cover the target-train set",
        )
        SanityCheck.eq(len(self.labeled_ids), len(self.labeled_y), "D_t labels")


@torch.no_grad()
def evaluate(net: DANet, data: LabeledSet) -> float:
    """Argmax accuracy; ties go to the lowest class index."""
    InputCheck.gt(len(data), 0, "evaluate needs a non-empty set")
    probs = torch.softmax(net.class_logits(as_input(net, data.x)), dim=-1).numpy()
    return float((np.argmax(probs, axis=1) == data.y).mean())


@torch.no_grad()
def domain_accuracy(net: DANet, labeled_x: np.ndarray, unlabeled_x: np.ndarray) -> Optional[float]:
    """Discriminator accuracy at telling labeled-pool (1) from unlabeled (0) samples."""
    if len(labeled_x) == 0 or len(unlabeled_x) == 0:
        return None
    x = np.concatenate([labeled_x, unlabeled_x])
    truth = np.concatenate([np.ones(len(labeled_x)), np.zeros(len(unlabeled_x))])
    disc = torch.sigmoid(net.domain_logits(net.embed(as_input(net, x)))).numpy()
    return float(((disc > 0.5) == truth).mean())
