"""Two-domain datasets, splits and every on-disk format.

CSV files carry a JSON sidecar (`<stem>.meta.json`) that fixes the column layout; floats are
written with 17 significant digits and parsed round-trip so reads are bit-exact.
"""

import json
import math
import os
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from activeda.error import ConfigError, InputCheck, InvalidInputError
from activeda.logging import DATA_LOG
from activeda.util import derive_seed

DOMAINS = ("source", "target")
FLOAT_FORMAT = "%.17g"
PROB_SUM_TOL = 1e-6

# derived-seed streams of one generator seed
TARGET_STREAM = 1
TEST_STREAM = 2
BLOBS_SOURCE_STREAM = 3


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    domain: str
    n_classes: int
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        InputCheck.eq(self.x.ndim, 2, "features must be an (n, d) matrix")
        InputCheck.eq(self.x.shape[0], self.y.shape[0], "one label per sample")
        InputCheck.true(self.domain in DOMAINS, f"domain must be one of {DOMAINS}")
        InputCheck.ge(self.n_classes, 2, "n_classes")
        InputCheck.true(np.isfinite(self.x).all(), "features must be finite")
        InputCheck.true(
            ((self.y >= 0) & (self.y < self.n_classes)).all(), "labels out of range"
        )

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.domain, self.n_classes, dict(self.meta))


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    counts = [n // n_classes + (1 if c < n % n_classes else 0) for c in range(n_classes)]
    return np.repeat(np.arange(n_classes), counts)


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    return x @ np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class TwoMoons:
    """Outer arc (cos t, sin t) for class 0, inner arc (1 - cos t, 0.5 - sin t) for class 1."""

    rotation_deg: float = 30.0
    noise_sd: float = 0.1

    def draw(self, n: int, rng: np.random.Generator, rotated: bool) -> Tuple[np.ndarray, np.ndarray]:
        y = _balanced_labels(n, 2)
        t = rng.uniform(0.0, math.pi, size=n)
        x = np.where(
            (y == 0)[:, None],
            np.stack([np.cos(t), np.sin(t)], axis=1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
        )
        if self.noise_sd > 0:
            x = x + rng.normal(0.0, self.noise_sd, size=x.shape)
        return (rotate(x, self.rotation_deg) if rotated else x), y


def gen_two_moons_shift(
    n_per_domain: int, rotation_deg: float, noise_sd: float, seed: int
) -> Tuple[Dataset, Dataset]:
    InputCheck.ge(n_per_domain, 4, "n_per_domain")
    InputCheck.ge(noise_sd, 0, "noise_sd")
    moons = TwoMoons(rotation_deg, noise_sd)
    meta = {"generator": "two_moons", "rotation_deg": rotation_deg, "noise_sd": noise_sd, "seed": seed}
    xs, ys = moons.draw(n_per_domain, np.random.default_rng(seed), rotated=False)
    xt, yt = moons.draw(
        n_per_domain, np.random.default_rng(derive_seed(seed, TARGET_STREAM)), rotated=True
    )
    return Dataset(xs, ys, "source", 2, meta), Dataset(xt, yt, "target", 2, meta)


@dataclass(frozen=True)
class Blobs:
    means: np.ndarray  # (K, d)
    direction: np.ndarray  # (d,), unit
    mean_shift: float

    @staticmethod
    def create(n_classes: int, dim: int, mean_shift: float, separation: float, seed: int) -> "Blobs":
        rng = np.random.default_rng(seed)
        means = rng.normal(0.0, separation, size=(n_classes, dim))
        direction = rng.normal(size=dim)
        return Blobs(means, direction / np.linalg.norm(direction), mean_shift)

    def draw(self, n: int, rng: np.random.Generator, shifted: bool) -> Tuple[np.ndarray, np.ndarray]:
        y = _balanced_labels(n, self.means.shape[0])
        centers = self.means[y] + (self.mean_shift * self.direction if shifted else 0.0)
        return centers + rng.normal(size=centers.shape), y


def gen_blobs_shift(
    n: int, n_classes: int, dim: int, mean_shift: float, seed: int, separation: float = 5.0
) -> Tuple[Dataset, Dataset]:
    InputCheck.ge(n_classes, 2, "n_classes")
    InputCheck.ge(dim, 2, "dim")
    InputCheck.ge(n, n_classes, "need at least one sample per class")
    blobs = Blobs.create(n_classes, dim, mean_shift, separation, seed)
    meta = {"generator": "blobs", "mean_shift": mean_shift, "separation": separation, "seed": seed}
    xs, ys = blobs.draw(n, np.random.default_rng(derive_seed(seed, BLOBS_SOURCE_STREAM)), shifted=False)
    xt, yt = blobs.draw(n, np.random.default_rng(derive_seed(seed, TARGET_STREAM)), shifted=True)
    return (
        Dataset(xs, ys, "source", n_classes, meta),
        Dataset(xt, yt, "target", n_classes, meta),
    )


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    quotas = counts * (total / counts.sum())
    alloc = np.floor(quotas).astype(np.int64)
    order = np.argsort(-(quotas - alloc), kind="stable")
    alloc[order[: total - alloc.sum()]] += 1
    return alloc


def split_train_val(ds: Dataset, fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Seeded stratified split; both halves keep the original sample order."""
    InputCheck.ge(len(ds), 5, "split_train_val needs at least 5 samples")
    InputCheck.true(0 < fraction < 1, "train fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n_train = int(round(fraction * len(ds)))
    classes, counts = np.unique(ds.y, return_counts=True)
    if (counts < 2).any():
        DATA_LOG.warning(
            f"classes {classes[counts < 2].tolist()} have < 2 members; splitting unstratified"
        )
        train_idx = rng.permutation(len(ds))[:n_train]
    else:
        alloc = _largest_remainder(counts, n_train)
        train_idx = np.concatenate(
            [rng.permutation(np.flatnonzero(ds.y == c))[:k] for c, k in zip(classes, alloc)]
        )
    in_train = np.zeros(len(ds), dtype=bool)
    in_train[train_idx] = True
    return ds.subset(np.flatnonzero(in_train)), ds.subset(np.flatnonzero(~in_train))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @staticmethod
    def fit(x: np.ndarray) -> "Standardizer":
        scale = x.std(axis=0)
        return Standardizer(x.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def __call__(self, ds: Dataset) -> Dataset:
        return Dataset((ds.x - self.mean) / self.scale, ds.y, ds.domain, ds.n_classes, ds.meta)


@dataclass
class Domains:
    source: Dataset
    target: Dataset  # target-train pool before the train/val split
    test: Dataset


def make_domains(data_cfg, seed: int) -> Domains:
    """Build source, target and an independent target test draw from the `data` config."""
    gen = data_cfg["generator"]
    n_test = data_cfg["n_test"] or data_cfg["n_per_domain"]
    test_rng = np.random.default_rng(derive_seed(seed, TEST_STREAM))
    if gen == "two_moons":
        source, target = gen_two_moons_shift(
            data_cfg["n_per_domain"], data_cfg["rotation_deg"], data_cfg["noise_sd"], seed
        )
        xt, yt = TwoMoons(data_cfg["rotation_deg"], data_cfg["noise_sd"]).draw(
            n_test, test_rng, rotated=True
        )
        test = Dataset(xt, yt, "target", 2, target.meta)
    elif gen == "blobs":
        args = (data_cfg["n_classes"], data_cfg["dim"], data_cfg["mean_shift"])
        source, target = gen_blobs_shift(
            data_cfg["n_per_domain"], *args, seed, separation=data_cfg["separation"]
        )
        blobs = Blobs.create(*args, data_cfg["separation"], seed)
        xt, yt = blobs.draw(n_test, test_rng, shifted=True)
        test = Dataset(xt, yt, "target", data_cfg["n_classes"], target.meta)
    elif gen == "csv":
        for key in ("source_path", "target_path", "test_path"):
            if not data_cfg[key]:
                raise ConfigError(f"data.{key}: required when data.generator=csv")
        source = read_dataset(data_cfg["source_path"])
        target = read_dataset(data_cfg["target_path"])
        test = read_dataset(data_cfg["test_path"])
        InputCheck.eq(source.dim, target.dim, "source/target feature dimension")
        InputCheck.eq(source.dim, test.dim, "source/test feature dimension")
        InputCheck.eq(source.n_classes, target.n_classes, "source/target n_classes")
    else:
        raise ConfigError(f"data.generator: unknown generator {gen}")
    DATA_LOG.info(f"{gen}: |source| = {len(source)}, |target| = {len(target)}, |test| = {len(test)}")
    return Domains(source, target, test)


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _write_sidecar(path: PathLike, meta: Dict[str, Any]):
    with open(sidecar_path(path), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def _read_sidecar(path: PathLike) -> Dict[str, Any]:
    side = sidecar_path(path)
    if not side.exists():
        raise InvalidInputError(f"missing sidecar {side} for {path}")
    with open(side, "r") as f:
        return json.load(f)


def _read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_dataset(ds: Dataset, path: PathLike):
    frame = pd.DataFrame(ds.x, columns=[f"f{j}" for j in range(ds.dim)])
    frame.insert(0, "label", ds.y)
    frame.insert(0, "domain", ds.domain)
    frame.insert(0, "id", np.arange(len(ds)))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    _write_sidecar(path, {"n_classes": ds.n_classes, "dim": ds.dim, "n": len(ds), **ds.meta})


def read_dataset(path: PathLike) -> Dataset:
    meta = _read_sidecar(path)
    frame = _read_csv(path)
    features = [f"f{j}" for j in range(meta["dim"])]
    expected = ["id", "domain", "label", *features]
    if list(frame.columns) != expected:
        raise InvalidInputError(f"{path}: columns {list(frame.columns)} != {expected}")
    domains = frame["domain"].unique()
    InputCheck.eq(len(domains), 1, f"{path}: one domain per file")
    extra = {k: v for k, v in meta.items() if k not in ("n_classes", "dim", "n")}
    return Dataset(
        frame[features].to_numpy(dtype=np.float64),
        frame["label"].to_numpy(dtype=np.int64),
        str(domains[0]),
        int(meta["n_classes"]),
        extra,
    )


@dataclass
class ExternalScores:
    """Model outputs supplied by an external model; feeds selection without a network."""

    ids: np.ndarray
    original: np.ndarray  # (n, K)
    perturbed: np.ndarray  # (n, N, K)
    embeddings: Optional[np.ndarray] = None  # (n, E)
    disc: Optional[np.ndarray] = None  # (n,)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def layout(self) -> Dict[str, int]:
        return {
            "K": int(self.original.shape[1]),
            "N": int(self.perturbed.shape[1]),
            "E": 0 if self.embeddings is None else int(self.embeddings.shape[1]),
            "disc": self.disc is not None,
        }


def score_columns(K: int, N: int, E: int, disc: bool) -> List[str]:
    cols = ["id", *(f"p{k}" for k in range(K))]
    for r in range(1, N + 1):
        cols += [f"q{r}_{k}" for k in range(K)]
    cols += [f"e{j}" for j in range(E)]
    return cols + (["disc"] if disc else [])


def write_external_scores(scores: ExternalScores, path: PathLike):
    layout = scores.layout
    n = len(scores)
    blocks = [scores.ids.reshape(n, 1), scores.original, scores.perturbed.reshape(n, -1)]
    if scores.embeddings is not None:
        blocks.append(scores.embeddings)
    if scores.disc is not None:
        blocks.append(scores.disc.reshape(n, 1))
    frame = pd.DataFrame(np.concatenate(blocks, axis=1), columns=score_columns(**layout))
    frame["id"] = scores.ids.astype(np.int64)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    _write_sidecar(path, {**layout, "columns": list(frame.columns)})


def _check_block(block: np.ndarray, name: str):
    for row, values in enumerate(block):
        if not np.isfinite(values).all():
            raise InvalidInputError(f"row {row}: {name} has missing or non-finite entries")
        if (values < 0).any() or (values > 1).any():
            raise InvalidInputError(f"row {row}: {name} has entries outside [0, 1]")
        if abs(values.sum() - 1.0) > PROB_SUM_TOL:
            raise InvalidInputError(f"row {row}: {name} sums to {values.sum():.9g}, not 1")


def load_external_scores(path: PathLike) -> ExternalScores:
    meta = _read_sidecar(path)
    for key in ("K", "N", "E", "disc"):
        if key not in meta:
            raise InvalidInputError(f"{sidecar_path(path)}: missing '{key}'")
    K, N, E, has_disc = int(meta["K"]), int(meta["N"]), int(meta["E"]), bool(meta["disc"])
    InputCheck.ge(K, 2, "score file K")
    InputCheck.ge(N, 1, "score file N")
    frame = _read_csv(path)
    expected = score_columns(K, N, E, has_disc)
    if list(frame.columns) != expected:
        raise InvalidInputError(
            f"{path}: schema error, header declares K={K} N={N} E={E} disc={has_disc} "
            f"but columns are {list(frame.columns)}"
        )

    ids = frame["id"].to_numpy()
    if not np.isfinite(ids.astype(np.float64)).all() or len(np.unique(ids)) != len(ids):
        raise InvalidInputError(f"{path}: ids must be present and distinct")
    original = frame[[f"p{k}" for k in range(K)]].to_numpy(dtype=np.float64)
    _check_block(original, "p")
    perturbed = np.empty((len(frame), N, K))
    for r in range(1, N + 1):
        block = frame[[f"q{r}_{k}" for k in range(K)]].to_numpy(dtype=np.float64)
        _check_block(block, f"perturbation block q{r}")
        perturbed[:, r - 1] = block

    embeddings = None
    if E:
        embeddings = frame[[f"e{j}" for j in range(E)]].to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~np.isfinite(embeddings).all(axis=1))
        if len(bad):
            raise InvalidInputError(f"row {bad[0]}: embedding has missing or non-finite entries")
    disc = None
    if has_disc:
        disc = frame["disc"].to_numpy(dtype=np.float64)
        bad = np.flatnonzero(~((disc >= 0) & (disc <= 1)))
        if len(bad):
            raise InvalidInputError(f"row {bad[0]}: disc must lie in [0, 1]")
    DATA_LOG.info(f"Loaded {len(frame)} scored candidates from {path} (K={K}, N={N}, E={E})")
    return ExternalScores(ids.astype(np.int64), original, perturbed, embeddings, disc)


def write_frame(rows: Sequence[Dict[str, Any]], path: PathLike, columns: Sequence[str] = None):
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_manifest(manifest: Dict[str, Any], path: PathLike):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(path: PathLike) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise InvalidInputError(f"missing manifest {path}")
    with open(path, "r") as f:
        return json.load(f)
