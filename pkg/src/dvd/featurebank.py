"""Domain feature banks, cosine k-NN vicinities and the vicinity Gaussian prior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFeatureError, EmptyInputError, ParameterError, ShapeError

DOMAINS = ("source", "target")


class FeatureBank:
    """Immutable snapshot of encoded features for one domain.

    Rows are L2-normalised once at construction so every query is a single
    matrix-vector product.
    """

    def __init__(self, entries, domain: str, generation: int = 0):
        if domain not in DOMAINS:
            raise ParameterError(f"domain must be one of {DOMAINS}, got {domain!r}")
        entries = np.array(entries, dtype=np.float32)
        if entries.ndim != 2 or entries.shape[0] == 0:
            raise EmptyInputError("feature bank needs at least one entry")
        if entries.shape[1] == 0:
            raise ShapeError("feature dimension must be at least 1")
        norms = np.linalg.norm(entries.astype(np.float64), axis=1)
        if np.any(norms == 0):
            bad = int(np.flatnonzero(norms == 0)[0])
            raise DegenerateFeatureError(f"entry {bad} has zero norm")
        entries.setflags(write=False)
        self._entries = entries
        self._unit = entries.astype(np.float64) / norms[:, None]
        self.domain = domain
        self.generation = generation

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def count(self) -> int:
        return self._entries.shape[0]

    @property
    def dim(self) -> int:
        return self._entries.shape[1]

    def __len__(self):
        return self.count

    def dump(self) -> np.ndarray:
        return self._entries.copy()

    def similarities(self, query) -> np.ndarray:
        q = _unit(query)
        if q.shape[0] != self.dim:
            raise ShapeError(f"query dim {q.shape[0]} != bank dim {self.dim}")
        return np.clip(self._unit @ q, -1.0, 1.0)

    def knn(self, query, k: int, exclude: int | None = None) -> np.ndarray:
        return knn(self, query, k, exclude)


def build_bank(dataset, domain: str) -> FeatureBank:
    """Bank over ``dataset.features`` (or any 2-D array) in dataset order."""
    features = getattr(dataset, "features", dataset)
    features = np.asarray(features)
    if features.size == 0:
        raise EmptyInputError("cannot build a bank from an empty dataset")
    return FeatureBank(features, domain)


def refresh_bank(bank: FeatureBank, encoder, inputs) -> FeatureBank:
    """New snapshot holding ``encoder(inputs)``; the generation counter advances."""
    x = getattr(inputs, "features", inputs)
    if encoder.out_width != bank.dim:
        raise ShapeError(f"encoder width {encoder.out_width} != bank dim {bank.dim}")
    return FeatureBank(encoder(x), bank.domain, bank.generation + 1)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateFeatureError("zero-norm vector has no direction")
    return v / n


def cosine_sim(a, b) -> float:
    a, b = _unit(a), _unit(b)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, -1.0, 1.0))


def _tie_key(sims):
    # parallel vectors of different length should tie exactly; round-off in
    # the normalisation would otherwise order them arbitrarily
    return np.round(sims, 12)


def knn(bank: FeatureBank, query, k: int, exclude: int | None = None) -> np.ndarray:
    """Indices of the ``k`` most cosine-similar entries.

    Sorted by descending similarity, ties by ascending index.
    """
    usable = bank.count - (exclude is not None and 0 <= exclude < bank.count)
    if not 1 <= k <= usable:
        raise ParameterError(f"k={k} outside [1, {usable}]")
    sims = bank.similarities(query)
    if exclude is not None and 0 <= exclude < bank.count:
        sims = sims.copy()
        sims[exclude] = -np.inf
    # lexsort: last key is primary
    order = np.lexsort((np.arange(bank.count), -_tie_key(sims)))
    return order[:k]


def knn_batch(bank: FeatureBank, queries, k: int, exclude=None) -> np.ndarray:
    """Row-wise ``knn`` for a batch of queries; ``exclude`` is None or one index per row."""
    q = np.asarray(queries, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise DegenerateFeatureError("zero-norm query")
    if q.shape[1] != bank.dim:
        raise ShapeError(f"query dim {q.shape[1]} != bank dim {bank.dim}")
    usable = bank.count - (exclude is not None)
    if not 1 <= k <= usable:
        raise ParameterError(f"k={k} outside [1, {usable}]")
    sims = np.clip((q / norms[:, None]) @ bank._unit.T, -1.0, 1.0)
    if exclude is not None:
        sims[np.arange(len(q)), np.asarray(exclude)] = -np.inf
    # stable sort on -sim keeps ascending index among ties
    return np.argsort(-_tie_key(sims), axis=1, kind="stable")[:, :k]


@dataclass(frozen=True)
class VicinityPrior:
    """Diagonal Gaussian over a k-NN vicinity. Arrays are (d,) or (n, d)."""

    mean: np.ndarray
    var: np.ndarray
    k: int

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.var):
            raise ShapeError("prior mean and variance shapes differ")
        if np.any(np.asarray(self.var) < 0):
            raise ParameterError("prior variance must be non-negative")


def vicinity_moments(neighbors) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population variance over axis -2 (the neighbour axis)."""
    nb = np.asarray(neighbors, dtype=np.float64)
    mu = nb.mean(axis=-2)
    var = ((nb - mu[..., None, :]) ** 2).mean(axis=-2)
    return mu, var


def vicinity_prior(bank: FeatureBank, query, k: int, exclude: int | None = None) -> VicinityPrior:
    idx = knn(bank, query, k, exclude)
    mu, var = vicinity_moments(bank.entries[idx])
    return VicinityPrior(mu, var, k)


def vicinity_prior_batch(bank: FeatureBank, queries, k: int, exclude=None) -> VicinityPrior:
    idx = knn_batch(bank, queries, k, exclude)
    mu, var = vicinity_moments(bank.entries[idx])
    return VicinityPrior(mu, var, k)


def sample_prior(prior: VicinityPrior, rng: np.random.Generator) -> np.ndarray:
    """``mean + sqrt(var) * eps`` with standard-normal ``eps``; float32 result."""
    mu = np.asarray(prior.mean, dtype=np.float64)
    eps = rng.standard_normal(mu.shape)
    return (mu + np.sqrt(prior.var) * eps).astype(np.float32)
