"""
Datasets Module
Deterministic toy conditional datasets

mixture: labelled draws from a GaussianMixtureSpec, no prompt.
infill:  the same draws plus a prompt that is a copy of x1 with one
         contiguous span masked out (sentinel 0.0) and a parallel 0/1 mask
         vector appended, so prompt_dim = 2 * D.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from analytic_oracle import GaussianMixtureSpec, exact_sample
from velocity_model import Condition, ConditionBatch

logger = logging.getLogger(__name__)

MASK_SENTINEL = 0.0


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    mixture: GaussianMixtureSpec
    n_items: int
    seed: int = 0
    mask_lo: float = 0.7
    mask_hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mixture", "infill"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not 0.0 <= self.mask_lo <= self.mask_hi <= 1.0:
            raise ValueError(f"need 0 <= mask_lo <= mask_hi <= 1, got {self.mask_lo}, {self.mask_hi}")
        if self.n_items < 0:
            raise ValueError(f"n_items must be >= 0, got {self.n_items}")

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def prompt_dim(self) -> int:
        return 2 * self.dim if self.kind == "infill" else 0


@dataclass
class ConditionalDataset:
    """
    Generated items, held as arrays

    Iterating (or indexing) yields (x1, Condition) pairs.
    """
    x: np.ndarray
    labels: np.ndarray
    prompts: Optional[np.ndarray] = None
    mask_ratios: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Tuple[np.ndarray, Condition]:
        prompt = None if self.prompts is None else self.prompts[i]
        return self.x[i], Condition(int(self.labels[i]), prompt)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, Condition]]:
        for i in range(len(self)):
            yield self[i]

    @property
    def prompt_dim(self) -> int:
        return 0 if self.prompts is None else self.prompts.shape[1]

    def condition_batch(self, index: np.ndarray) -> ConditionBatch:
        """Encoded conditions for the selected rows, before any dropout"""
        index = np.asarray(index)
        n = index.shape[0]
        if self.prompts is None:
            return ConditionBatch(self.labels[index].astype(np.int64), np.zeros((n, 0)), np.zeros(n))
        return ConditionBatch(self.labels[index].astype(np.int64), self.prompts[index].copy(), np.ones(n))


def _draw_labelled(spec: DatasetSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    labels = rng.choice(spec.mixture.num_components, size=spec.n_items, p=spec.mixture.weights)
    x = exact_sample(spec.mixture, labels, rng) if spec.n_items else np.zeros((0, spec.dim))
    return x, labels.astype(np.int64)


def make_mixture_dataset(spec: DatasetSpec) -> ConditionalDataset:
    """Labels drawn with probability pi, points from their component"""
    rng = np.random.default_rng(spec.seed)
    x, labels = _draw_labelled(spec, rng)
    logger.info(f"Generated mixture dataset: {len(labels)} items, K={spec.mixture.num_components}, D={spec.dim}")
    return ConditionalDataset(x, labels)


def masked_count(ratio: float, dim: int, lo: float, hi: float) -> int:
    """Number of masked coordinates for a drawn ratio, kept inside [lo*D, hi*D]"""
    count = int(np.rint(ratio * dim))
    lo_count, hi_count = int(np.ceil(lo * dim - 1e-9)), int(np.floor(hi * dim + 1e-9))
    if lo_count <= hi_count:
        count = min(max(count, lo_count), hi_count)
    return min(max(count, 0), dim)


def make_infill_dataset(spec: DatasetSpec) -> ConditionalDataset:
    """
    Mixture items plus a masked-copy prompt

    Each item draws r ~ U(mask_lo, mask_hi), masks a contiguous span of
    masked_count(r) coordinates at a uniform start offset, and stores
    [values with masked entries = sentinel, mask flags].
    """
    if spec.dim < 2:
        raise ValueError(f"infill needs D >= 2, got {spec.dim}")
    rng = np.random.default_rng(spec.seed)
    x, labels = _draw_labelled(spec, rng)
    prompts, ratios = infill_prompts(x, rng, spec.mask_lo, spec.mask_hi)
    logger.info(f"Generated infill dataset: {len(x)} items, mean mask ratio {ratios.mean() if len(x) else 0.0:.3f}")
    return ConditionalDataset(x, labels, prompts, ratios)


def infill_prompts(x: np.ndarray, rng: np.random.Generator, mask_lo: float,
                   mask_hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Masked-copy prompts (n, 2D) for the rows of x, and the drawn mask ratios"""
    n, d = x.shape
    ratios = rng.uniform(mask_lo, mask_hi, size=n)
    prompts = np.zeros((n, 2 * d))
    for i in range(n):
        count = masked_count(ratios[i], d, mask_lo, mask_hi)
        start = int(rng.integers(0, d - count + 1))
        mask = np.zeros(d)
        mask[start:start + count] = 1.0
        prompts[i, :d] = np.where(mask > 0, MASK_SENTINEL, x[i])
        prompts[i, d:] = mask
    return prompts, ratios


def make_dataset(spec: DatasetSpec) -> ConditionalDataset:
    if spec.kind == "infill":
        return make_infill_dataset(spec)
    return make_mixture_dataset(spec)
