"""List samples, position vectors and the permutation helpers shared by every module.

Positions are 0-based: ``pos[i] == r`` means item ``i`` is displayed at rank
``r``.  Every position vector is a permutation of ``0..n-1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite."""


def is_permutation(pos) -> bool:
    pos = np.asarray(pos)
    if pos.ndim != 1 or not np.issubdtype(pos.dtype, np.integer):
        return False
    return np.array_equal(np.sort(pos), np.arange(pos.size))


def as_positions(pos) -> np.ndarray:
    arr = np.asarray(pos)
    if arr.ndim != 1:
        raise ContractError(f"position vector must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ContractError("position vector has non-integer entries")
    arr = arr.astype(np.int64)
    if not is_permutation(arr):
        raise ContractError(f"not a permutation of 0..{arr.size - 1}: {arr.tolist()}")
    return arr


def identity_positions(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)


def ranked_items(pos) -> np.ndarray:
    """Inverse permutation: entry ``r`` is the item displayed at rank ``r``."""
    pos = np.asarray(pos, dtype=np.int64)
    order = np.empty_like(pos)
    order[pos] = np.arange(pos.size)
    return order


def scores_to_positions(scores, tie_ref) -> np.ndarray:
    """Rank items by descending score.

    Ties are broken by ascending ``tie_ref`` (the position each item held in
    the input list), so equal scores leave the input order untouched.

    >>> scores_to_positions([0.2, 0.9, 0.5], [0, 1, 2]).tolist()
    [2, 0, 1]
    """
    scores = np.asarray(scores, dtype=np.float64)
    tie_ref = as_positions(tie_ref)
    if scores.ndim != 1 or scores.shape[0] != tie_ref.shape[0]:
        raise ContractError(
            f"scores length {scores.shape} does not match tie_ref length {tie_ref.shape[0]}"
        )
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores contain NaN or Inf")
    # lexsort: last key is primary
    order = np.lexsort((tie_ref, -scores))
    return positions_from_order(order)


def positions_from_order(order) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    pos = np.empty_like(order)
    pos[order] = np.arange(order.size)
    return pos


def adjacent_swap(pos, k: int) -> np.ndarray:
    """Exchange the items sitting at ranks ``k`` and ``k + 1``."""
    pos = as_positions(pos)
    n = pos.size
    if n < 2:
        raise ContractError("adjacent_swap needs a list of at least two items")
    if not 0 <= k <= n - 2:
        raise ContractError(f"swap index {k} out of range 0..{n - 2}")
    out = pos.copy()
    a = int(np.flatnonzero(pos == k)[0])
    b = int(np.flatnonzero(pos == k + 1)[0])
    out[a], out[b] = k + 1, k
    return out


@dataclass(frozen=True, eq=False)
class ListSample:
    """One displayed list: item features, user features, clicks and initial order."""

    items: np.ndarray
    user: np.ndarray
    labels: np.ndarray
    init_pos: np.ndarray
    list_id: object = None

    @classmethod
    def build(cls, items, user=None, labels=None, init_pos=None, list_id=None) -> "ListSample":
        items = np.asarray(items, dtype=np.float64)
        if items.ndim == 1:
            items = items[:, None]
        n = items.shape[0]
        user = np.zeros(0) if user is None else np.asarray(user, dtype=np.float64).reshape(-1)
        labels = np.zeros(n) if labels is None else np.asarray(labels, dtype=np.float64)
        if init_pos is None:
            init_pos = identity_positions(n)
        init_pos = np.asarray(init_pos)
        if np.issubdtype(init_pos.dtype, np.integer):
            init_pos = init_pos.astype(np.int64)
        return cls(items, user, labels, init_pos, list_id)

    @property
    def n(self) -> int:
        return int(self.items.shape[0])

    def __eq__(self, other):
        if not isinstance(other, ListSample):
            return NotImplemented
        return (
            self.list_id == other.list_id
            and _same(self.items, other.items)
            and _same(self.user, other.user)
            and _same(self.labels, other.labels)
            and _same(self.init_pos, other.init_pos)
        )

    __hash__ = None  # type: ignore[assignment]


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a, b)


class Validation(NamedTuple):
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def validate_sample(s: ListSample) -> Validation:
    """Check a sample's invariants, reporting the first violation instead of raising."""
    items = np.asarray(s.items)
    if items.ndim != 2:
        return Validation(False, "items must be a 2-D matrix")
    n = items.shape[0]
    if n < 1:
        return Validation(False, "empty list")
    if not np.all(np.isfinite(items)):
        return Validation(False, "non-finite item feature")
    user = np.asarray(s.user)
    if user.ndim != 1:
        return Validation(False, "user features must be a vector")
    if not np.all(np.isfinite(user)):
        return Validation(False, "non-finite user feature")
    labels = np.asarray(s.labels)
    if labels.shape != (n,):
        return Validation(False, f"labels length {labels.shape} != {n}")
    if not np.all((labels == 0) | (labels == 1)):
        return Validation(False, "non-binary label")
    pos = np.asarray(s.init_pos)
    if pos.shape != (n,):
        return Validation(False, f"init_pos length {pos.shape} != {n}")
    if not is_permutation(pos):
        return Validation(False, "not a permutation")
    return Validation(True)


@dataclass
class Dataset:
    samples: list[ListSample] = field(default_factory=list)
    d_item: int = 0
    d_user: int = 0
    split_tag: str = "train"
    fixed_n: bool = False

    def __post_init__(self):
        if self.split_tag not in ("train", "valid", "test"):
            raise ConfigError(f"unknown split tag {self.split_tag!r}")
        if self.samples and not self.d_item:
            self.d_item = int(self.samples[0].items.shape[1])
            self.d_user = int(self.samples[0].user.shape[0])
        for i, s in enumerate(self.samples):
            check = validate_sample(s)
            if not check:
                raise ContractError(f"sample {i} ({s.list_id!r}): {check.reason}")
            if s.items.shape[1] != self.d_item or s.user.shape[0] != self.d_user:
                raise ContractError(
                    f"sample {i} has d_item={s.items.shape[1]}, d_user={s.user.shape[0]}; "
                    f"dataset expects {self.d_item}, {self.d_user}"
                )
        if self.fixed_n and len({s.n for s in self.samples}) > 1:
            raise ContractError("fixed_n dataset has lists of different lengths")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ListSample]:
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices: Sequence[int], split_tag: str | None = None) -> "Dataset":
        return Dataset(
            [self.samples[i] for i in indices],
            self.d_item,
            self.d_user,
            split_tag or self.split_tag,
            self.fixed_n,
        )

    def click_rate(self) -> float:
        total = sum(s.n for s in self.samples)
        return float(sum(s.labels.sum() for s in self.samples) / total) if total else 0.0


def length_groups(data: Sequence[ListSample], batch_size: int, rng=None) -> list[list[int]]:
    """Chunk list indices into batches of equal list length.

    Without ``rng`` the order is deterministic (by length, then index); with it,
    indices are shuffled inside each length and the batch order is shuffled.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    by_n: dict[int, list[int]] = {}
    for i, s in enumerate(data):
        by_n.setdefault(s.n, []).append(i)
    batches = []
    for n in sorted(by_n):
        idx = by_n[n]
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        batches += [idx[k:k + batch_size] for k in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches
