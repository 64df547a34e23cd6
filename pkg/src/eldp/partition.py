"""Element partitions and the user/sample distances built on them.

Two users are element-neighbors when their data differ inside at most one
cluster of the partition, no matter how many items inside that cluster
change. Samples are compared up to a permutation of users, so the sample
distance is a minimum-cost matching problem over pairwise user distances.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AssignmentError, DimensionError, DomainError

Item = Hashable


@dataclass(frozen=True, eq=False)
class ElementPartition:
    """A total map from item identifiers to cluster indices ``1..K``."""

    assign: Mapping[Item, int]
    K: int = field(default=0)

    def __post_init__(self):
        assign = MappingProxyType(dict(self.assign))
        if not assign:
            raise DomainError("partition must cover at least one item")
        top = max(assign.values())
        K = self.K or top
        for item, k in assign.items():
            if not isinstance(k, (int, np.integer)) or not 1 <= k <= K:
                raise DomainError(f"cluster index {k!r} for item {item!r} outside [1, {K}]")
        object.__setattr__(self, "assign", assign)
        object.__setattr__(self, "K", int(K))

    @classmethod
    def from_labels(cls, labels: Sequence[int], items: Sequence[Item] | None = None, K: int = 0):
        """Build from 1-based cluster labels; items default to ``0..len(labels)-1``."""
        items = range(len(labels)) if items is None else items
        if len(items) != len(labels):
            raise DimensionError("items and labels differ in length")
        return cls({it: int(k) for it, k in zip(items, labels)}, K)

    @classmethod
    def singletons(cls, items: Iterable[Item]):
        """Every item is its own element (word-level privacy)."""
        return cls({it: i + 1 for i, it in enumerate(items)})

    @classmethod
    def single(cls, items: Iterable[Item]):
        """One cluster covering everything, i.e. user-level privacy."""
        return cls({it: 1 for it in items}, 1)

    @classmethod
    def blocks(cls, d: int, K: int):
        """Items ``0..d-1`` cut into ``K`` contiguous, nearly equal blocks."""
        if not 1 <= K <= d:
            raise DomainError(f"need 1 <= K <= d, got K={K}, d={d}")
        labels = np.arange(d) * K // d + 1
        return cls.from_labels(labels.tolist(), K=K)

    def __len__(self) -> int:
        return len(self.assign)

    def __contains__(self, item) -> bool:
        return item in self.assign

    def cluster_of(self, item: Item) -> int:
        try:
            return self.assign[item]
        except KeyError:
            raise AssignmentError(item) from None

    def labels(self, items: Iterable[Item]) -> np.ndarray:
        """0-based cluster index for each item, in order."""
        return np.array([self.cluster_of(it) - 1 for it in items], dtype=np.int64)

    def sizes(self) -> np.ndarray:
        return np.bincount(np.fromiter(self.assign.values(), dtype=np.int64) - 1, minlength=self.K)

    def clusters(self) -> list[list[Item]]:
        out: list[list[Item]] = [[] for _ in range(self.K)]
        for item, k in self.assign.items():
            out[k - 1].append(item)
        return out


@dataclass(frozen=True, eq=False)
class UserData:
    """One user's multiset of items, stored as item -> positive count."""

    items: Mapping[Item, int]

    def __post_init__(self):
        clean = {}
        for item, c in dict(self.items).items():
            if int(c) != c or c < 0:
                raise DomainError(f"count for {item!r} must be a nonnegative integer, got {c!r}")
            if c:
                clean[item] = int(c)
        object.__setattr__(self, "items", MappingProxyType(clean))

    @classmethod
    def from_iterable(cls, items: Iterable[Item]):
        return cls(Counter(items))

    @classmethod
    def from_counts(cls, counts: Sequence[int], items: Sequence[Item] | None = None):
        items = range(len(counts)) if items is None else items
        return cls({it: int(c) for it, c in zip(items, counts)})

    @property
    def m(self) -> int:
        return sum(self.items.values())

    def by_cluster(self, part: ElementPartition) -> dict[int, frozenset]:
        """Per-cluster sub-multisets as frozensets of (item, count) pairs."""
        groups: dict[int, set] = {}
        for item, c in self.items.items():
            groups.setdefault(part.cluster_of(item), set()).add((item, c))
        return {k: frozenset(v) for k, v in groups.items()}

    def __eq__(self, other):
        return isinstance(other, UserData) and dict(self.items) == dict(other.items)

    def __hash__(self):
        return hash(frozenset(self.items.items()))


@dataclass(frozen=True)
class Sample:
    users: tuple[UserData, ...]

    def __post_init__(self):
        users = tuple(self.users)
        if not users:
            raise DomainError("a sample needs at least one user")
        object.__setattr__(self, "users", users)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self):
        return iter(self.users)

    def __getitem__(self, i):
        return self.users[i]


def user_distance(a: UserData, b: UserData, part: ElementPartition) -> int:
    """Number of clusters on which the two users' sub-multisets differ."""
    ga, gb = a.by_cluster(part), b.by_cluster(part)
    return sum(ga.get(k) != gb.get(k) for k in ga.keys() | gb.keys())


def distance_matrix(S: Sample, T: Sample, part: ElementPartition) -> np.ndarray:
    if len(S) != len(T):
        raise DimensionError(f"samples differ in size: {len(S)} vs {len(T)}")
    gs = [u.by_cluster(part) for u in S]
    gt = [u.by_cluster(part) for u in T]
    D = np.empty((len(S), len(T)), dtype=np.int64)
    for i, a in enumerate(gs):
        for j, b in enumerate(gt):
            D[i, j] = sum(a.get(k) != b.get(k) for k in a.keys() | b.keys())
    return D


def matching_cost(D: np.ndarray) -> int:
    """Minimum over permutations of the summed matched entries."""
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError(f"cost matrix must be square, got shape {D.shape}")
    rows, cols = linear_sum_assignment(D)
    return int(D[rows, cols].sum())


def element_distance(S: Sample, T: Sample, part: ElementPartition) -> int:
    return matching_cost(distance_matrix(S, T, part))


def is_element_neighbor(S: Sample, T: Sample, part: ElementPartition) -> bool:
    return element_distance(S, T, part) <= 1


def read_partition(path: str | Path) -> ElementPartition:
    """Read ``item_id<TAB>cluster_index`` lines; blank lines and ``#`` comments are skipped."""
    assign = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            try:
                item, k = line.split("\t")
                assign[item] = int(k)
            except ValueError:
                raise DomainError(f"{path}:{lineno}: expected 'item<TAB>cluster', got {line!r}") from None
            if assign[item] < 1:
                raise DomainError(f"{path}:{lineno}: cluster index must be >= 1")
    return ElementPartition(assign)


def write_partition(part: ElementPartition, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item, k in part.assign.items():
            fh.write(f"{item}\t{k}\n")
