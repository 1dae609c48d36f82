"""Cut source datasets into ordered training experiences of fixed or Zipf size."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data_io import Dataset
from .errors import ConfigError, IntegrityError, ShapeError, StreamError

CHUNK_SIZES = tuple(range(50, 501, 50))
MIN_CHUNK = 2
MAX_ORDER_SOURCES = 8

_MODES = ("fixed", "zipf_small", "zipf_large")


@dataclass(frozen=True)
class SizeSchedule:
    mode: str = "zipf_small"
    size: int | None = None
    zipf_exponent: float = 1.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "fixed" and self.size not in CHUNK_SIZES:
            raise ConfigError(f"fixed chunk size must be one of {CHUNK_SIZES}, got {self.size}")
        if self.zipf_exponent < 0:
            raise ConfigError(f"Zipf exponent must be non-negative, got {self.zipf_exponent}")

    @classmethod
    def parse(cls, text: str, zipf_exponent: float = 1.0) -> "SizeSchedule":
        """Accepts ``fixed:<s>``, ``zipf-small`` and ``zipf-large``."""
        text = text.strip().lower()
        if text.startswith("fixed:"):
            try:
                size = int(text.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad fixed schedule {text!r}") from None
            return cls("fixed", size, zipf_exponent)
        mode = text.replace("-", "_")
        if mode not in ("zipf_small", "zipf_large"):
            raise ConfigError(f"unknown schedule {text!r}")
        return cls(mode, None, zipf_exponent)

    def __str__(self) -> str:
        return f"fixed:{self.size}" if self.mode == "fixed" else self.mode.replace("_", "-")

    def ranked_sizes(self) -> tuple[int, ...]:
        """Candidate sizes ordered by Zipf rank (rank 1 first)."""
        return CHUNK_SIZES[::-1] if self.mode == "zipf_large" else CHUNK_SIZES


def zipf_probabilities(exponent: float, n: int = len(CHUNK_SIZES)) -> np.ndarray:
    weights = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


def draw_zipf_sizes(schedule: SizeSchedule, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. chunk sizes drawn by Zipf rank (no truncation)."""
    p = zipf_probabilities(schedule.zipf_exponent)
    ranks = rng.choice(len(p), size=count, p=p)
    return np.asarray(schedule.ranked_sizes())[ranks]


def _truncate(draws, total: int) -> tuple[list[int], int]:
    sizes, remaining = [], total
    for s in draws:
        if remaining == 0:
            break
        s = min(int(s), remaining)
        remaining -= s
        if s >= MIN_CHUNK:
            sizes.append(s)
            continue
        return sizes, s
    return sizes, 0


def _zipf_cut(schedule: SizeSchedule, total: int, seed) -> tuple[list[int], int]:
    if total < CHUNK_SIZES[0]:
        raise StreamError(f"need at least {CHUNK_SIZES[0]} samples, got {total}")
    rng = np.random.default_rng(seed)

    def draws():
        while True:
            yield from draw_zipf_sizes(schedule, 64, rng)

    return _truncate(draws(), total)


def sample_zipf_sizes(schedule: SizeSchedule, total_samples: int, seed) -> list[int]:
    """Zipf-distributed chunk sizes covering ``total_samples`` (tail < 2 dropped)."""
    return _zipf_cut(schedule, total_samples, seed)[0]


def _fixed_cut(size: int, total: int) -> tuple[list[int], int]:
    if size not in CHUNK_SIZES:
        raise ConfigError(f"fixed chunk size must be one of {CHUNK_SIZES}, got {size}")
    full, rem = divmod(total, size)
    sizes = [size] * full
    if rem >= MIN_CHUNK:
        sizes.append(rem)
        rem = 0
    return sizes, rem


def fixed_sizes(size: int, total_samples: int) -> list[int]:
    return _fixed_cut(size, total_samples)[0]


def chunk_sizes(schedule: SizeSchedule, total_samples: int, seed) -> tuple[list[int], int]:
    """(chunk sizes, number of dropped remainder samples)."""
    if schedule.mode == "fixed":
        return _fixed_cut(schedule.size, total_samples)
    return _zipf_cut(schedule, total_samples, seed)


@dataclass
class Experience:
    index: int
    features: np.ndarray
    labels: np.ndarray
    source_id: int
    n_classes: int
    source_name: str = ""

    def __post_init__(self):
        if self.features.shape[0] == 0:
            raise StreamError(f"experience {self.index} is empty")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ExperienceStream:
    experiences: list[Experience]
    test_set: Dataset
    order: tuple[int, ...]
    schedule: SizeSchedule
    dropped: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.experiences)

    def __iter__(self):
        return iter(self.experiences)

    def union(self) -> Experience:
        """All training samples as a single experience, in stream order."""
        e = self.experiences
        return Experience(1, np.concatenate([x.features for x in e]),
                          np.concatenate([x.labels for x in e]), -1,
                          max(x.n_classes for x in e), "joint")


def _row_keys(features: np.ndarray) -> set[bytes]:
    return {row.tobytes() for row in np.ascontiguousarray(features)}


def build_stream(sources: Sequence[Dataset], schedule: SizeSchedule, test_set: Dataset,
                 seed: int, order: Sequence[int] | None = None) -> ExperienceStream:
    """Shuffle each source, cut it into chunks, and concatenate sources in ``order``.

    Shuffle and chunk-size draws of source ``j`` depend on ``(seed, j)`` only,
    so permuting the order never changes how a given source is chunked.
    """
    if not sources:
        raise StreamError("no source datasets")
    order = tuple(range(len(sources))) if order is None else tuple(int(j) for j in order)
    if sorted(order) != list(range(len(sources))):
        raise ConfigError(f"order {order} is not a permutation of {len(sources)} sources")
    dim = sources[0].dim
    if any(s.dim != dim for s in sources) or test_set.dim != dim:
        raise ShapeError("sources and test set must share one feature dimension")
    test_keys = _row_keys(test_set.features)
    for j, src in enumerate(sources):
        if not test_keys.isdisjoint(_row_keys(src.features)):
            raise IntegrityError(f"source {j} ({src.name}) shares samples with the test set")

    experiences, dropped = [], {}
    for j in order:
        src = sources[j]
        perm = np.random.default_rng([seed, j, 0]).permutation(len(src))
        sizes, lost = chunk_sizes(schedule, len(src), [seed, j, 1])
        dropped[j] = lost
        start = 0
        for size in sizes:
            idx = perm[start:start + size]
            start += size
            experiences.append(Experience(len(experiences) + 1, src.features[idx],
                                          src.labels[idx], j, src.n_classes, src.name))
    return ExperienceStream(experiences, test_set, order, schedule, dropped)


def enumerate_orders(n_sources: int) -> list[list[int]]:
    """All permutations of ``range(n_sources)`` in lexicographic order."""
    if not 1 <= n_sources <= MAX_ORDER_SOURCES:
        raise ConfigError(f"can enumerate orders for 1..{MAX_ORDER_SOURCES} sources, got {n_sources}")
    return [list(p) for p in itertools.permutations(range(n_sources))]
