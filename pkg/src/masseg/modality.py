"""Modality identifiers and subset enumeration."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

DEFAULT_NAMES = ("rgb", "depth", "event", "lidar")


@dataclass(frozen=True, order=True)
class ModalityId:
    index: int
    name: str


def modality_set(names: Sequence[str]) -> tuple[ModalityId, ...]:
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate modality names in {list(names)}")
    return tuple(ModalityId(i, n) for i, n in enumerate(names))


def all_subsets(m: int) -> list[tuple[int, ...]]:
    """Every non-empty subset of range(m), ordered by size then lexicographically."""
    if m < 1:
        raise ValueError("need at least one modality")
    return [c for k in range(1, m + 1) for c in combinations(range(m), k)]


def subsets_within(indices: Sequence[int]) -> list[tuple[int, ...]]:
    idx = sorted(set(indices))
    return [c for k in range(1, len(idx) + 1) for c in combinations(idx, k)]


def resolve_names(names: Sequence[str], known: Sequence[str]) -> tuple[int, ...]:
    """Map modality names to indices, rejecting unknown names."""
    out = []
    for n in names:
        n = n.strip()
        if n not in known:
            raise KeyError(f"unknown modality {n!r}; registered: {', '.join(known)}")
        out.append(known.index(n))
    if not out:
        raise ValueError("empty modality list")
    return tuple(sorted(set(out)))
