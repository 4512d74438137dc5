"""Particle labels, labeled point configurations, and the configuration metric.

Particles are identified by genealogy words: the children of particle ``k``
are ``k.1 ... k.l``, so a label is a finite sequence of positive integers
(the empty word is the root of an initial particle's line).  A population
snapshot is a finite set of labeled positions in R^d subject to the
antichain constraint: no living particle may be a strict ancestor of
another living particle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "Label",
    "ROOT",
    "concat",
    "is_strict_ancestor",
    "parent",
    "ParticleConfiguration",
    "config_distance",
    "config_count",
    "write_config_csv",
    "read_config_csv",
]


@dataclass(frozen=True, slots=True)
class Label:
    """Genealogy word: a tuple of positive integers, empty for the root."""

    word: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for entry in self.word:
            if not isinstance(entry, int) or entry < 1:
                raise ValueError(f"label entries must be integers >= 1, got {entry!r}")

    def child(self, index: int) -> "Label":
        """Label of this particle's ``index``-th offspring (1-based)."""
        if index < 1:
            raise ValueError("child index is 1-based")
        return Label(self.word + (index,))

    @property
    def depth(self) -> int:
        return len(self.word)

    def __str__(self) -> str:
        return ".".join(str(e) for e in self.word)

    def __lt__(self, other: "Label") -> bool:
        return self.word < other.word

    @classmethod
    def parse(cls, text: str) -> "Label":
        """Inverse of ``str``: dot-separated positive integers, "" = root."""
        text = text.strip()
        if not text:
            return cls(())
        return cls(tuple(int(part) for part in text.split(".")))


ROOT = Label(())


def concat(k: Label, k2: Label) -> Label:
    """Word concatenation: the label of k2's line grafted under k."""
    return Label(k.word + k2.word)


def is_strict_ancestor(k: Label, k2: Label) -> bool:
    """True iff k2 extends k by a nonempty suffix."""
    n = len(k.word)
    return len(k2.word) > n and k2.word[:n] == k.word


def parent(k: Label) -> Label:
    """Drop the last entry of the word; the root has no parent."""
    if not k.word:
        raise ValueError("the root label has no parent")
    return Label(k.word[:-1])


def _check_antichain(sorted_words: list[tuple[int, ...]]) -> None:
    # Lexicographic order puts every descendant of w immediately in the
    # block following w, so adjacent prefix checks suffice.
    for a, b in zip(sorted_words, sorted_words[1:]):
        if a == b:
            raise ValueError(f"duplicate label {'.'.join(map(str, a))}")
        if b[: len(a)] == a:
            raise ValueError(
                "antichain violation: label "
                f"{'.'.join(map(str, a))} is an ancestor of {'.'.join(map(str, b))}"
            )


class ParticleConfiguration:
    """Finite labeled point measure: a map from labels to positions in R^d.

    Immutable; iteration is in sorted label order so that downstream
    computations are reproducible bit-for-bit.
    """

    __slots__ = ("_labels", "_positions", "_dim", "_index")

    def __init__(self, atoms: Mapping[Label, np.ndarray] | Iterable[tuple[Label, np.ndarray]], dim: int | None = None):
        items = list(atoms.items()) if isinstance(atoms, Mapping) else list(atoms)
        items.sort(key=lambda kv: kv[0].word)
        words = [k.word for k, _ in items]
        _check_antichain(words)
        labels = tuple(k for k, _ in items)
        if items:
            positions = np.array([np.asarray(x, dtype=float).reshape(-1) for _, x in items])
            if dim is None:
                dim = positions.shape[1]
            if positions.shape[1] != dim:
                raise ValueError(f"positions have dimension {positions.shape[1]}, expected {dim}")
        else:
            if dim is None:
                raise ValueError("empty configuration needs an explicit dimension")
            positions = np.empty((0, dim))
        positions.setflags(write=False)
        self._labels = labels
        self._positions = positions
        self._dim = dim
        self._index = {k: i for i, k in enumerate(labels)}

    @classmethod
    def empty(cls, dim: int) -> "ParticleConfiguration":
        """The null configuration (no particles)."""
        return cls({}, dim=dim)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def labels(self) -> tuple[Label, ...]:
        return self._labels

    @property
    def positions(self) -> np.ndarray:
        """(n, d) array aligned with ``labels``."""
        return self._positions

    def position(self, k: Label) -> np.ndarray:
        return self._positions[self._index[k]]

    def __contains__(self, k: Label) -> bool:
        return k in self._index

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self) -> Iterator[tuple[Label, np.ndarray]]:
        return ((k, self._positions[i]) for i, k in enumerate(self._labels))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParticleConfiguration):
            return NotImplemented
        return (
            self._dim == other._dim
            and self._labels == other._labels
            and np.array_equal(self._positions, other._positions)
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{k or 'root'}->{self._positions[i]}" for i, k in enumerate(self._labels))
        return f"ParticleConfiguration({{{inner}}}, dim={self._dim})"

    def pairing(self, f) -> float:
        """<e, f> = sum over atoms of f(label, position)."""
        return float(sum(f(k, x) for k, x in self))


def config_distance(e1: ParticleConfiguration, e2: ParticleConfiguration) -> float:
    """Configuration metric: truncated position gaps over shared labels plus
    the count of labels present on one side only."""
    if e1.dim != e2.dim:
        raise ValueError(f"dimension mismatch: {e1.dim} vs {e2.dim}")
    shared = 0
    total = 0.0
    for k, i in e1._index.items():
        j = e2._index.get(k)
        if j is not None:
            shared += 1
            gap = float(np.linalg.norm(e1._positions[i] - e2._positions[j]))
            total += min(gap, 1.0)
    total += (len(e1) - shared) + (len(e2) - shared)
    return total


def config_count(e: ParticleConfiguration) -> int:
    """Number of atoms; equals the distance to the null configuration."""
    return len(e)


def write_config_csv(e: ParticleConfiguration, file) -> None:
    """One CSV row per atom: label, x_1..x_d."""
    import csv

    with open(file, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x_{j+1}" for j in range(e.dim)])
        for k, x in e:
            writer.writerow([str(k)] + [repr(float(v)) for v in x])


def read_config_csv(file, dim: int) -> ParticleConfiguration:
    """Inverse of :func:`write_config_csv`."""
    import csv

    atoms = {}
    with open(file, newline="") as fh:
        for row in csv.DictReader(fh):
            atoms[Label.parse(row["label"])] = np.array(
                [float(row[f"x_{j+1}"]) for j in range(dim)]
            )
    return ParticleConfiguration(atoms, dim=dim)
