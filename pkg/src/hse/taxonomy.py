"""Category hierarchies: data model, TSV format, validation and score extension.

Levels are numbered from 1 (coarsest) to ``L`` (finest), matching how the
hierarchy is described in the taxonomy files. A category is identified by its
full ancestor name path, so names may repeat under different parents.

Taxonomy TSV: UTF-8, one row per leaf, ``L`` tab-separated names ordered from
level 1 to level ``L``; blank lines and lines starting with ``#`` are ignored.
Category indices are assigned per level in order of first appearance.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

FIXTURES = {"cub": "cub.tsv", "butterfly200": "butterfly200.tsv", "vegfru": "vegfru.tsv"}

LabelPath = tuple  # one category index per level, level 1 first


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    level: int
    index: int
    message: str

    def __str__(self) -> str:
        return f"level {self.level}, index {self.index}: {self.message}"


@dataclass(frozen=True, eq=False)
class Taxonomy:
    """An ``L``-level category tree.

    ``parents[i]`` maps every category of level ``i + 2`` to its parent index at
    level ``i + 1``; use :meth:`parent_map` to address it by 1-based level.
    """

    names: tuple[tuple[str, ...], ...]
    parents: tuple[np.ndarray, ...]

    @classmethod
    def from_parents(cls, level_names: Sequence[Sequence[str]],
                     parents: Sequence[Sequence[int]]) -> "Taxonomy":
        return cls(tuple(tuple(n) for n in level_names),
                   tuple(np.asarray(p, dtype=np.int64) for p in parents))

    @classmethod
    def from_paths(cls, rows: Iterable[Sequence[str]]) -> "Taxonomy":
        """Build from leaf name paths, assigning indices by first appearance."""
        rows = [tuple(r) for r in rows]
        if not rows:
            raise TaxonomyError("empty taxonomy")
        depth = len(rows[0])
        index: list[dict[tuple[str, ...], int]] = [{} for _ in range(depth)]
        parents: list[list[int]] = [[] for _ in range(depth - 1)]
        for lineno, row in enumerate(rows, 1):
            if len(row) != depth:
                raise TaxonomyError(
                    f"row {lineno}: {len(row)} levels, expected {depth} (inconsistent prefix)")
            if any(not name for name in row):
                raise TaxonomyError(f"row {lineno}: empty category name")
            if row in index[-1]:
                raise TaxonomyError(f"row {lineno}: duplicate leaf path {'/'.join(row)}")
            for lvl in range(depth):
                key = row[:lvl + 1]
                if key not in index[lvl]:
                    index[lvl][key] = len(index[lvl])
                    if lvl > 0:
                        parents[lvl - 1].append(index[lvl - 1][row[:lvl]])
        names = tuple(tuple(k[-1] for k in level) for level in index)
        return cls(names, tuple(np.asarray(p, dtype=np.int64) for p in parents))

    @property
    def level_count(self) -> int:
        return len(self.names)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(n) for n in self.names)

    def size(self, level: int) -> int:
        return len(self.names[self._check_level(level) - 1])

    def _check_level(self, level: int) -> int:
        if not 1 <= level <= self.level_count:
            raise TaxonomyError(f"level {level} outside 1..{self.level_count}")
        return level

    def parent_map(self, level: int) -> np.ndarray:
        """Parent indices (at ``level - 1``) for every category of ``level`` (>= 2)."""
        if self._check_level(level) < 2:
            raise TaxonomyError("level 1 has no parents")
        return self.parents[level - 2]

    def parent(self, level: int, index: int) -> int:
        return int(self.parent_map(level)[index])

    def children(self, level: int, index: int) -> np.ndarray:
        """Indices at ``level + 1`` whose parent is ``index``."""
        return np.flatnonzero(self.parent_map(level + 1) == index)

    def path_names(self, path: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.names[lvl][c] for lvl, c in enumerate(path))

    def leaf_paths(self) -> np.ndarray:
        """[n_L, L] array whose row ``k`` is the label path of leaf ``k``."""
        n_leaf = self.level_sizes[-1]
        out = np.empty((n_leaf, self.level_count), dtype=np.int64)
        cur = np.arange(n_leaf)
        out[:, -1] = cur
        for level in range(self.level_count, 1, -1):
            cur = self.parent_map(level)[cur]
            out[:, level - 2] = cur
        return out

    def resolve(self, names: Sequence[str]) -> LabelPath:
        """Map a full name path (level 1 first) to its label path."""
        if len(names) != self.level_count:
            raise TaxonomyError(f"expected {self.level_count} names, got {len(names)}")
        path: list[int] = []
        for lvl, name in enumerate(names):
            hits = [c for c, n in enumerate(self.names[lvl]) if n == name
                    and (lvl == 0 or self.parents[lvl - 1][c] == path[-1])]
            if not hits:
                raise TaxonomyError(f"unresolved category {name!r} at level {lvl + 1}")
            path.append(hits[0])
        return tuple(path)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Taxonomy):
            return NotImplemented
        return self.names == other.names and len(self.parents) == len(other.parents) and all(
            np.array_equal(a, b) for a, b in zip(self.parents, other.parents))

    def __hash__(self) -> int:
        return hash((self.names, tuple(p.tobytes() for p in self.parents)))

    def __repr__(self) -> str:
        return f"Taxonomy(level_sizes={self.level_sizes})"


def validate_taxonomy(tax: Taxonomy) -> list[Violation]:
    """Return every invariant violation; an empty list means the taxonomy is valid."""
    out: list[Violation] = []
    sizes = tax.level_sizes
    if len(sizes) < 1:
        return [Violation(0, 0, "no levels")]
    for lvl, n in enumerate(sizes, 1):
        if n == 0:
            out.append(Violation(lvl, 0, "empty level"))
    if len(tax.parents) != len(sizes) - 1:
        out.append(Violation(0, 0, f"{len(tax.parents)} parent maps for {len(sizes)} levels"))
        return out
    for lvl in range(2, len(sizes) + 1):
        pmap = tax.parents[lvl - 2]
        n_up = sizes[lvl - 2]
        if len(pmap) != sizes[lvl - 1]:
            out.append(Violation(lvl, 0, f"parent map has {len(pmap)} entries for {sizes[lvl - 1]} categories"))
            continue
        for c, p in enumerate(pmap):
            if not 0 <= p < n_up:
                out.append(Violation(lvl, c, f"parent out of range ({int(p)} not in [0, {n_up}))"))
        counts = np.bincount(pmap[(pmap >= 0) & (pmap < n_up)], minlength=n_up)
        for p in np.flatnonzero(counts == 0):
            out.append(Violation(lvl - 1, int(p), "barren node (no children)"))
        if sizes[lvl - 2] > sizes[lvl - 1]:
            out.append(Violation(lvl, 0, f"level size {sizes[lvl - 1]} smaller than level above ({sizes[lvl - 2]})"))
    return out


def derive_label_path(tax: Taxonomy, leaf_index: int) -> LabelPath:
    """Label path of a finest-level category, found by walking up the parents."""
    n_leaf = tax.level_sizes[-1]
    if not 0 <= leaf_index < n_leaf:
        raise TaxonomyError(f"leaf index {leaf_index} outside [0, {n_leaf})")
    path = [int(leaf_index)]
    for level in range(tax.level_count, 1, -1):
        path.append(tax.parent(level, path[-1]))
    return tuple(reversed(path))


def is_consistent(tax: Taxonomy, path: Sequence[int]) -> bool:
    if len(path) != tax.level_count:
        return False
    return all(tax.parent(lvl, path[lvl - 1]) == path[lvl - 2] for lvl in range(2, len(path) + 1))


def extend_scores(tax: Taxonomy, level: int, s_prev):
    """Copy each level ``level - 1`` score onto all of its children at ``level``.

    Works on numpy arrays of shape [..., n_{level-1}] and returns [..., n_level].
    """
    pmap = tax.parent_map(level)
    s_prev = np.asarray(s_prev)
    if s_prev.shape[-1] != tax.size(level - 1):
        raise TaxonomyError(
            f"score length {s_prev.shape[-1]} does not match level {level - 1} size {tax.size(level - 1)}")
    return np.take(s_prev, pmap, axis=-1)


# -- file format -------------------------------------------------------------

def parse_taxonomy(text: str) -> Taxonomy:
    rows = [line.split("\t") for line in text.splitlines()
            if line.strip() and not line.startswith("#")]
    tax = Taxonomy.from_paths(rows)
    problems = validate_taxonomy(tax)
    if problems:
        raise TaxonomyError("; ".join(map(str, problems)))
    return tax


def load_taxonomy(path: str | os.PathLike) -> Taxonomy:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise TaxonomyError(f"{path}: empty taxonomy file")
    return parse_taxonomy(text)


def format_taxonomy(tax: Taxonomy) -> str:
    return "".join("\t".join(tax.path_names(row)) + "\n" for row in tax.leaf_paths())


def write_taxonomy(tax: Taxonomy, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_taxonomy(tax))


def fixture_path(name: str):
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    return resources.files("hse.fixtures").joinpath(FIXTURES[name])


def load_fixture(name: str) -> Taxonomy:
    return parse_taxonomy(fixture_path(name).read_text(encoding="utf-8"))
