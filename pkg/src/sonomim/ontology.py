"""Three-level anatomy hierarchy: body parts, organs, anatomical structures.

The hierarchy is a labeled forest. Every organ has exactly one part parent,
every structure exactly one organ parent, parts are roots. Nodes get dense
indices level-major (all parts first, then organs, then structures), in file
order within each level block, so a given ontology file always produces the
same index layout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class OntologyError(ValueError):
    """Raised for malformed ontology files or inconsistent hierarchies."""


class Level(enum.IntEnum):
    PART = 0
    ORGAN = 1
    STRUCTURE = 2


_LEVEL_NAMES = {"part": Level.PART, "organ": Level.ORGAN, "structure": Level.STRUCTURE}


@dataclass(frozen=True)
class OntologyNode:
    name: str
    level: Level
    parent: int | None  # dense index of the parent node, None for parts


@dataclass(frozen=True)
class AnatomyOntology:
    """Immutable after construction; safe for shared read access."""

    nodes: tuple[OntologyNode, ...]
    level_counts: tuple[int, int, int]  # (N_p, N_o, N_a)
    index: dict[str, int] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_children", _build_children(self.nodes))
        object.__setattr__(self, "_desc_cache", None)
        object.__setattr__(self, "_anc_cache", None)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def ancestors(self, i: int) -> list[int]:
        """Strict ancestors of node i, leaf-to-root order. Empty for parts."""
        self._check_index(i)
        out = []
        p = self.nodes[i].parent
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out

    def descendants(self, i: int) -> list[int]:
        """All nodes in the subtree below i (i excluded), breadth-first."""
        self._check_index(i)
        out = []
        frontier = list(self._children[i])
        while frontier:
            out.extend(frontier)
            frontier = [c for n in frontier for c in self._children[n]]
        return out

    def children(self, i: int) -> list[int]:
        self._check_index(i)
        return list(self._children[i])

    def expand_labels(self, positives: Iterable[int]) -> np.ndarray:
        """Boolean label vector with every positive and all its ancestors set.

        The result is always coherent; expanding an already-expanded set is a
        no-op.
        """
        bits = np.zeros(self.node_count, dtype=bool)
        for i in positives:
            self._check_index(i)
            bits[i] = True
            for a in self.ancestors(i):
                bits[a] = True
        return bits

    def validate_coherent(self, bits: np.ndarray) -> bool:
        """True iff every true bit's parent is true (ancestor-closed)."""
        bits = np.asarray(bits)
        if bits.shape != (self.node_count,):
            raise OntologyError(
                f"label vector has length {bits.shape}, expected ({self.node_count},)"
            )
        child_idx, parent_idx = self._edges()
        if child_idx.size == 0:
            return True
        return bool(np.all(bits[parent_idx] >= bits[child_idx]))

    def resolve_path(self, path: str, sep: str = "/") -> list[int]:
        """Map a 'part/organ/structure' path string (possibly truncated) to
        node indices, validating that consecutive entries are parent/child."""
        names = [p for p in path.split(sep) if p]
        if not names:
            raise OntologyError("empty label path")
        idxs = []
        for name in names:
            if name not in self.index:
                raise OntologyError(f"unknown node name {name!r}")
            idxs.append(self.index[name])
        for child, parent in zip(idxs[1:], idxs[:-1]):
            if self.nodes[child].parent != parent:
                raise OntologyError(
                    f"{self.nodes[child].name!r} is not a child of "
                    f"{self.nodes[parent].name!r}"
                )
        return idxs

    def path_of(self, i: int, sep: str = "/") -> str:
        """Root-to-node name path for node i."""
        self._check_index(i)
        chain = [i] + self.ancestors(i)
        return sep.join(self.nodes[j].name for j in reversed(chain))

    # Padded gather tables used to vectorize min/max over ancestor/descendant
    # groups. Rows are sorted ascending so a first-occurrence argmin/argmax
    # lands on the lowest node index among ties.
    def ancestor_groups(self) -> tuple[np.ndarray, np.ndarray]:
        if self._anc_cache is None:
            groups = [sorted([i] + self.ancestors(i)) for i in range(self.node_count)]
            object.__setattr__(self, "_anc_cache", _pad_groups(groups))
        return self._anc_cache

    def descendant_groups(self) -> tuple[np.ndarray, np.ndarray]:
        if self._desc_cache is None:
            groups = [sorted([i] + self.descendants(i)) for i in range(self.node_count)]
            object.__setattr__(self, "_desc_cache", _pad_groups(groups))
        return self._desc_cache

    def _edges(self) -> tuple[np.ndarray, np.ndarray]:
        child = np.array(
            [i for i, n in enumerate(self.nodes) if n.parent is not None], dtype=np.int64
        )
        parent = np.array([self.nodes[i].parent for i in child], dtype=np.int64)
        return child, parent

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.node_count:
            raise OntologyError(f"node index {i} out of range [0, {self.node_count})")


def _build_children(nodes: Sequence[OntologyNode]) -> list[list[int]]:
    children: list[list[int]] = [[] for _ in nodes]
    for i, n in enumerate(nodes):
        if n.parent is not None:
            children[n.parent].append(i)
    return children


def _pad_groups(groups: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(g) for g in groups)
    idx = np.zeros((len(groups), width), dtype=np.int64)
    valid = np.zeros((len(groups), width), dtype=bool)
    for r, g in enumerate(groups):
        idx[r, : len(g)] = g
        valid[r, : len(g)] = True
    return idx, valid


def build_ontology(
    entries: Sequence[tuple[str, str, str | None]],
) -> AnatomyOntology:
    """Construct and validate an ontology from (level_name, name, parent_name)
    triples. Index assignment is level-major, preserving entry order within
    each level."""
    for level_name, name, _ in entries:
        if level_name not in _LEVEL_NAMES:
            raise OntologyError(f"unknown level {level_name!r} for node {name!r}")
    seen: set[str] = set()
    for _, name, _ in entries:
        if name in seen:
            raise OntologyError(f"duplicate node name {name!r}")
        seen.add(name)

    by_level: dict[Level, list[tuple[str, str | None]]] = {lv: [] for lv in Level}
    for level_name, name, parent in entries:
        by_level[_LEVEL_NAMES[level_name]].append((name, parent))

    index: dict[str, int] = {}
    ordered: list[tuple[str, Level, str | None]] = []
    for lv in (Level.PART, Level.ORGAN, Level.STRUCTURE):
        for name, parent in by_level[lv]:
            index[name] = len(ordered)
            ordered.append((name, lv, parent))

    nodes: list[OntologyNode] = []
    for name, lv, parent_name in ordered:
        if lv == Level.PART:
            if parent_name is not None:
                raise OntologyError(f"part {name!r} must not have a parent")
            parent = None
        else:
            if parent_name is None:
                raise OntologyError(f"{lv.name.lower()} {name!r} must have a parent")
            if parent_name not in index:
                raise OntologyError(
                    f"unknown parent {parent_name!r} for node {name!r}"
                )
            parent = index[parent_name]
            parent_level = ordered[parent][1]
            if parent_level != lv - 1:
                raise OntologyError(
                    f"parent of {name!r} must be one level above "
                    f"({parent_name!r} is a {parent_level.name.lower()})"
                )
        nodes.append(OntologyNode(name=name, level=lv, parent=parent))

    # The level rule already excludes cycles; this guards against regressions.
    _check_acyclic(nodes)

    counts = (
        sum(1 for n in nodes if n.level == Level.PART),
        sum(1 for n in nodes if n.level == Level.ORGAN),
        sum(1 for n in nodes if n.level == Level.STRUCTURE),
    )
    if counts[0] < 1:
        raise OntologyError("ontology needs at least one part node")
    return AnatomyOntology(nodes=tuple(nodes), level_counts=counts, index=index)


def _check_acyclic(nodes: Sequence[OntologyNode]) -> None:
    for i in range(len(nodes)):
        seen = set()
        p: int | None = i
        while p is not None:
            if p in seen:
                raise OntologyError(f"cycle detected through node {nodes[i].name!r}")
            seen.add(p)
            p = nodes[p].parent


def load_ontology(path: str | Path) -> AnatomyOntology:
    """Load an ontology from a UTF-8 text file.

    One node per line: ``level<TAB>name<TAB>parent_name`` with ``-`` marking a
    root. Lines starting with ``#`` and blank lines are ignored.
    """
    path = Path(path)
    entries: list[tuple[str, str, str | None]] = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OntologyError(f"cannot read ontology file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise OntologyError(
                f"{path}:{lineno}: expected 'level<TAB>name<TAB>parent', got {raw!r}"
            )
        level_name, name, parent = (f.strip() for f in fields)
        entries.append((level_name.lower(), name, None if parent == "-" else parent))
    if not entries:
        raise OntologyError(f"{path}: no nodes defined")
    return build_ontology(entries)


def save_ontology(o: AnatomyOntology, path: str | Path) -> None:
    lines = ["# level\tname\tparent"]
    for n in o.nodes:
        parent = "-" if n.parent is None else o.nodes[n.parent].name
        lines.append(f"{n.level.name.lower()}\t{n.name}\t{parent}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def nine_region_ontology() -> AnatomyOntology:
    """The minimal whole-body ontology: eight clinical regions plus 'other',
    no organ or structure levels."""
    regions = [
        "head", "chest", "abdomen", "limbs", "back", "fetus", "dorsum",
        "pelvis", "other",
    ]
    return build_ontology([("part", r, None) for r in regions])


def random_forest_ontology(
    rng: np.random.Generator,
    max_nodes: int = 30,
) -> AnatomyOntology:
    """Random valid three-level forest for property tests."""
    n_p = int(rng.integers(1, max(2, max_nodes // 4)))
    remaining = max_nodes - n_p
    n_o = int(rng.integers(0, max(1, remaining)))
    n_a = int(rng.integers(0, remaining - n_o + 1)) if n_o > 0 else 0
    entries: list[tuple[str, str, str | None]] = []
    for i in range(n_p):
        entries.append(("part", f"p{i}", None))
    for i in range(n_o):
        entries.append(("organ", f"o{i}", f"p{int(rng.integers(0, n_p))}"))
    for i in range(n_a):
        entries.append(("structure", f"a{i}", f"o{int(rng.integers(0, n_o))}"))
    return build_ontology(entries)
