"""Bit-packed encoding of non-exclusive multiclass segmentations.

Each class owns one bit of a 16-bit word; a voxel's word is the OR of the
codes (powers of two) of the classes it belongs to, so C class masks cost
two bytes per voxel instead of C bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .volume import BinaryMask, GridGeometry, _check_array, require_same_geometry

WORD_BITS = 16
WORD_DTYPE = np.uint16


@dataclass(frozen=True)
class ClassEntry:
    """One segmentation class: bit assignment, laterality, containment."""

    name: str
    bit: int
    bilateral: bool = False
    parents: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        if not self.name or any(c.isspace() for c in self.name):
            raise ValueError(f"invalid class name {self.name!r}")
        if not 0 <= self.bit < WORD_BITS:
            raise ValueError(f"bit index {self.bit} outside word width {WORD_BITS}")

    @property
    def code(self) -> int:
        return 1 << self.bit


class ClassRegistry:
    """Ordered, validated set of ClassEntry records."""

    def __init__(self, entries: Iterable[ClassEntry]):
        entries = tuple(entries)
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in registry")
        bits = [e.bit for e in entries]
        if len(set(bits)) != len(bits):
            raise ValueError("duplicate bit indices in registry")
        by_name = {e.name: e for e in entries}
        for entry in entries:
            for parent in entry.parents:
                if parent not in by_name:
                    raise ValueError(
                        f"unknown containment parent {parent!r} of class {entry.name!r}"
                    )
        self._entries = entries
        self._by_name = by_name
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        state: dict[str, int] = {}  # 1 = in progress, 2 = done

        def visit(name: str) -> None:
            if state.get(name) == 1:
                raise ValueError(f"containment cycle through class {name!r}")
            if state.get(name) == 2:
                return
            state[name] = 1
            for parent in self._by_name[name].parents:
                visit(parent)
            state[name] = 2

        for entry in self._entries:
            visit(entry.name)

    @property
    def entries(self) -> tuple[ClassEntry, ...]:
        return self._entries

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassRegistry) and self._entries == other._entries

    def __hash__(self) -> int:
        return hash(self._entries)

    def entry(self, name: str) -> ClassEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f"unknown class {name!r}") from None

    def code(self, name: str) -> int:
        return self.entry(name).code

    @property
    def all_codes(self) -> int:
        mask = 0
        for entry in self._entries:
            mask |= entry.code
        return mask

    def to_text(self) -> str:
        """One "name bit bilateral parents" line per class, LF-terminated."""
        lines = []
        for e in self._entries:
            parents = ",".join(e.parents) if e.parents else "-"
            lines.append(f"{e.name} {e.bit} {int(e.bilateral)} {parents}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassRegistry":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ValueError(f"registry line {lineno}: expected 4 fields, got {len(fields)}")
            name, bit, bilateral, parents = fields
            entries.append(
                ClassEntry(
                    name=name,
                    bit=int(bit),
                    bilateral=bool(int(bilateral)),
                    parents=() if parents == "-" else tuple(parents.split(",")),
                )
            )
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ClassRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


DEFAULT_REGISTRY = ClassRegistry(
    [
        ClassEntry("eye", 0, bilateral=True),
        ClassEntry("lens", 1, bilateral=True, parents=("eye",)),
        ClassEntry("optic_nerve", 2, bilateral=True),
        ClassEntry("optic_chiasm", 3),
        ClassEntry("pituitary", 4),
        ClassEntry("hippocampus", 5, bilateral=True),
        ClassEntry("brainstem", 6, parents=("brain",)),
        ClassEntry("brain", 7),
    ]
)


@dataclass(frozen=True, eq=False)
class MultiLabelMask:
    """Per-voxel bit-packed class membership words."""

    geometry: GridGeometry
    words: np.ndarray
    registry: ClassRegistry

    def __post_init__(self):
        words = np.asarray(self.words, dtype=WORD_DTYPE)
        _check_array(self.geometry, words, "multilabel mask")
        stray = int(np.bitwise_or.reduce(words, axis=None)) & ~self.registry.all_codes
        if stray:
            raise ValueError(f"words carry bits outside the registry (mask {stray:#06x})")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    @classmethod
    def empty(cls, geometry: GridGeometry, registry: ClassRegistry) -> "MultiLabelMask":
        return cls(geometry, np.zeros(geometry.sizes, dtype=WORD_DTYPE), registry)


def encode(masks: Mapping[str, BinaryMask], registry: ClassRegistry) -> MultiLabelMask:
    """OR the class codes of all masks into one word per voxel."""
    if not masks:
        raise ValueError("encode needs at least one class mask")
    geometry = require_same_geometry(*masks.values())
    words = np.zeros(geometry.sizes, dtype=WORD_DTYPE)
    for name, mask in masks.items():
        code = registry.code(name)  # raises for unknown names
        words |= np.where(mask.bits, WORD_DTYPE(code), WORD_DTYPE(0))
    return MultiLabelMask(geometry, words, registry)


def decode(mask: MultiLabelMask, name: str) -> BinaryMask:
    """Extract one class as a binary mask via bitwise AND with its code."""
    code = mask.registry.code(name)
    return BinaryMask(mask.geometry, (mask.words & WORD_DTYPE(code)) != 0)


def decode_all(mask: MultiLabelMask) -> dict[str, BinaryMask]:
    return {name: decode(mask, name) for name in mask.registry.names}


def present_classes(mask: MultiLabelMask) -> set[str]:
    """Names of classes with at least one set voxel."""
    combined = int(np.bitwise_or.reduce(mask.words, axis=None))
    return {e.name for e in mask.registry if combined & e.code}
