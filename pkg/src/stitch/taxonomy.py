"""Two-level apparel class hierarchy.

High-level classes are the detector's label space (top, bottom, dress, ...)
plus four person classes used for gender assignment. Fine-grained classes are
product types (t-shirt, tunic, ...), each owned by exactly one apparel-level
parent. Everything downstream (classifier heads, index shards, catalog
records) keys off the ids defined here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class TaxonomyError(ValueError):
    """Raised when a taxonomy config is malformed or inconsistent."""


class Gender(enum.Enum):
    MAN = "man"
    WOMAN = "woman"
    BOY = "boy"
    GIRL = "girl"
    UNKNOWN = "unknown"

    @classmethod
    def from_name(cls, name: str) -> "Gender":
        try:
            return cls(name)
        except ValueError:
            raise TaxonomyError(f"unknown gender {name!r}") from None


#: Person class names, in canonical order; each doubles as a Gender value.
PERSON_CLASS_NAMES = ("boy", "girl", "woman", "man")


@dataclass(frozen=True)
class HighLevelClass:
    id: int
    name: str
    is_person: bool = False


@dataclass(frozen=True)
class FineGrainedClass:
    id: int
    name: str
    parent: int  # high-level class id


@dataclass(frozen=True)
class Taxonomy:
    high_classes: tuple[HighLevelClass, ...]
    fine_classes: tuple[FineGrainedClass, ...]

    def __post_init__(self) -> None:
        names: set[str] = set()
        for c in self.high_classes:
            if c.name in names:
                raise TaxonomyError(f"duplicate class name {c.name!r}")
            names.add(c.name)
        high_by_id = {c.id: c for c in self.high_classes}
        children: dict[int, list[int]] = {c.id: [] for c in self.high_classes}
        for f in self.fine_classes:
            if f.name in names:
                raise TaxonomyError(f"duplicate class name {f.name!r}")
            names.add(f.name)
            parent = high_by_id.get(f.parent)
            if parent is None:
                raise TaxonomyError(f"fine class {f.name!r} has dangling parent id {f.parent}")
            if parent.is_person:
                raise TaxonomyError(
                    f"person class {parent.name!r} cannot have children ({f.name!r})"
                )
            children[f.parent].append(f.id)
        for fid, f in enumerate(self.fine_classes):
            if f.id != fid:
                raise TaxonomyError(f"fine class ids must be dense from 0, got {f.id} at {fid}")
        object.__setattr__(self, "_children", {h: tuple(sorted(c)) for h, c in children.items()})
        object.__setattr__(self, "_high_by_id", high_by_id)
        object.__setattr__(self, "_high_by_name", {c.name: c for c in self.high_classes})
        object.__setattr__(self, "_fine_by_id", {f.id: f for f in self.fine_classes})
        object.__setattr__(self, "_fine_by_name", {f.name: f for f in self.fine_classes})

    # -- lookups ---------------------------------------------------------

    def high_class(self, id_or_name: int | str) -> HighLevelClass:
        table = self._high_by_name if isinstance(id_or_name, str) else self._high_by_id
        try:
            return table[id_or_name]
        except KeyError:
            raise TaxonomyError(f"unknown high-level class {id_or_name!r}") from None

    def fine_class(self, id_or_name: int | str) -> FineGrainedClass:
        table = self._fine_by_name if isinstance(id_or_name, str) else self._fine_by_id
        try:
            return table[id_or_name]
        except KeyError:
            raise TaxonomyError(f"unknown fine-grained class {id_or_name!r}") from None

    def fine_classes_of(self, high_id: int) -> list[int]:
        """Child fine-class ids of a high-level class, ascending by id."""
        if high_id not in self._children:
            raise TaxonomyError(f"unknown high-level class id {high_id}")
        return list(self._children[high_id])

    def parent_of(self, fine_id: int) -> int:
        return self.fine_class(fine_id).parent

    def is_person(self, high_id: int) -> bool:
        return self.high_class(high_id).is_person

    def gender_of(self, high_id: int) -> Gender:
        """Gender encoded by a person class; TaxonomyError for apparel classes."""
        c = self.high_class(high_id)
        if not c.is_person:
            raise TaxonomyError(f"{c.name!r} is not a person class")
        return Gender(c.name)

    @property
    def apparel_classes(self) -> list[HighLevelClass]:
        return [c for c in self.high_classes if not c.is_person]

    @property
    def person_classes(self) -> list[HighLevelClass]:
        return [c for c in self.high_classes if c.is_person]


# -- config parsing ------------------------------------------------------


def load_taxonomy(text: str) -> Taxonomy:
    """Parse a taxonomy config document.

    The document has two sections. ``[high_classes]`` lists one class name per
    line, optionally followed by the marker ``person``. ``[fine_classes]``
    lists ``<name> <parent-name>`` pairs. ``#`` starts a comment; blank lines
    are ignored. Ids are assigned densely from 0 in file order.
    """
    high: list[HighLevelClass] = []
    fine_raw: list[tuple[str, str]] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("high_classes", "fine_classes"):
                raise TaxonomyError(f"line {lineno}: unknown section {section!r}")
            continue
        fields = line.split()
        if section == "high_classes":
            if len(fields) == 1:
                high.append(HighLevelClass(len(high), fields[0]))
            elif len(fields) == 2 and fields[1] == "person":
                high.append(HighLevelClass(len(high), fields[0], is_person=True))
            else:
                raise TaxonomyError(f"line {lineno}: expected '<name> [person]', got {line!r}")
        elif section == "fine_classes":
            if len(fields) != 2:
                raise TaxonomyError(f"line {lineno}: expected '<name> <parent>', got {line!r}")
            fine_raw.append((fields[0], fields[1]))
        else:
            raise TaxonomyError(f"line {lineno}: content before any section header")

    high_by_name = {}
    for c in high:
        if c.name in high_by_name:
            raise TaxonomyError(f"duplicate class name {c.name!r}")
        high_by_name[c.name] = c
    fine = []
    for i, (name, parent_name) in enumerate(fine_raw):
        parent = high_by_name.get(parent_name)
        if parent is None:
            raise TaxonomyError(f"fine class {name!r} has dangling parent {parent_name!r}")
        fine.append(FineGrainedClass(i, name, parent.id))
    return Taxonomy(tuple(high), tuple(fine))


def load_taxonomy_file(path: str | Path) -> Taxonomy:
    return load_taxonomy(Path(path).read_text(encoding="utf-8"))


def serialize_taxonomy(t: Taxonomy) -> str:
    """Render a taxonomy back to config text; reparsing gives an equal taxonomy."""
    lines = ["[high_classes]"]
    for c in t.high_classes:
        lines.append(f"{c.name} person" if c.is_person else c.name)
    lines.append("")
    lines.append("[fine_classes]")
    for f in t.fine_classes:
        lines.append(f"{f.name} {t.high_class(f.parent).name}")
    return "\n".join(lines) + "\n"


def default_taxonomy() -> Taxonomy:
    """The bundled hierarchy: 16 apparel + 4 person high classes, 146 fine classes."""
    text = resources.files("stitch").joinpath("data/default_taxonomy.txt").read_text("utf-8")
    return load_taxonomy(text)
