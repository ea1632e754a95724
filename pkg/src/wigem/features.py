"""Predictor construction from the authored requirement mapping.

Each (data_element_text, data_type_text) pair maps to a requirement name, a
frequency and an intensity on [0, 100], and a requirement category.  The
SOC code contributes its 2- and 3-digit prefixes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .ingest import SurveyRecord

CATEGORIES = ("COG", "EDU", "ENV", "PHY")

FEATURE_COLUMNS = ("occupation", "requirement", "frequency", "intensity", "soc2", "soc3", "req_category")
CATEGORICAL_COLUMNS = ("occupation", "requirement", "soc2", "soc3", "req_category")


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class MappingEntry:
    additive_group: int
    element: str
    level: str
    requirement: str
    frequency: float
    intensity: float
    category: str


class MappingTable:
    def __init__(self, entries: Iterable[MappingEntry]):
        self.entries: dict[tuple[str, str], MappingEntry] = {}
        requirement_of: dict[int, str] = {}
        for e in entries:
            key = (e.element, e.level)
            if key in self.entries:
                raise MappingError(f"duplicate mapping entry for {key}")
            if e.category not in CATEGORIES:
                raise MappingError(f"category {e.category!r} of {key} is not one of {CATEGORIES}")
            for name, v in (("frequency", e.frequency), ("intensity", e.intensity)):
                if not 0.0 <= v <= 100.0:
                    raise MappingError(f"{name} {v} of {key} outside [0, 100]")
            prev = requirement_of.setdefault(e.additive_group, e.requirement)
            if prev != e.requirement:
                raise MappingError(
                    f"additive group {e.additive_group} maps to both {prev!r} and {e.requirement!r}")
            self.entries[key] = e

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: tuple[str, str]) -> MappingEntry:
        try:
            return self.entries[key]
        except KeyError:
            raise MappingError(f"no mapping for element/type pair {key!r}") from None

    def __contains__(self, key) -> bool:
        return key in self.entries

    @property
    def requirements(self) -> list[str]:
        return list(dict.fromkeys(e.requirement for e in self.entries.values()))

    def level_catalog(self) -> dict[int, list[tuple[str, str]]]:
        """Levels per additive group, in config order."""
        out: dict[int, list[tuple[str, str]]] = {}
        for e in self.entries.values():
            out.setdefault(e.additive_group, []).append((e.element, e.level))
        return out

    def to_config(self) -> dict:
        return {"entries": [
            {"additive_group": e.additive_group, "element": e.element, "level": e.level,
             "requirement": e.requirement, "frequency": e.frequency,
             "intensity": e.intensity, "category": e.category}
            for e in self.entries.values()
        ]}


def load_mapping(config: str | Path | Mapping) -> MappingTable:
    """Load a mapping table from a YAML file or an already parsed mapping."""
    if not isinstance(config, Mapping):
        with open(config, encoding="utf-8") as fh:
            config = yaml.safe_load(fh)
    if not isinstance(config, Mapping) or "entries" not in config:
        raise MappingError("mapping config needs a top-level 'entries' list")
    entries = []
    for i, raw in enumerate(config["entries"]):
        try:
            entries.append(MappingEntry(
                additive_group=int(raw["additive_group"]),
                element=str(raw["element"]),
                level="" if raw.get("level") is None else str(raw["level"]),
                requirement=str(raw["requirement"]),
                frequency=float(raw["frequency"]),
                intensity=float(raw["intensity"]),
                category=str(raw["category"]),
            ))
        except KeyError as err:
            raise MappingError(f"entry {i} lacks field {err.args[0]!r}") from None
    return MappingTable(entries)


def lifting_carrying_table() -> MappingTable:
    """The built-in Lifting/carrying excerpt (23 element/type pairs)."""
    text = resources.files("wigem").joinpath("data/lifting_carrying.yaml").read_text(encoding="utf-8")
    return load_mapping(yaml.safe_load(text))


@dataclass(frozen=True)
class FeatureVector:
    occupation: str
    requirement: str
    frequency: float
    intensity: float
    soc2: str
    soc3: str
    req_category: str


def soc_prefix(soc_code: str, digits: int) -> str:
    if len(soc_code) < 3 or not soc_code.isdigit():
        raise MappingError(f"SOC code {soc_code!r} needs at least 3 digits")
    return soc_code[:digits]


def transform(record: SurveyRecord, table: MappingTable) -> FeatureVector:
    e = table[record.level_key]
    return FeatureVector(
        occupation=record.occupation,
        requirement=e.requirement,
        frequency=e.frequency,
        intensity=e.intensity,
        soc2=soc_prefix(record.soc_code, 2),
        soc3=soc_prefix(record.soc_code, 3),
        req_category=e.category,
    )


class Encoder:
    """Closed integer dictionaries for the categorical predictors."""

    def __init__(self, vocab: Mapping[str, Sequence[str]]):
        self.vocab = {k: list(v) for k, v in vocab.items()}
        self._index = {k: {s: i for i, s in enumerate(v)} for k, v in self.vocab.items()}

    @classmethod
    def fit(cls, vectors: Iterable[FeatureVector]) -> "Encoder":
        vectors = list(vectors)
        return cls({c: sorted({getattr(v, c) for v in vectors}) for c in CATEGORICAL_COLUMNS})

    @property
    def categorical(self) -> list[int | None]:
        """Cardinality per feature column (None for numeric columns)."""
        return [len(self.vocab[c]) if c in self.vocab else None for c in FEATURE_COLUMNS]

    def encode(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        out = np.empty((len(vectors), len(FEATURE_COLUMNS)))
        for i, v in enumerate(vectors):
            for j, c in enumerate(FEATURE_COLUMNS):
                x = getattr(v, c)
                if c in self._index:
                    try:
                        x = self._index[c][x]
                    except KeyError:
                        raise MappingError(f"{c} value {x!r} is not in the encoding dictionary") from None
                out[i, j] = x
        return out

    def dumps(self) -> str:
        return json.dumps(self.vocab, indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Encoder":
        return cls(json.loads(text))
