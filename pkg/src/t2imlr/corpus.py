"""Caption corpus preparation: noun filtering and label extraction.

Captions are kept only when they mention at least one target category (by
name or declared synonym) as a whole token; the kept caption's labels are
exactly the mentioned categories. Matching is deliberately mechanical:
case folding, ASCII punctuation stripping, an explicit synonym table, and a
declared plural rule ("s"/"es" appended to a surface form). No stemming or
POS tagging.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusParseError

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Split on whitespace, strip leading/trailing ASCII punctuation, casefold.

    Tokens that are empty after stripping are dropped.
    """
    out = []
    for raw in text.split():
        tok = raw.strip(_PUNCT).casefold()
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class CategorySet:
    """Ordered class names; position defines the class index."""

    names: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        names = tuple(n.strip().casefold() for n in self.names)
        if len(names) < 2:
            raise ValueError("need at least 2 categories")
        if any(not n for n in names):
            raise ValueError("category names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class SynonymMap:
    """Surface word -> class index, many to one."""

    mapping: dict[str, int]

    @staticmethod
    def empty() -> "SynonymMap":
        return SynonymMap({})

    def validated(self, classes: CategorySet) -> "SynonymMap":
        folded = {}
        for word, idx in self.mapping.items():
            if not 0 <= idx < len(classes):
                raise ValueError(f"synonym {word!r} targets unknown class index {idx}")
            folded[word.strip().casefold()] = idx
        return SynonymMap(folded)


@dataclass
class CaptionRecord:
    """A kept caption and its multi-hot label vector."""

    text: str
    labels: np.ndarray  # uint8, length C, at least one bit set

    def label_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels)]

    def __eq__(self, other) -> bool:
        return (isinstance(other, CaptionRecord)
                and self.text == other.text
                and np.array_equal(self.labels, other.labels))


class NounFilter:
    """Whole-token matcher for class names and synonyms.

    Multi-word class names match as contiguous token runs. Every surface
    form also matches with a trailing "s" or "es" (plural rule).
    """

    def __init__(self, classes: CategorySet, synonyms: SynonymMap | None = None):
        synonyms = (synonyms or SynonymMap.empty()).validated(classes)
        self.classes = classes
        # surface token sequence -> class index
        self._phrases: dict[tuple[str, ...], int] = {}
        for idx, name in enumerate(classes.names):
            self._add_surface(tuple(name.split()), idx)
        for word, idx in synonyms.mapping.items():
            self._add_surface(tuple(word.split()), idx)
        self._max_len = max(len(p) for p in self._phrases)

    def _add_surface(self, words: tuple[str, ...], idx: int) -> None:
        self._phrases[words] = idx
        plural_base = words[:-1]
        self._phrases[plural_base + (words[-1] + "s",)] = idx
        self._phrases[plural_base + (words[-1] + "es",)] = idx

    def match(self, caption: str) -> set[int]:
        """Class indices mentioned in the caption."""
        tokens = tokenize(caption)
        found: set[int] = set()
        for start in range(len(tokens)):
            for length in range(1, self._max_len + 1):
                phrase = tuple(tokens[start:start + length])
                if len(phrase) < length:
                    break
                idx = self._phrases.get(phrase)
                if idx is not None:
                    found.add(idx)
        return found


def build_noun_filter(classes: CategorySet, synonyms: SynonymMap | None = None) -> NounFilter:
    return NounFilter(classes, synonyms)


def filter_caption(caption: str, noun_filter: NounFilter) -> CaptionRecord | None:
    """Label a caption by the categories it mentions; None when it mentions none."""
    matched = noun_filter.match(caption)
    if not matched:
        return None
    labels = np.zeros(len(noun_filter.classes), dtype=np.uint8)
    labels[sorted(matched)] = 1
    return CaptionRecord(text=caption, labels=labels)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_classes(path: str | Path) -> CategorySet:
    """One class name per line; order defines indices. Blank lines ignored."""
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            names.append(line)
    return CategorySet(tuple(names))


def load_synonyms(path: str | Path, classes: CategorySet) -> SynonymMap:
    """Lines of "surface_word<TAB>class_name"."""
    mapping: dict[str, int] = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusParseError(no, "expected 'surface<TAB>class_name'")
        surface, target = line.split("\t", 1)
        target = target.strip().casefold()
        if target not in classes.index:
            raise CorpusParseError(no, f"unknown class name {target!r}")
        mapping[surface.strip().casefold()] = classes.index[target]
    return SynonymMap(mapping).validated(classes)


def _record_to_line(rec: CaptionRecord) -> str:
    return json.dumps({"text": rec.text, "labels": rec.label_indices()},
                      ensure_ascii=False)


def write_corpus(records: list[CaptionRecord], path: str | Path) -> None:
    """UTF-8 JSONL, one {"text": ..., "labels": [ascending ints]} per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(_record_to_line(rec))
            f.write("\n")


def load_corpus(path: str | Path, num_classes: int) -> list[CaptionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusParseError(no, f"bad JSON: {e.msg}") from e
            if not isinstance(obj, dict) or "text" not in obj or "labels" not in obj:
                raise CorpusParseError(no, "expected object with 'text' and 'labels'")
            idxs = obj["labels"]
            if (not isinstance(idxs, list) or not idxs
                    or any(not isinstance(i, int) for i in idxs)):
                raise CorpusParseError(no, "'labels' must be a non-empty list of ints")
            if any(not 0 <= i < num_classes for i in idxs):
                raise CorpusParseError(no, f"label index out of range 0..{num_classes - 1}")
            labels = np.zeros(num_classes, dtype=np.uint8)
            labels[idxs] = 1
            records.append(CaptionRecord(text=str(obj["text"]), labels=labels))
    return records
