import re
from collections.abc import Iterable, Mapping
from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import SaaParseError


SAA_SUFFIX = ".saa.txt"

HEADER_RE = re.compile(r"\[Speaker (\d+)(?: (ID|cluster) (\d+))?\]:")
# anything spelled like a header, valid or not; other casings are plain text
CANDIDATE_RE = re.compile(r"\[\s*Speaker\b[^\[\]\n]*\]\s*:?")
LOOSE_HEADER_RE = re.compile(
    r"\[\s*speaker\s*(\d+)\s*(?:(id|cluster)\s*(\d+)\s*)?\]\s*:?",
    re.IGNORECASE,
)


class QualifierKind(str, Enum):
    ID = "ID"
    CLUSTER = "cluster"


class TagStyle(str, Enum):
    RELATIVE = "relative"
    ID = "id"
    CLUSTER = "cluster"


class ParseFlag(str, Enum):
    LEADING_TEXT = "leading_text"
    INDEX_GAP = "index_gap"
    EMPTY_TURN = "empty_turn"
    MALFORMED_HEADER = "malformed_header"


class Qualifier(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: QualifierKind
    value: int = Field(ge=0)


class SpeakerTag(BaseModel):
    model_config = ConfigDict(frozen=True)

    # 0 is reserved for the synthetic turn holding untagged leading text
    rel: int = Field(ge=0)
    qualifier: Qualifier | None = None

    def header(self) -> str:
        if self.rel == 0:
            raise ValueError("Synthetic speaker 0 has no header")
        if self.qualifier is None:
            return f"[Speaker {self.rel}]:"
        kind, value = self.qualifier.kind.value, self.qualifier.value
        return f"[Speaker {self.rel} {kind} {value}]:"


class Turn(BaseModel):
    model_config = ConfigDict(frozen=True)

    tag: SpeakerTag
    words: tuple[str, ...]

    @field_validator("words")
    @classmethod
    def _check_words(cls, words: tuple[str, ...]) -> tuple[str, ...]:
        if not words:
            raise ValueError("Turn must contain at least one word")
        if any(not w or w != w.strip() or len(w.split()) != 1 for w in words):
            raise ValueError("Words must be non-empty and whitespace-free")
        return words


class SaaDoc(BaseModel):
    model_config = ConfigDict(frozen=True)

    turns: tuple[Turn, ...] = ()
    flags: frozenset[ParseFlag] = frozenset()


def speakers(doc: SaaDoc) -> list[int]:
    """Relative indices in order of first appearance."""
    seen: dict[int, None] = {}
    for turn in doc.turns:
        seen.setdefault(turn.tag.rel, None)
    return list(seen)


def _gap_flags(turns: Iterable[Turn]) -> set[ParseFlag]:
    rels = {t.tag.rel for t in turns if t.tag.rel > 0}
    if rels and rels != set(range(1, max(rels) + 1)):
        return {ParseFlag.INDEX_GAP}
    return set()


def normalize_headers(text: str) -> str:
    def canonical(m: re.Match[str]) -> str:
        rel, kind, value = m.groups()
        if kind is None:
            return f"[Speaker {int(rel)}]:"
        kind = "ID" if kind.lower() == "id" else "cluster"
        return f"[Speaker {int(rel)} {kind} {int(value)}]:"

    return LOOSE_HEADER_RE.sub(canonical, text)


def parse_saa(
    text: str,
    mode: Literal["strict", "lenient"] = "strict",
    fix_headers: bool = False,
) -> SaaDoc:
    if fix_headers:
        text = normalize_headers(text)
    strict = mode == "strict"
    flags: set[ParseFlag] = set()

    headers: list[tuple[int, int, SpeakerTag]] = []
    for m in CANDIDATE_RE.finditer(text):
        fm = HEADER_RE.fullmatch(m.group())
        rel = int(fm.group(1)) if fm else 0
        if fm is None or rel < 1:
            if strict:
                raise SaaParseError(
                    f"Malformed speaker header {m.group()!r}", m.start()
                )
            flags.add(ParseFlag.MALFORMED_HEADER)
            continue
        qualifier = None
        if fm.group(2) is not None:
            qualifier = Qualifier(
                kind=QualifierKind(fm.group(2)), value=int(fm.group(3))
            )
        headers.append(
            (m.start(), m.end(), SpeakerTag(rel=rel, qualifier=qualifier))
        )

    turns: list[Turn] = []

    leading_end = headers[0][0] if headers else len(text)
    leading = text[:leading_end].split()
    if leading:
        if strict:
            offset = len(text) - len(text.lstrip())
            raise SaaParseError("Untagged text before first header", offset)
        flags.add(ParseFlag.LEADING_TEXT)
        turns.append(Turn(tag=SpeakerTag(rel=0), words=tuple(leading)))

    for i, (start, end, tag) in enumerate(headers):
        body_end = headers[i + 1][0] if i + 1 < len(headers) else len(text)
        words = text[end:body_end].split()
        if not words:
            if strict:
                raise SaaParseError("Empty turn body", start)
            flags.add(ParseFlag.EMPTY_TURN)
            continue
        turns.append(Turn(tag=tag, words=tuple(words)))

    flags |= _gap_flags(turns)
    return SaaDoc(turns=tuple(turns), flags=frozenset(flags))


def render_saa(doc: SaaDoc) -> str:
    return "\n".join(
        f"{turn.tag.header()} {' '.join(turn.words)}" for turn in doc.turns
    )


def word_speaker_pairs(doc: SaaDoc) -> list[tuple[str, int]]:
    pairs = []
    for turn in doc.turns:
        if turn.tag.rel == 0:
            raise ValueError("Document still holds untagged leading text")
        pairs.extend((w, turn.tag.rel) for w in turn.words)
    return pairs


def strip_tags(doc: SaaDoc) -> list[str]:
    return [w for turn in doc.turns for w in turn.words]


def doc_from_pairs(
    pairs: Iterable[tuple[str, int]],
    qualifiers: Mapping[int, Qualifier | None] | None = None,
) -> SaaDoc:
    qualifiers = qualifiers or {}
    turns: list[Turn] = []
    current_rel: int | None = None
    current_words: list[str] = []

    def flush() -> None:
        if current_rel is not None and current_words:
            tag = SpeakerTag(
                rel=current_rel, qualifier=qualifiers.get(current_rel)
            )
            turns.append(Turn(tag=tag, words=tuple(current_words)))

    for word, rel in pairs:
        if rel != current_rel:
            flush()
            current_rel, current_words = rel, []
        current_words.append(word)
    flush()

    return SaaDoc(turns=tuple(turns), flags=frozenset(_gap_flags(turns)))


def read_saa(
    path: Path, mode: Literal["strict", "lenient"] = "strict"
) -> SaaDoc:
    return parse_saa(path.read_text(encoding="utf-8"), mode=mode)


def write_saa(path: Path, doc: SaaDoc) -> None:
    text = render_saa(doc)
    path.write_text(text + "\n" if text else "", encoding="utf-8", newline="\n")


def resolve_leading(doc: SaaDoc) -> SaaDoc:
    """Give untagged leading words to the first tagged speaker."""
    if not doc.turns or doc.turns[0].tag.rel != 0:
        return doc
    lead, rest = doc.turns[0], doc.turns[1:]
    if not rest:
        merged = Turn(tag=SpeakerTag(rel=1), words=lead.words)
    else:
        merged = Turn(tag=rest[0].tag, words=lead.words + rest[0].words)
        rest = rest[1:]
    return SaaDoc(turns=(merged, *rest), flags=doc.flags)
