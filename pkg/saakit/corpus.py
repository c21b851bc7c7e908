import json
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Literal

import numpy as np
from loguru import logger
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_serializer,
    field_validator,
    model_validator,
)

from .errors import ManifestError, MissingSpeakerError
from .tags import (
    Qualifier,
    QualifierKind,
    SaaDoc,
    SpeakerTag,
    TagStyle,
    Turn,
    render_saa,
)


BUCKETS = (10, 30, 60, 120)
DEFAULT_CAP_S = 120.0
# millisecond granularity for every timestamp we write
TIME_DECIMALS = 3

PROMPT = (
    "<audio> transcribe and denote who is speaking by adding tags such as "
    "[Speaker 1]: and [Speaker 2]: before speaker turns"
)


class Utterance(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    session_id: str
    speaker_id: str
    channel: int | None = Field(default=None, ge=0)
    start_s: float = Field(ge=0)
    end_s: float
    text: str

    @field_validator("text")
    @classmethod
    def _check_text(cls, text: str) -> str:
        if not text.strip():
            raise ValueError("text is empty")
        return text

    @model_validator(mode="after")
    def _check_span(self) -> "Utterance":
        if self.end_s <= self.start_s:
            raise ValueError(
                f"end_s ({self.end_s}) must be greater than start_s "
                f"({self.start_s})"
            )
        return self

    @field_serializer("start_s", "end_s")
    def _round_time(self, t: float) -> float:
        return round(t, TIME_DECIMALS)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def canonical_key(u: Utterance) -> tuple[float, float, str]:
    return (u.start_s, u.end_s, u.speaker_id)


class Session(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    utterances: tuple[Utterance, ...] = ()

    @model_validator(mode="after")
    def _check_members(self) -> "Session":
        for u in self.utterances:
            if u.session_id != self.id:
                raise ValueError(
                    f"Utterance of session {u.session_id!r} in session "
                    f"{self.id!r}"
                )
        return self

    @classmethod
    def canonical(cls, id: str, utterances: Iterable[Utterance]) -> "Session":
        ordered = sorted(utterances, key=canonical_key)
        return cls(id=id, utterances=tuple(ordered))

    def speakers(self) -> list[str]:
        return list(dict.fromkeys(u.speaker_id for u in self.utterances))


class Corpus(BaseModel):
    model_config = ConfigDict(frozen=True)

    sessions: tuple[Session, ...] = ()

    def utterances(self) -> list[Utterance]:
        return [u for s in self.sessions for u in s.utterances]

    @classmethod
    def from_utterances(cls, utterances: Iterable[Utterance]) -> "Corpus":
        by_session: dict[str, list[Utterance]] = {}
        for u in utterances:
            by_session.setdefault(u.session_id, []).append(u)
        return cls(
            sessions=tuple(
                Session.canonical(sid, utts) for sid, utts in by_session.items()
            )
        )


class ChunkTurn(BaseModel):
    model_config = ConfigDict(frozen=True)

    speaker_id: str
    text: str


class Chunk(BaseModel):
    model_config = ConfigDict(frozen=True)

    chunk_id: str
    source_session: str
    span_start_s: float = Field(ge=0)
    span_end_s: float
    target_bucket_s: int
    turns: tuple[ChunkTurn, ...]

    @field_validator("target_bucket_s")
    @classmethod
    def _check_bucket(cls, bucket: int) -> int:
        if bucket not in BUCKETS:
            raise ValueError(f"target bucket must be one of {BUCKETS}")
        return bucket

    @field_validator("turns")
    @classmethod
    def _check_turns(
        cls, turns: tuple[ChunkTurn, ...]
    ) -> tuple[ChunkTurn, ...]:
        if not turns:
            raise ValueError("chunk has no turns")
        return turns

    @model_validator(mode="after")
    def _check_span(self) -> "Chunk":
        if self.span_end_s <= self.span_start_s:
            raise ValueError("chunk span is empty")
        return self

    @field_serializer("span_start_s", "span_end_s")
    def _round_time(self, t: float) -> float:
        return round(t, TIME_DECIMALS)

    @property
    def duration_s(self) -> float:
        return self.span_end_s - self.span_start_s

    def speakers(self) -> list[str]:
        return list(dict.fromkeys(t.speaker_id for t in self.turns))


class Diagnostic(BaseModel):
    line_num: int | None
    level: Literal["error", "warning"]
    msg: str


class TrainingInstance(BaseModel):
    chunk_id: str
    audio: str | None
    prompt: str
    target: str


def _describe(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}" if loc else err["msg"])
    return "; ".join(parts)


def _parse_lines(
    lines: Iterable[str],
) -> tuple[list[Utterance], list[Diagnostic]]:
    utterances = []
    diagnostics = []
    for line_num, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            diagnostics.append(
                Diagnostic(
                    line_num=line_num, level="error", msg=f"Malformed JSON: {e}"
                )
            )
            continue
        if not isinstance(obj, dict):
            diagnostics.append(
                Diagnostic(
                    line_num=line_num,
                    level="error",
                    msg="Expected a JSON object",
                )
            )
            continue
        try:
            utterances.append(Utterance.model_validate(obj))
        except ValidationError as e:
            diagnostics.append(
                Diagnostic(line_num=line_num, level="error", msg=_describe(e))
            )
    return utterances, diagnostics


def load_manifest(path: Path) -> Corpus:
    with path.open(encoding="utf-8") as f:
        utterances, diagnostics = _parse_lines(f)
    for d in diagnostics:
        raise ManifestError(d.msg, path=path, line_num=d.line_num)
    corpus = Corpus.from_utterances(utterances)
    logger.debug(
        f"Loaded {len(utterances)} utterances in {len(corpus.sessions)} "
        f"sessions from {path}"
    )
    return corpus


def validate_manifest(path: Path) -> list[Diagnostic]:
    with path.open(encoding="utf-8") as f:
        utterances, diagnostics = _parse_lines(f)
    corpus = Corpus.from_utterances(utterances)
    for session in corpus.sessions:
        dropped = len(session.utterances) - len(
            resolve_overlaps(session).utterances
        )
        if dropped:
            diagnostics.append(
                Diagnostic(
                    line_num=None,
                    level="warning",
                    msg=f"Session {session.id!r}: {dropped} utterances fully "
                    "overlapped by another speaker",
                )
            )
        channels = {u.channel for u in session.utterances}
        if None in channels and len(channels) > 1:
            diagnostics.append(
                Diagnostic(
                    line_num=None,
                    level="warning",
                    msg=f"Session {session.id!r}: channel labels on some "
                    "utterances only",
                )
            )
    return diagnostics


def serialize_manifest(corpus: Corpus) -> str:
    return "".join(
        json.dumps(
            u.model_dump(mode="json", exclude_none=True), ensure_ascii=False
        )
        + "\n"
        for u in corpus.utterances()
    )


def write_manifest(path: Path, corpus: Corpus) -> None:
    path.write_text(serialize_manifest(corpus), encoding="utf-8")


def resolve_overlaps(session: Session) -> Session:
    utts = session.utterances
    if not utts:
        return session
    starts = np.array([u.start_s for u in utts])
    ends = np.array([u.end_s for u in utts])
    spk = np.array([u.speaker_id for u in utts])
    order = np.arange(len(utts))

    kept = []
    for i, u in enumerate(utts):
        contains = (starts <= u.start_s) & (ends >= u.end_s) & (spk != spk[i])
        # identical spans: the canonically earlier utterance survives
        identical = (starts == u.start_s) & (ends == u.end_s)
        contains &= ~identical | (order < i)
        if contains.any():
            logger.debug(
                f"Dropping contained utterance {u.speaker_id}"
                f"[{u.start_s}, {u.end_s}] {u.text!r}"
            )
            continue
        kept.append(u)

    return Session.canonical(session.id, kept)


def chunk_id_for(session_id: str, target_s: int, index: int) -> str:
    return f"{session_id}_{target_s}s_{index:04d}"


def _make_chunk(
    session_id: str, target_s: int, index: int, utts: list[Utterance]
) -> Chunk:
    return Chunk(
        chunk_id=chunk_id_for(session_id, target_s, index),
        source_session=session_id,
        span_start_s=utts[0].start_s,
        span_end_s=max(u.end_s for u in utts),
        target_bucket_s=target_s,
        turns=tuple(
            ChunkTurn(speaker_id=u.speaker_id, text=u.text) for u in utts
        ),
    )


def has_cross_talk(utts: list[Utterance]) -> bool:
    """Whether two different speakers talk at once somewhere in `utts`."""
    ordered = sorted(utts, key=canonical_key)
    for i, u in enumerate(ordered):
        for v in ordered[i + 1 :]:
            if v.start_s >= u.end_s:
                break
            if v.speaker_id != u.speaker_id:
                return True
    return False


def chunk_session(
    session: Session,
    target_s: int,
    cap_s: float = DEFAULT_CAP_S,
    min_speakers: int = 1,
    max_speakers: int | None = None,
    drop_overlaps: bool = False,
) -> list[Chunk]:
    if target_s not in BUCKETS:
        raise ValueError(f"target_s must be one of {BUCKETS}")
    if cap_s < target_s:
        raise ValueError(f"cap_s ({cap_s}) is below target_s ({target_s})")
    if max_speakers is not None and max_speakers < min_speakers:
        raise ValueError(
            f"max_speakers ({max_speakers}) is below min_speakers "
            f"({min_speakers})"
        )

    def rejection(utts: list[Utterance]) -> str | None:
        n = len({u.speaker_id for u in utts})
        if n < min_speakers:
            return f"fewer than {min_speakers} speakers"
        if max_speakers is not None and n > max_speakers:
            return f"more than {max_speakers} speakers"
        if drop_overlaps and has_cross_talk(utts):
            return "overlapping speech"
        return None

    chunks: list[Chunk] = []
    current: list[Utterance] = []

    def discard(reason: str) -> None:
        if not current:
            return
        span = max(u.end_s for u in current) - current[0].start_s
        log = logger.warning if span >= target_s / 2 else logger.debug
        log(
            f"{session.id}: dropping {span:.3f}s of material short of the "
            f"{target_s}s target ({reason})"
        )
        current.clear()

    for u in session.utterances:
        if u.duration_s > cap_s:
            logger.warning(
                f"{session.id}: utterance [{u.start_s}, {u.end_s}] longer than "
                f"the {cap_s}s cap, dropped"
            )
            discard("over-cap utterance")
            continue

        if current:
            end = max(u.end_s, *(c.end_s for c in current))
            span = end - current[0].start_s
            longest = max(u.duration_s, *(c.duration_s for c in current))
            if span > cap_s or span >= target_s + longest:
                discard("pause before next utterance")

        current.append(u)
        span = max(c.end_s for c in current) - current[0].start_s
        if span >= target_s:
            reason = rejection(current)
            if reason is None:
                chunks.append(
                    _make_chunk(session.id, target_s, len(chunks), current)
                )
            else:
                logger.debug(
                    f"{session.id}: chunk at {current[0].start_s} skipped, "
                    f"{reason}"
                )
            current = []

    discard("end of session")
    return chunks


def render_reference(
    chunk: Chunk,
    style: TagStyle = TagStyle.RELATIVE,
    id_map: Mapping[str, int] | None = None,
) -> SaaDoc:
    if style != TagStyle.RELATIVE:
        if id_map is None:
            raise ValueError(f"{style.value} style needs an id map")
        for speaker_id in chunk.speakers():
            if speaker_id not in id_map:
                raise MissingSpeakerError(speaker_id)

    rel_of: dict[str, int] = {}
    merged: list[tuple[str, list[str]]] = []
    for turn in chunk.turns:
        rel_of.setdefault(turn.speaker_id, len(rel_of) + 1)
        words = turn.text.split()
        if merged and merged[-1][0] == turn.speaker_id:
            merged[-1][1].extend(words)
        else:
            merged.append((turn.speaker_id, words))

    turns = []
    for speaker_id, words in merged:
        qualifier = None
        if style == TagStyle.ID:
            assert id_map is not None
            qualifier = Qualifier(
                kind=QualifierKind.ID, value=id_map[speaker_id]
            )
        elif style == TagStyle.CLUSTER:
            assert id_map is not None
            qualifier = Qualifier(
                kind=QualifierKind.CLUSTER, value=id_map[speaker_id]
            )
        tag = SpeakerTag(rel=rel_of[speaker_id], qualifier=qualifier)
        turns.append(Turn(tag=tag, words=tuple(words)))
    return SaaDoc(turns=tuple(turns))


def build_instance(
    chunk: Chunk,
    style: TagStyle = TagStyle.RELATIVE,
    id_map: Mapping[str, int] | None = None,
    audio_path: Path | None = None,
) -> TrainingInstance:
    return TrainingInstance(
        chunk_id=chunk.chunk_id,
        audio=str(audio_path) if audio_path is not None else None,
        prompt=PROMPT,
        target=render_saa(render_reference(chunk, style, id_map)),
    )


def read_chunks(path: Path) -> list[Chunk]:
    chunks = []
    with path.open(encoding="utf-8") as f:
        for line_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                chunks.append(Chunk.model_validate_json(line))
            except ValidationError as e:
                raise ManifestError(
                    _describe(e), path=path, line_num=line_num
                ) from e
    return chunks


def serialize_chunks(chunks: Iterable[Chunk]) -> str:
    return "".join(
        json.dumps(c.model_dump(mode="json"), ensure_ascii=False) + "\n"
        for c in chunks
    )


def write_chunks(path: Path, chunks: Iterable[Chunk]) -> None:
    path.write_text(serialize_chunks(chunks), encoding="utf-8")


def read_id_map(path: Path, field: str) -> dict[str, int]:
    id_map = {}
    with path.open(encoding="utf-8") as f:
        for line_num, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                id_map[str(obj["speaker_id"])] = int(obj[field])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(
                    f"Bad id map entry: {e!r}", path=path, line_num=line_num
                ) from e
    return id_map
