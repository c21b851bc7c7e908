from enum import Enum

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .corpus import BUCKETS, Chunk, ChunkTurn, Corpus, Utterance, chunk_id_for
from .errors import SynthesisError
from .tags import Qualifier, SaaDoc, doc_from_pairs, word_speaker_pairs


DEFAULT_MAX_RETRIES = 10


class SynthStyle(str, Enum):
    ALTERNATING = "alternating"
    SIDE_CONCAT = "side-concat"


class SynthSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_speakers_min: int = 2
    n_speakers_max: int = 4
    target_s: int = 30
    sample_min_s: float = Field(default=2.0, gt=0)
    sample_max_s: float = 8.0
    style: SynthStyle = SynthStyle.ALTERNATING
    seed: int
    gap_s: float = Field(default=0.0, ge=0)
    max_retries: int = Field(default=DEFAULT_MAX_RETRIES, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthSpec":
        if not 2 <= self.n_speakers_min <= self.n_speakers_max:
            raise ValueError("need 2 <= n_speakers_min <= n_speakers_max")
        if self.sample_min_s > self.sample_max_s:
            raise ValueError("sample_min_s exceeds sample_max_s")
        if self.target_s not in BUCKETS:
            raise ValueError(f"target_s must be one of {BUCKETS}")
        return self


class ErrorModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    p_spk_flip: float = Field(default=0.0, ge=0, le=1)
    p_sub: float = Field(default=0.0, ge=0, le=1)
    p_del: float = Field(default=0.0, ge=0, le=1)
    p_ins: float = Field(default=0.0, ge=0, le=1)
    seed: int

    @model_validator(mode="after")
    def _check_total(self) -> "ErrorModel":
        if self.p_sub + self.p_del > 1:
            raise ValueError("p_sub + p_del must not exceed 1")
        return self


class InjectedCounts(BaseModel):
    n_ref_words: int
    subs: int = 0
    dels: int = 0
    ins: int = 0
    flips: int = 0


class SampleSource(BaseModel):
    model_config = ConfigDict(frozen=True)

    session_id: str
    channel: int | None
    start_s: float
    end_s: float


class SynthChunk(BaseModel):
    model_config = ConfigDict(frozen=True)

    chunk: Chunk
    # one entry per turn, in turn order
    samples: tuple[SampleSource, ...]


Stream = tuple[Utterance, ...]


def _speaker_streams(corpus: Corpus) -> dict[str, list[Stream]]:
    streams: dict[str, list[Stream]] = {}
    for session in corpus.sessions:
        for speaker_id in session.speakers():
            stream = tuple(
                u for u in session.utterances if u.speaker_id == speaker_id
            )
            streams.setdefault(speaker_id, []).append(stream)
    return streams


def _side_streams(corpus: Corpus) -> dict[str, list[Stream]]:
    streams: dict[str, list[Stream]] = {}
    for session in corpus.sessions:
        channels = sorted(
            {u.channel for u in session.utterances},
            key=lambda c: -1 if c is None else c,
        )
        if None in channels:
            raise SynthesisError(
                f"Session {session.id!r} lacks channel labels"
            )
        if len(channels) != 2:
            raise SynthesisError(
                f"Session {session.id!r} has {len(channels)} channels, "
                "expected 2"
            )
        for channel in channels:
            side = tuple(u for u in session.utterances if u.channel == channel)
            side_speakers = {u.speaker_id for u in side}
            if len(side_speakers) != 1:
                raise SynthesisError(
                    f"Session {session.id!r} channel {channel} mixes "
                    f"speakers {sorted(side_speakers)}"
                )
            streams.setdefault(side_speakers.pop(), []).append(side)
    return streams


def _take_sample(
    stream: Stream, cursor: int, spec: SynthSpec, rng: np.random.Generator
) -> tuple[list[Utterance], float, int] | None:
    """Next run of whole consecutive utterances lasting sample_min_s to
    sample_max_s, starting at cursor. None once the stream is exhausted."""
    want = rng.uniform(spec.sample_min_s, spec.sample_max_s)
    taken: list[Utterance] = []
    end = 0.0
    i = cursor
    while i < len(stream):
        u = stream[i]
        span = max(end, u.end_s) - taken[0].start_s if taken else u.duration_s
        if span > spec.sample_max_s:
            if taken and end - taken[0].start_s >= spec.sample_min_s:
                break
            if not taken:
                i += 1
            taken = []
            continue
        taken.append(u)
        end = max(end, u.end_s) if len(taken) > 1 else u.end_s
        i += 1
        if span >= want:
            break
    if not taken or end - taken[0].start_s < spec.sample_min_s:
        return None
    return taken, end - taken[0].start_s, i


def _build_one(
    streams: dict[str, list[Stream]],
    spec: SynthSpec,
    index: int,
    rng: np.random.Generator,
) -> SynthChunk | None:
    speakers = sorted(streams)
    n = int(rng.integers(spec.n_speakers_min, spec.n_speakers_max + 1))
    order = [speakers[i] for i in rng.choice(len(speakers), n, replace=False)]

    chosen: dict[str, Stream] = {}
    cursors: dict[str, int] = {}
    for speaker_id in order:
        candidates = streams[speaker_id]
        stream = candidates[int(rng.integers(len(candidates)))]
        chosen[speaker_id] = stream
        cursors[speaker_id] = int(rng.integers(max(1, len(stream) // 2)))

    turns: list[ChunkTurn] = []
    samples: list[SampleSource] = []
    total = 0.0
    while total < spec.target_s:
        speaker_id = order[len(turns) % n]
        taken = _take_sample(
            chosen[speaker_id], cursors[speaker_id], spec, rng
        )
        if taken is None:
            logger.warning(
                f"Chunk {index}: material of {speaker_id!r} exhausted at "
                f"{total:.3f}s, discarding"
            )
            return None
        utts, duration, cursors[speaker_id] = taken
        if turns:
            total += spec.gap_s
        total += duration
        turns.append(
            ChunkTurn(
                speaker_id=speaker_id, text=" ".join(u.text for u in utts)
            )
        )
        samples.append(
            SampleSource(
                session_id=utts[0].session_id,
                channel=utts[0].channel,
                start_s=utts[0].start_s,
                end_s=utts[0].start_s + duration,
            )
        )

    source = f"synth-{spec.style.value}"
    present = len({t.speaker_id for t in turns})
    if present < spec.n_speakers_min:
        logger.warning(
            f"Chunk {index}: only {present} speakers reached the "
            f"{spec.target_s}s target, discarding"
        )
        return None

    chunk = Chunk(
        chunk_id=chunk_id_for(source, spec.target_s, index),
        source_session=source,
        span_start_s=0.0,
        span_end_s=total,
        target_bucket_s=spec.target_s,
        turns=tuple(turns),
    )
    return SynthChunk(chunk=chunk, samples=tuple(samples))


def synth_chunk(
    streams: dict[str, list[Stream]], spec: SynthSpec, index: int
) -> SynthChunk:
    # per-chunk stream so results do not depend on scheduling
    rng = np.random.default_rng([spec.seed, index])
    for attempt in range(spec.max_retries):
        built = _build_one(streams, spec, index, rng)
        if built is not None:
            return built
        logger.debug(f"Chunk {index}: redraw {attempt + 1}")
    raise SynthesisError(
        f"Chunk {index}: no valid draw in {spec.max_retries} attempts"
    )


def source_streams(pool: Corpus, spec: SynthSpec) -> dict[str, list[Stream]]:
    if spec.style == SynthStyle.ALTERNATING:
        streams = _speaker_streams(pool)
    else:
        streams = _side_streams(pool)
    if len(streams) < spec.n_speakers_max:
        what = "speakers" if spec.style == SynthStyle.ALTERNATING else "sides"
        raise SynthesisError(
            f"Pool has {len(streams)} distinct {what}, need "
            f"{spec.n_speakers_max}"
        )
    return streams


def generate(pool: Corpus, spec: SynthSpec, count: int) -> list[SynthChunk]:
    streams = source_streams(pool, spec)
    return [synth_chunk(streams, spec, i) for i in range(count)]


def build_alternating(
    pool: Corpus, spec: SynthSpec, count: int
) -> list[Chunk]:
    if spec.style != SynthStyle.ALTERNATING:
        raise ValueError("build_alternating needs an alternating spec")
    return [s.chunk for s in generate(pool, spec, count)]


def build_side_concat(
    two_speaker_corpus: Corpus, spec: SynthSpec, count: int
) -> list[Chunk]:
    if spec.style != SynthStyle.SIDE_CONCAT:
        raise ValueError("build_side_concat needs a side-concat spec")
    return [s.chunk for s in generate(two_speaker_corpus, spec, count)]


def _rescorable(events: list[str], n_del: int, n_ins: int) -> bool:
    """Whether the newest event lets a cheaper alignment trade deletions
    and insertions for substitutions.

    A stretch of the edit stream with `k` correct words, `d` deletions and
    `i` insertions aligns at least as cheaply off-diagonal once
    `k <= min(d, i)`. `n_del` and `n_ins` are the document totals so far.
    """
    correct = dels = ins = 0
    for event in reversed(events):
        if event == "c":
            correct += 1
            if correct > min(n_del, n_ins):
                return False
        elif event == "d":
            dels += 1
        elif event == "i":
            ins += 1
        paired = min(dels, ins)
        if paired and paired >= correct:
            return True
    return False


def corrupt_hypothesis(
    ref: SaaDoc, em: ErrorModel
) -> tuple[SaaDoc, InjectedCounts]:
    """Corrupt every word independently with seeded substitutions,
    deletions, insertions and speaker flips.

    A deletion or insertion is skipped only where it would pair up with
    the opposite kind into something an optimal alignment scores as
    substitutions, so on references with distinct words the returned
    counts equal what `score_pair` finds.
    """
    rng = np.random.default_rng(em.seed)
    pairs = word_speaker_pairs(ref)
    rels = sorted({rel for _, rel in pairs})
    qualifiers: dict[int, Qualifier | None] = {}
    for turn in ref.turns:
        qualifiers.setdefault(turn.tag.rel, turn.tag.qualifier)

    counts = InjectedCounts(n_ref_words=len(pairs))
    # c(orrect) s(ubstituted) d(eleted) i(nserted), in hypothesis order
    events: list[str] = []
    out: list[tuple[str, int]] = []
    for word, rel in pairs:
        u_edit, u_ins, u_flip, u_pick = rng.random(4)

        new_rel = rel
        if u_flip < em.p_spk_flip and len(rels) > 1:
            others = [r for r in rels if r != rel]
            new_rel = others[int(u_pick * len(others))]

        if u_edit < em.p_sub:
            counts.subs += 1
            events.append("s")
            out.append((f"<sub{counts.subs}>", new_rel))
            counts.flips += int(new_rel != rel)
        else:
            deleted = False
            if u_edit < em.p_sub + em.p_del:
                events.append("d")
                deleted = not _rescorable(events, counts.dels + 1, counts.ins)
                if deleted:
                    counts.dels += 1
                else:
                    events.pop()
            if not deleted:
                events.append("c")
                out.append((word, new_rel))
                counts.flips += int(new_rel != rel)

        if u_ins < em.p_ins:
            events.append("i")
            if _rescorable(events, counts.dels, counts.ins + 1):
                events.pop()
            else:
                counts.ins += 1
                out.append((f"<ins{counts.ins}>", new_rel))

    return doc_from_pairs(out, qualifiers), counts
