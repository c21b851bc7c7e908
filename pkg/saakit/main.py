#!/usr/bin/env python3

import json
import re
import sys
import zlib
from collections.abc import Callable, Iterable
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from functools import partial, wraps
from pathlib import Path
from typing import Annotated, Any, Literal, TypeVar

import numpy as np
import typer
from loguru import logger
from pydantic import BaseModel, ValidationError

from .align import NormConfig, score_pair
from .audio import (
    Wave,
    concat,
    cut_span,
    mixdown as mix_waves,
    read_wav_any,
    write_wav,
)
from .cluster import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    ClusterAssignment,
    kmeans_fit,
    mean_speaker_embeddings,
    read_assignment,
    read_embeddings,
    relabel_targets,
    write_assignment,
    write_model,
)
from .code_quoting import format_lines
from .corpus import (
    BUCKETS,
    DEFAULT_CAP_S,
    build_instance,
    chunk_session,
    load_manifest,
    read_chunks,
    read_id_map,
    render_reference,
    resolve_overlaps,
    validate_manifest,
    write_chunks,
)
from .env_vars import settings
from .errors import (
    EmptyReferenceError,
    ManifestError,
    SaakitError,
    SaaParseError,
)
from .report import (
    PairResult,
    aggregate_groups,
    render_buckets,
    render_summary,
)
from .synth import (
    ErrorModel,
    SampleSource,
    SynthChunk,
    SynthSpec,
    SynthStyle,
    corrupt_hypothesis,
    source_streams,
    synth_chunk,
)
from .tags import (
    SAA_SUFFIX,
    SaaDoc,
    TagStyle,
    parse_saa,
    resolve_leading,
    write_saa,
)


CHUNK_BUCKET_RE = re.compile(r"_(\d+)s_\d+$")

T = TypeVar("T")
R = TypeVar("R")

app = typer.Typer(no_args_is_help=True, pretty_exceptions_enable=False)


class OutputFormat(str, Enum):
    JSON = "json"
    TEXT = "text"


class PairSpec(BaseModel):
    chunk_id: str
    ref_path: Path
    hyp_path: Path
    target_bucket_s: int | None = None
    system: str = "system"
    dataset: str = "dataset"


class ScoreJob(BaseModel):
    pair: PairSpec
    bucket: int
    cfg: NormConfig
    hyp_mode: Literal["strict", "lenient"]
    fix_headers: bool


def _exits_on_error(fn: Callable[..., T]) -> Callable[..., T]:
    @wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> T:
        try:
            return fn(*args, **kwargs)
        except (SaakitError, ValueError) as e:
            # pydantic's ValidationError is a ValueError
            logger.error(str(e))
            raise typer.Exit(1)

    return wrapper


def _print_json(obj: Any) -> None:
    print(json.dumps(obj, indent=2))


def _fan_out(fn: Callable[[T], R], items: Iterable[T], jobs: int) -> list[R]:
    if jobs <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(fn, items))


def _session_mono(path: Path) -> Wave:
    channels = read_wav_any(path)
    if len(channels) == 1:
        return channels[0]
    return mix_waves(*channels)


def _sample_wave(
    cache: dict[Path, list[Wave]], audio_dir: Path, sample: SampleSource
) -> Wave:
    path = audio_dir / f"{sample.session_id}.wav"
    if path not in cache:
        cache[path] = read_wav_any(path)
    channels = cache[path]
    if len(channels) == 1:
        source = channels[0]
    elif sample.channel is not None:
        source = channels[sample.channel]
    else:
        source = mix_waves(*channels)
    return cut_span(source, sample.start_s, sample.end_s)


def _stitch(built: SynthChunk, audio_dir: Path, gap_s: float) -> Wave:
    cache: dict[Path, list[Wave]] = {}
    return concat(
        [_sample_wave(cache, audio_dir, s) for s in built.samples],
        gap_s=gap_s,
    )


def _read_doc(
    path: Path, mode: Literal["strict", "lenient"], fix_headers: bool
) -> SaaDoc:
    try:
        doc = parse_saa(
            path.read_text(encoding="utf-8"), mode=mode, fix_headers=fix_headers
        )
    except SaaParseError as e:
        raise ManifestError(str(e), path=path) from e
    if doc.flags:
        logger.debug(f"{path}: {sorted(f.value for f in doc.flags)}")
    return resolve_leading(doc)


def _score_one(job: ScoreJob) -> PairResult:
    pair = job.pair
    ref = _read_doc(pair.ref_path, "strict", job.fix_headers)
    if pair.hyp_path.exists():
        hyp = _read_doc(pair.hyp_path, job.hyp_mode, job.fix_headers)
    else:
        logger.warning(f"{pair.chunk_id}: no hypothesis, scoring as empty")
        hyp = SaaDoc()
    try:
        report = score_pair(ref, hyp, job.cfg)
    except EmptyReferenceError as e:
        raise ManifestError(str(e), path=pair.ref_path) from e
    return PairResult(
        chunk_id=pair.chunk_id,
        system=pair.system,
        dataset=pair.dataset,
        bucket=job.bucket,
        report=report,
    )


def _bucket_of(pair: PairSpec) -> int:
    bucket = pair.target_bucket_s
    if bucket is None:
        m = CHUNK_BUCKET_RE.search(pair.chunk_id)
        if m is None:
            raise ManifestError(
                f"Cannot tell the duration bucket of {pair.chunk_id!r}"
            )
        bucket = int(m.group(1))
    if bucket not in BUCKETS:
        raise ManifestError(
            f"{pair.chunk_id}: bucket {bucket}s is not one of {BUCKETS}"
        )
    return bucket


def _read_pairs(source: str) -> list[PairSpec]:
    if source == "-":
        lines = sys.stdin.read().splitlines()
        base, path = Path.cwd(), None
    else:
        path = Path(source)
        lines = path.read_text(encoding="utf-8").splitlines()
        base = path.parent

    pairs = []
    for line_num, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            pair = PairSpec.model_validate_json(line)
        except ValidationError as e:
            raise ManifestError(str(e), path=path, line_num=line_num) from e
        pairs.append(
            pair.model_copy(
                update={
                    "ref_path": base / pair.ref_path,
                    "hyp_path": base / pair.hyp_path,
                }
            )
        )
    return pairs


def _dir_pairs(
    ref_dir: Path, hyp_dir: Path, system: str, dataset: str
) -> list[PairSpec]:
    pairs = []
    for ref_path in sorted(ref_dir.glob(f"*{SAA_SUFFIX}")):
        chunk_id = ref_path.name[: -len(SAA_SUFFIX)]
        pairs.append(
            PairSpec(
                chunk_id=chunk_id,
                ref_path=ref_path,
                hyp_path=hyp_dir / ref_path.name,
                system=system,
                dataset=dataset,
            )
        )
    return pairs


def _file_seed(seed: int, name: str) -> int:
    # stable per file, independent of which other files are present
    state = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    return int(state.generate_state(1)[0])


@app.callback()
def main(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log debug output.")
    ] = False,
):
    """Speaker-attributed transcription corpus and scoring tools."""
    logger.remove()
    level = "DEBUG" if verbose else settings.LOG_LEVEL
    logger.add(sink=sys.stderr, level=level)


@app.command()
@_exits_on_error
def validate(
    manifest: Annotated[
        Path,
        typer.Argument(help="Utterance manifest (JSONL)", exists=True),
    ],
    output_format: Annotated[
        OutputFormat, typer.Option("--format", help="Output format")
    ] = OutputFormat.JSON,
):
    diagnostics = validate_manifest(manifest)
    if output_format == OutputFormat.JSON:
        _print_json([d.model_dump(mode="json") for d in diagnostics])
    else:
        content = manifest.read_text(encoding="utf-8")
        for d in diagnostics:
            where = f"{manifest}:{d.line_num}" if d.line_num else str(manifest)
            print(f"{d.level}: {where}: {d.msg}")
            if d.line_num:
                print(format_lines(content, [d.line_num], rel_path=manifest))
        if not diagnostics:
            print(f"{manifest}: OK")
    if any(d.level == "error" for d in diagnostics):
        raise typer.Exit(1)


@app.command()
@_exits_on_error
def chunk(
    manifest: Annotated[
        Path,
        typer.Argument(help="Utterance manifest (JSONL)", exists=True),
    ],
    out_dir: Annotated[
        Path, typer.Option(help="Where chunks.jsonl and refs/ are written")
    ],
    target: Annotated[
        list[int] | None,
        typer.Option(
            help="Target duration bucket in seconds. Repeat as needed. "
            "Defaults to every bucket."
        ),
    ] = None,
    cap: Annotated[
        float, typer.Option(help="Hard cap on chunk duration in seconds")
    ] = DEFAULT_CAP_S,
    min_speakers: Annotated[
        int, typer.Option(help="Keep only chunks with this many speakers")
    ] = 1,
    max_speakers: Annotated[
        int | None,
        typer.Option(help="Drop chunks with more speakers than this"),
    ] = None,
    drop_overlaps: Annotated[
        bool,
        typer.Option(help="Drop chunks where two speakers talk at once"),
    ] = False,
    style: Annotated[
        TagStyle, typer.Option(help="Tag style of the reference targets")
    ] = TagStyle.RELATIVE,
    id_map: Annotated[
        Path | None,
        typer.Option(
            help="JSONL of {speaker_id, pin} (id style) or "
            "{speaker_id, cluster} (cluster style)",
            exists=True,
        ),
    ] = None,
    audio_dir: Annotated[
        Path | None,
        typer.Option(
            help="Directory of <session_id>.wav to cut chunk audio from",
            exists=True,
            file_okay=False,
        ),
    ] = None,
    instances: Annotated[
        bool, typer.Option(help="Also write training instances")
    ] = False,
):
    targets = target or list(BUCKETS)
    ids = None
    if style != TagStyle.RELATIVE:
        if id_map is None:
            raise typer.BadParameter(f"--style {style.value} needs --id-map")
        ids = read_id_map(id_map, "pin" if style == TagStyle.ID else "cluster")

    corpus = load_manifest(manifest)
    refs_dir = out_dir / "refs"
    refs_dir.mkdir(parents=True, exist_ok=True)
    wav_dir = out_dir / "audio"
    if audio_dir is not None:
        wav_dir.mkdir(exist_ok=True)

    chunks = []
    audio_paths: dict[str, Path] = {}
    for session in corpus.sessions:
        resolved = resolve_overlaps(session)
        session_chunks = [
            c
            for t in targets
            for c in chunk_session(
                resolved, t, cap, min_speakers, max_speakers, drop_overlaps
            )
        ]
        if audio_dir is not None and session_chunks:
            source = _session_mono(audio_dir / f"{session.id}.wav")
            for c in session_chunks:
                audio_paths[c.chunk_id] = wav_dir / f"{c.chunk_id}.wav"
                write_wav(
                    audio_paths[c.chunk_id],
                    cut_span(source, c.span_start_s, c.span_end_s),
                )
        logger.debug(f"{session.id}: {len(session_chunks)} chunks")
        chunks.extend(session_chunks)

    write_chunks(out_dir / "chunks.jsonl", chunks)
    for c in chunks:
        write_saa(
            refs_dir / f"{c.chunk_id}{SAA_SUFFIX}",
            render_reference(c, style, ids),
        )
    if instances:
        (out_dir / "instances.jsonl").write_text(
            "".join(
                build_instance(
                    c, style, ids, audio_paths.get(c.chunk_id)
                ).model_dump_json()
                + "\n"
                for c in chunks
            ),
            encoding="utf-8",
        )

    logger.info(f"Wrote {len(chunks)} chunks to {out_dir}")
    _print_json(
        {
            "chunks": len(chunks),
            "per_bucket": {
                str(t): sum(c.target_bucket_s == t for c in chunks)
                for t in targets
            },
        }
    )


@app.command()
@_exits_on_error
def mixdown(
    wav_in: Annotated[
        list[Path],
        typer.Argument(
            help="One stereo WAV, or two mono WAVs of equal length",
            exists=True,
        ),
    ],
    out: Annotated[Path, typer.Option(help="Mono WAV to write")],
):
    waves = [w for p in wav_in for w in read_wav_any(p)]
    if len(waves) != 2:
        raise typer.BadParameter(
            f"Need exactly two channels in total, got {len(waves)}"
        )
    mixed = mix_waves(waves[0], waves[1])
    write_wav(out, mixed)
    logger.info(f"Wrote {mixed.duration_s:.3f}s to {out}")


@app.command()
@_exits_on_error
def synth(
    pool: Annotated[
        Path,
        typer.Argument(help="Utterance manifest to draw from", exists=True),
    ],
    out_dir: Annotated[
        Path, typer.Option(help="Where chunks.jsonl and refs/ are written")
    ],
    seed: Annotated[int, typer.Option(help="Random seed")],
    count: Annotated[int, typer.Option(help="Chunks to generate")] = 100,
    style: Annotated[
        SynthStyle, typer.Option(help="How samples are stitched")
    ] = SynthStyle.ALTERNATING,
    target: Annotated[
        int, typer.Option(help="Target duration bucket in seconds")
    ] = 30,
    min_speakers: Annotated[int, typer.Option()] = 2,
    max_speakers: Annotated[int, typer.Option()] = 4,
    sample_min: Annotated[
        float, typer.Option(help="Shortest sample in seconds")
    ] = 2.0,
    sample_max: Annotated[
        float, typer.Option(help="Longest sample in seconds")
    ] = 8.0,
    gap: Annotated[
        float, typer.Option(help="Silence between turns in seconds")
    ] = 0.0,
    audio_dir: Annotated[
        Path | None,
        typer.Option(
            help="Directory of <session_id>.wav to stitch chunk audio from",
            exists=True,
            file_okay=False,
        ),
    ] = None,
    jobs: Annotated[int, typer.Option(help="Worker processes")] = settings.JOBS,
):
    spec = SynthSpec(
        n_speakers_min=min_speakers,
        n_speakers_max=max_speakers,
        target_s=target,
        sample_min_s=sample_min,
        sample_max_s=sample_max,
        style=style,
        seed=seed,
        gap_s=gap,
    )
    corpus = load_manifest(pool)
    streams = source_streams(corpus, spec)
    built = _fan_out(partial(synth_chunk, streams, spec), range(count), jobs)

    refs_dir = out_dir / "refs"
    refs_dir.mkdir(parents=True, exist_ok=True)
    write_chunks(out_dir / "chunks.jsonl", [b.chunk for b in built])
    (out_dir / "sources.jsonl").write_text(
        "".join(
            json.dumps(
                {
                    "chunk_id": b.chunk.chunk_id,
                    "samples": [s.model_dump(mode="json") for s in b.samples],
                }
            )
            + "\n"
            for b in built
        ),
        encoding="utf-8",
    )
    for b in built:
        write_saa(
            refs_dir / f"{b.chunk.chunk_id}{SAA_SUFFIX}",
            render_reference(b.chunk),
        )
    if audio_dir is not None:
        wav_dir = out_dir / "audio"
        wav_dir.mkdir(exist_ok=True)
        for b in built:
            write_wav(
                wav_dir / f"{b.chunk.chunk_id}.wav",
                _stitch(b, audio_dir, spec.gap_s),
            )

    logger.info(f"Wrote {len(built)} {style.value} chunks to {out_dir}")
    _print_json(
        {
            "chunks": len(built),
            "style": style.value,
            "target_s": target,
            "seed": seed,
        }
    )


@app.command()
@_exits_on_error
def cluster(
    embeddings: Annotated[
        Path,
        typer.Argument(help="Embedding JSONL", exists=True),
    ],
    out_dir: Annotated[
        Path,
        typer.Option(help="Where model.json and assignment.jsonl go"),
    ],
    seed: Annotated[int, typer.Option(help="Random seed")],
    k: Annotated[int, typer.Option(help="Number of clusters")] = 100,
    max_iter: Annotated[int, typer.Option()] = DEFAULT_MAX_ITER,
    tol: Annotated[float, typer.Option()] = DEFAULT_TOL,
    normalize: Annotated[
        bool, typer.Option(help="L2-normalize per-speaker mean embeddings")
    ] = True,
):
    entries = read_embeddings(embeddings)
    means = mean_speaker_embeddings(
        [(e.speaker, e.vector) for e in entries], normalize=normalize
    )
    model, labels = kmeans_fit(
        np.stack([v for _, v in means]), k, seed, max_iter=max_iter, tol=tol
    )
    assignment = ClusterAssignment(
        map={spk: int(label) for (spk, _), label in zip(means, labels)}
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    write_model(out_dir / "model.json", model)
    write_assignment(out_dir / "assignment.jsonl", assignment)
    _print_json(
        {
            "k": model.k,
            "speakers": len(means),
            "iterations_run": model.iterations_run,
            "inertia": model.inertia,
            "clusters_used": len(set(assignment.map.values())),
        }
    )


@app.command()
@_exits_on_error
def relabel(
    chunks: Annotated[
        Path, typer.Argument(help="Chunk manifest (JSONL)", exists=True)
    ],
    assignment: Annotated[
        Path, typer.Argument(help="Cluster assignment JSONL", exists=True)
    ],
    out_dir: Annotated[
        Path, typer.Option(help="Where cluster-tagged references go")
    ],
):
    chunk_list = read_chunks(chunks)
    docs = relabel_targets(chunk_list, read_assignment(assignment))
    out_dir.mkdir(parents=True, exist_ok=True)
    for c, doc in zip(chunk_list, docs):
        write_saa(out_dir / f"{c.chunk_id}{SAA_SUFFIX}", doc)
    logger.info(f"Wrote {len(docs)} references to {out_dir}")


@app.command()
@_exits_on_error
def corrupt(
    ref_dir: Annotated[
        Path,
        typer.Argument(
            help=f"Directory of *{SAA_SUFFIX} references",
            exists=True,
            file_okay=False,
        ),
    ],
    out_dir: Annotated[
        Path, typer.Option(help="Where hypotheses and ledger.json go")
    ],
    seed: Annotated[int, typer.Option(help="Random seed")],
    p_flip: Annotated[
        float, typer.Option(help="Per-word speaker flip probability")
    ] = 0.0,
    p_sub: Annotated[float, typer.Option()] = 0.0,
    p_del: Annotated[float, typer.Option()] = 0.0,
    p_ins: Annotated[float, typer.Option()] = 0.0,
):
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger: dict[str, Any] = {}
    totals = {"n_ref_words": 0, "subs": 0, "dels": 0, "ins": 0, "flips": 0}
    for ref_path in sorted(ref_dir.glob(f"*{SAA_SUFFIX}")):
        em = ErrorModel(
            p_spk_flip=p_flip,
            p_sub=p_sub,
            p_del=p_del,
            p_ins=p_ins,
            seed=_file_seed(seed, ref_path.name),
        )
        hyp, counts = corrupt_hypothesis(
            _read_doc(ref_path, "strict", False), em
        )
        write_saa(out_dir / ref_path.name, hyp)
        chunk_id = ref_path.name[: -len(SAA_SUFFIX)]
        ledger[chunk_id] = counts.model_dump()
        for key in totals:
            totals[key] += getattr(counts, key)

    (out_dir / "ledger.json").write_text(
        json.dumps({"totals": totals, "files": ledger}, indent=2) + "\n",
        encoding="utf-8",
    )
    _print_json(totals)


@app.command()
@_exits_on_error
def score(
    pairs: Annotated[
        str | None,
        typer.Option(
            help="Pairing JSONL of {chunk_id, ref_path, hyp_path, "
            "target_bucket_s?, system?, dataset?}; '-' reads stdin"
        ),
    ] = None,
    ref_dir: Annotated[
        Path | None, typer.Option(exists=True, file_okay=False)
    ] = None,
    hyp_dir: Annotated[
        Path | None, typer.Option(exists=True, file_okay=False)
    ] = None,
    system: Annotated[
        str, typer.Option(help="System name for --ref-dir/--hyp-dir")
    ] = "system",
    dataset: Annotated[
        str, typer.Option(help="Dataset name for --ref-dir/--hyp-dir")
    ] = "dataset",
    lowercase: Annotated[bool, typer.Option()] = True,
    strip_punct: Annotated[bool, typer.Option()] = True,
    collapse_ws: Annotated[bool, typer.Option()] = True,
    lenient: Annotated[
        bool, typer.Option(help="Parse hypotheses leniently")
    ] = False,
    fix_headers: Annotated[
        bool, typer.Option(help="Canonicalize loose speaker headers first")
    ] = False,
    jobs: Annotated[int, typer.Option(help="Worker processes")] = settings.JOBS,
    output_format: Annotated[
        OutputFormat, typer.Option("--format", help="Output format")
    ] = OutputFormat.JSON,
    out: Annotated[
        Path | None, typer.Option(help="Also write the JSON report here")
    ] = None,
):
    if (pairs is None) == (ref_dir is None or hyp_dir is None):
        raise typer.BadParameter(
            "Give either --pairs or both --ref-dir and --hyp-dir"
        )
    if pairs is not None:
        pair_list = _read_pairs(pairs)
    else:
        assert ref_dir is not None and hyp_dir is not None
        pair_list = _dir_pairs(ref_dir, hyp_dir, system, dataset)
    if not pair_list:
        raise ManifestError("No pairs to score")

    cfg = NormConfig(
        lowercase=lowercase, strip_punct=strip_punct, collapse_ws=collapse_ws
    )
    score_jobs = [
        ScoreJob(
            pair=p,
            bucket=_bucket_of(p),
            cfg=cfg,
            hyp_mode="lenient" if lenient else "strict",
            fix_headers=fix_headers,
        )
        for p in pair_list
    ]
    results = _fan_out(_score_one, score_jobs, jobs)
    aggregates = aggregate_groups(results)

    report = {
        "pairs": [r.model_dump(mode="json") for r in results],
        "aggregates": [a.model_dump(mode="json") for a in aggregates],
    }
    if out is not None:
        out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if output_format == OutputFormat.JSON:
        _print_json(report)
    else:
        print(render_summary(aggregates))
        for agg in aggregates:
            print()
            print(render_buckets(agg))


def cli() -> int:
    app()
    return 0


if __name__ == "__main__":
    exit(cli())
