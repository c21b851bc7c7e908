from collections.abc import Sequence
from statistics import fmean
from typing import Any

from pydantic import BaseModel
from tabulate import tabulate

from .align import ScoreReport
from .corpus import BUCKETS


class PairResult(BaseModel):
    chunk_id: str
    system: str
    dataset: str
    bucket: int
    report: ScoreReport


class Ratios(BaseModel):
    wder: float | None
    wer: float | None


class BucketStats(BaseModel):
    n_chunks: int
    n_undefined_wder: int
    mean_wder: float | None
    mean_wer: float | None
    micro_wder: float | None
    micro_wer: float | None


class AggregateReport(BaseModel):
    system: str
    dataset: str
    per_bucket: dict[int, BucketStats]
    # headline: mean over the defined bucket means
    overall_macro: Ratios
    overall_micro: Ratios
    n_chunks: int
    n_undefined_wder: int


def _mean(values: Sequence[float]) -> float | None:
    return fmean(values) if values else None


def _micro(reports: Sequence[ScoreReport]) -> Ratios:
    matched = sum(r.matched for r in reports)
    n_ref = sum(r.n_ref for r in reports)
    errors = sum(r.subs + r.dels + r.ins for r in reports)
    return Ratios(
        wder=sum(r.spk_err for r in reports) / matched if matched else None,
        wer=errors / n_ref if n_ref else None,
    )


def _bucket_stats(reports: Sequence[ScoreReport]) -> BucketStats:
    wders = [r.wder for r in reports if r.wder is not None]
    micro = _micro(reports)
    return BucketStats(
        n_chunks=len(reports),
        n_undefined_wder=len(reports) - len(wders),
        mean_wder=_mean(wders),
        mean_wer=_mean([r.wer for r in reports]),
        micro_wder=micro.wder,
        micro_wer=micro.wer,
    )


def aggregate(results: Sequence[PairResult]) -> AggregateReport:
    if not results:
        raise ValueError("Nothing to aggregate")
    per_bucket = {}
    for bucket in BUCKETS:
        reports = [r.report for r in results if r.bucket == bucket]
        if reports:
            per_bucket[bucket] = _bucket_stats(reports)

    bucket_wders = [
        s.mean_wder for s in per_bucket.values() if s.mean_wder is not None
    ]
    bucket_wers = [
        s.mean_wer for s in per_bucket.values() if s.mean_wer is not None
    ]
    return AggregateReport(
        system=results[0].system,
        dataset=results[0].dataset,
        per_bucket=per_bucket,
        overall_macro=Ratios(wder=_mean(bucket_wders), wer=_mean(bucket_wers)),
        overall_micro=_micro([r.report for r in results]),
        n_chunks=len(results),
        n_undefined_wder=sum(s.n_undefined_wder for s in per_bucket.values()),
    )


def aggregate_groups(results: Sequence[PairResult]) -> list[AggregateReport]:
    groups: dict[tuple[str, str], list[PairResult]] = {}
    for r in results:
        groups.setdefault((r.system, r.dataset), []).append(r)
    return [aggregate(g) for g in groups.values()]


def _pct(value: float | None) -> float | None:
    return None if value is None else 100 * value


def render_summary(aggregates: Sequence[AggregateReport]) -> str:
    """System x dataset tables, WDER then WER, in percent."""
    systems = list(dict.fromkeys(a.system for a in aggregates))
    datasets = list(dict.fromkeys(a.dataset for a in aggregates))
    by_key = {(a.system, a.dataset): a for a in aggregates}

    blocks = []
    for metric in ("wder", "wer"):
        rows = []
        for system in systems:
            row: list[Any] = [system]
            for dataset in datasets:
                agg = by_key.get((system, dataset))
                row.append(
                    _pct(getattr(agg.overall_macro, metric)) if agg else None
                )
            rows.append(row)
        headers = [f"{metric.upper()} (%)", *datasets]
        blocks.append(
            tabulate(
                rows,
                headers=headers,
                floatfmt=".1f",
                missingval="-",
                tablefmt="simple",
            )
        )
    return "\n\n".join(blocks)


def render_buckets(agg: AggregateReport) -> str:
    rows: list[list[Any]] = []
    for bucket, stats in agg.per_bucket.items():
        rows.append(
            [
                f"{bucket}s",
                stats.n_chunks,
                _pct(stats.mean_wder),
                _pct(stats.micro_wder),
                _pct(stats.mean_wer),
                _pct(stats.micro_wer),
            ]
        )
    macro, micro = agg.overall_macro, agg.overall_micro
    rows.append(
        ["macro", agg.n_chunks, _pct(macro.wder), None, _pct(macro.wer), None]
    )
    rows.append(
        ["micro", agg.n_chunks, None, _pct(micro.wder), None, _pct(micro.wer)]
    )
    headers = [
        f"{agg.system} / {agg.dataset}",
        "chunks",
        "WDER",
        "WDER(micro)",
        "WER",
        "WER(micro)",
    ]
    return tabulate(
        rows,
        headers=headers,
        floatfmt=".1f",
        missingval="-",
        tablefmt="simple",
    )
