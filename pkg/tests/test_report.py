import pytest

from saakit.align import ScoreReport
from saakit.report import (
    PairResult,
    aggregate,
    aggregate_groups,
    render_buckets,
    render_summary,
)


def result(
    bucket: int,
    n_ref: int,
    subs: int,
    matched: int,
    spk_err: int,
    system: str = "sys",
    dataset: str = "data",
) -> PairResult:
    report = ScoreReport(
        n_ref=n_ref,
        correct=matched - subs,
        subs=subs,
        dels=n_ref - matched,
        ins=0,
        matched=matched,
        spk_err=spk_err,
        wer=(subs + n_ref - matched) / n_ref,
        wder=spk_err / matched if matched else None,
    )
    return PairResult(
        chunk_id=f"c_{bucket}s_0000",
        system=system,
        dataset=dataset,
        bucket=bucket,
        report=report,
    )


def test_macro_is_mean_of_bucket_means():
    agg = aggregate(
        [
            result(10, 10, 0, 10, 1),
            result(10, 10, 0, 10, 3),
            result(30, 100, 0, 100, 50),
        ]
    )
    assert agg.per_bucket[10].mean_wder == pytest.approx(0.2)
    assert agg.per_bucket[30].mean_wder == pytest.approx(0.5)
    assert agg.overall_macro.wder == pytest.approx(0.35)
    assert agg.overall_micro.wder == pytest.approx(54 / 120)
    assert agg.overall_macro.wer == 0
    assert agg.n_chunks == 3
    assert list(agg.per_bucket) == [10, 30]


def test_micro_pools_counts():
    agg = aggregate([result(60, 4, 1, 4, 0), result(60, 6, 0, 3, 0)])
    stats = agg.per_bucket[60]
    assert stats.mean_wer == pytest.approx((0.25 + 0.5) / 2)
    assert stats.micro_wer == pytest.approx(4 / 10)


def test_undefined_wder_is_counted_not_averaged():
    agg = aggregate([result(10, 5, 0, 0, 0), result(10, 5, 0, 5, 1)])
    stats = agg.per_bucket[10]
    assert stats.n_undefined_wder == 1
    assert stats.mean_wder == pytest.approx(0.2)
    assert agg.n_undefined_wder == 1

    only_undefined = aggregate([result(120, 5, 0, 0, 0)])
    assert only_undefined.per_bucket[120].mean_wder is None
    assert only_undefined.overall_macro.wder is None
    assert only_undefined.overall_micro.wder is None


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_groups_keep_first_appearance_order():
    aggs = aggregate_groups(
        [
            result(10, 10, 0, 10, 0, system="b", dataset="x"),
            result(10, 10, 0, 10, 0, system="a", dataset="x"),
            result(10, 10, 0, 10, 5, system="b", dataset="x"),
        ]
    )
    assert [(a.system, a.dataset) for a in aggs] == [("b", "x"), ("a", "x")]
    assert aggs[0].n_chunks == 2


def test_summary_table():
    aggs = aggregate_groups(
        [
            result(10, 10, 1, 10, 1, system="base", dataset="calls"),
            result(10, 10, 0, 10, 0, system="base", dataset="meetings"),
            result(10, 3, 0, 3, 1, system="tuned", dataset="calls"),
        ]
    )
    lines = render_summary(aggs).splitlines()
    assert lines[0].split() == ["WDER", "(%)", "calls", "meetings"]
    assert set(lines[1]) == {"-", " "}
    assert lines[2].split() == ["base", "10.0", "0.0"]
    assert lines[3].split() == ["tuned", "33.3", "-"]
    assert lines[4] == ""
    assert lines[5].split() == ["WER", "(%)", "calls", "meetings"]
    assert lines[7].split() == ["base", "10.0", "0.0"]


def test_bucket_table():
    agg = aggregate([result(10, 10, 0, 10, 1), result(30, 10, 0, 10, 3)])
    lines = render_buckets(agg).splitlines()
    assert lines[0].startswith("sys / data")
    assert lines[2].split() == ["10s", "1", "10.0", "10.0", "0.0", "0.0"]
    assert lines[3].split() == ["30s", "1", "30.0", "30.0", "0.0", "0.0"]
    assert lines[4].split() == ["macro", "2", "20.0", "-", "0.0", "-"]
    assert lines[5].split() == ["micro", "2", "-", "20.0", "-", "0.0"]
