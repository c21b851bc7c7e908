import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from saakit.audio import Wave, read_wav, write_wav
from saakit.cluster import ClusterAssignment, write_assignment
from saakit.main import app

from .conftest import utt, write_jsonl


runner = CliRunner()


def invoke(*args: str | Path, input: str | None = None):
    return runner.invoke(app, [str(a) for a in args], input=input)


def conversation(path: Path, n: int = 12) -> Path:
    rows = [
        utt("AB"[i % 2], 5.0 * i, 5.0 * (i + 1), text=f"a{i} b{i}")
        for i in range(n)
    ]
    return write_jsonl(path, rows)


def reader_pool(path: Path) -> Path:
    rows = []
    for s in range(4):
        for i in range(40):
            rows.append(
                utt(
                    f"reader{s}",
                    3.0 * i,
                    3.0 * i + 2.5,
                    text=f"r{s} u{i}",
                    session_id=f"book{s}",
                )
            )
    return write_jsonl(path, rows)


@pytest.fixture
def chunked(tmp_path) -> Path:
    out = tmp_path / "chunks"
    manifest = conversation(tmp_path / "m.jsonl")
    result = invoke("chunk", manifest, "--out-dir", out, "--target", "10")
    assert result.exit_code == 0, result.output
    return out


def test_validate_ok(tmp_path):
    result = invoke("validate", conversation(tmp_path / "m.jsonl"))
    assert result.exit_code == 0
    assert json.loads(result.stdout) == []


def test_validate_reports_errors(tmp_path):
    path = write_jsonl(tmp_path / "m.jsonl", [utt("A", 0, 1), utt("A", 3, 2)])
    result = invoke("validate", path)
    assert result.exit_code == 1
    (diagnostic,) = json.loads(result.stdout)
    assert diagnostic["line_num"] == 2
    assert diagnostic["level"] == "error"

    result = invoke("validate", path, "--format", "text")
    assert result.exit_code == 1
    assert "error:" in result.stdout


def test_chunk_writes_references(chunked):
    chunks = (chunked / "chunks.jsonl").read_text().splitlines()
    assert len(chunks) == 6
    refs = sorted((chunked / "refs").iterdir())
    assert [p.name for p in refs][0] == "s1_10s_0000.saa.txt"
    assert refs[0].read_text().startswith("[Speaker 1]: a0 b0\n[Speaker 2]:")


def test_chunk_id_style_needs_map(tmp_path):
    manifest = conversation(tmp_path / "m.jsonl")
    out = tmp_path / "out"
    result = invoke("chunk", manifest, "--out-dir", out, "--style", "id")
    assert result.exit_code == 2


def test_chunk_speaker_and_overlap_filters(tmp_path):
    rows = [
        utt("A", 0, 6, text="a"),
        utt("B", 5, 11, text="b"),
        utt("A", 11, 16, text="c"),
        utt("B", 16, 21, text="d"),
    ]
    manifest = write_jsonl(tmp_path / "m.jsonl", rows)

    def n_chunks(name: str, *args: str) -> int:
        out = tmp_path / name
        result = invoke(
            "chunk", manifest, "--out-dir", out, "--target", "10", *args
        )
        assert result.exit_code == 0, result.output
        return len((out / "chunks.jsonl").read_text().splitlines())

    assert n_chunks("all") == 2
    assert n_chunks("clean", "--drop-overlaps") == 1
    assert n_chunks("solo", "--max-speakers", "1") == 0

    out = tmp_path / "bad"
    args = ["--min-speakers", "2", "--max-speakers", "1"]
    assert invoke("chunk", manifest, "--out-dir", out, *args).exit_code == 1


def test_score_identical_dirs(chunked):
    refs = chunked / "refs"
    result = invoke("score", "--ref-dir", refs, "--hyp-dir", refs)
    assert result.exit_code == 0, result.output
    report = json.loads(result.stdout)
    assert len(report["pairs"]) == 6
    (agg,) = report["aggregates"]
    assert agg["overall_macro"] == {"wder": 0.0, "wer": 0.0}
    assert list(agg["per_bucket"]) == ["10"]


def test_score_text_format(chunked, tmp_path):
    refs = chunked / "refs"
    out = tmp_path / "report.json"
    args = ["--ref-dir", refs, "--hyp-dir", refs, "--format", "text"]
    result = invoke("score", *args, "--out", out)
    assert result.exit_code == 0
    assert "WDER (%)" in result.stdout
    assert json.loads(out.read_text())["aggregates"][0]["n_chunks"] == 6


def test_score_needs_one_input_mode(chunked):
    assert invoke("score").exit_code == 2
    refs = chunked / "refs"
    result = invoke(
        "score", "--pairs", "p.jsonl", "--ref-dir", refs, "--hyp-dir", refs
    )
    assert result.exit_code == 2


def test_score_missing_hypothesis_counts_as_empty(chunked, tmp_path):
    empty = tmp_path / "hyps"
    empty.mkdir()
    result = invoke("score", "--ref-dir", chunked / "refs", "--hyp-dir", empty)
    assert result.exit_code == 0
    pair = json.loads(result.stdout)["pairs"][0]
    assert pair["report"]["wer"] == 1.0
    assert pair["report"]["wder"] is None


def test_score_rejects_malformed_reference(tmp_path):
    refs = tmp_path / "refs"
    refs.mkdir()
    (refs / "x_10s_0000.saa.txt").write_text("no tags here")
    result = invoke("score", "--ref-dir", refs, "--hyp-dir", refs)
    assert result.exit_code == 1


def test_score_pairs_file_and_stdin(chunked, tmp_path):
    rows = [
        {
            "chunk_id": "s1_10s_0000",
            "ref_path": "chunks/refs/s1_10s_0000.saa.txt",
            "hyp_path": "chunks/refs/s1_10s_0001.saa.txt",
            "system": "swap",
            "dataset": "toy",
        }
    ]
    pairs = write_jsonl(tmp_path / "pairs.jsonl", rows)
    from_file = invoke("score", "--pairs", pairs)
    assert from_file.exit_code == 0, from_file.output
    report = json.loads(from_file.stdout)
    assert report["aggregates"][0]["system"] == "swap"
    assert report["pairs"][0]["report"]["wer"] > 0

    absolute = [
        {
            **r,
            "ref_path": str(tmp_path / r["ref_path"]),
            "hyp_path": str(tmp_path / r["hyp_path"]),
        }
        for r in rows
    ]
    stdin = "".join(json.dumps(r) + "\n" for r in absolute)
    from_stdin = invoke("score", "--pairs", "-", input=stdin)
    assert from_stdin.exit_code == 0
    assert json.loads(from_stdin.stdout) == report


def test_score_jobs_do_not_change_results(chunked):
    refs = chunked / "refs"
    serial = invoke("score", "--ref-dir", refs, "--hyp-dir", refs)
    parallel = invoke(
        "score", "--ref-dir", refs, "--hyp-dir", refs, "--jobs", "2"
    )
    assert parallel.exit_code == 0
    assert parallel.stdout == serial.stdout


def test_corrupt_then_score(chunked, tmp_path):
    hyps = tmp_path / "hyps"
    args = ["--out-dir", hyps, "--seed", "5", "--p-sub", "0.2"]
    result = invoke("corrupt", chunked / "refs", *args)
    assert result.exit_code == 0, result.output
    totals = json.loads(result.stdout)
    ledger = json.loads((hyps / "ledger.json").read_text())
    assert ledger["totals"] == totals
    assert len(ledger["files"]) == 6

    result = invoke("score", "--ref-dir", chunked / "refs", "--hyp-dir", hyps)
    pairs = json.loads(result.stdout)["pairs"]
    assert sum(p["report"]["subs"] for p in pairs) == totals["subs"]
    assert sum(p["report"]["n_ref"] for p in pairs) == totals["n_ref_words"]
    assert all(p["report"]["wder"] == 0 for p in pairs)


def test_corrupt_is_seeded(chunked, tmp_path):
    args = ["--seed", "9", "--p-flip", "0.3", "--p-ins", "0.1"]
    invoke("corrupt", chunked / "refs", "--out-dir", tmp_path / "a", *args)
    invoke("corrupt", chunked / "refs", "--out-dir", tmp_path / "b", *args)
    for path in sorted((tmp_path / "a").iterdir()):
        assert path.read_text() == (tmp_path / "b" / path.name).read_text()


def test_seed_is_required(chunked, tmp_path):
    result = invoke("corrupt", chunked / "refs", "--out-dir", tmp_path / "h")
    assert result.exit_code == 2
    result = invoke(
        "synth", reader_pool(tmp_path / "p.jsonl"), "--out-dir", tmp_path
    )
    assert result.exit_code == 2


def test_synth_is_reproducible(tmp_path):
    pool = reader_pool(tmp_path / "pool.jsonl")
    for name in ("a", "b"):
        args = ["--seed", "3", "--count", "5", "--target", "10"]
        result = invoke("synth", pool, "--out-dir", tmp_path / name, *args)
        assert result.exit_code == 0, result.output
    first = (tmp_path / "a" / "chunks.jsonl").read_text()
    assert first == (tmp_path / "b" / "chunks.jsonl").read_text()
    assert len(first.splitlines()) == 5
    assert len(list((tmp_path / "a" / "refs").iterdir())) == 5
    sources = (tmp_path / "a" / "sources.jsonl").read_text().splitlines()
    assert len(json.loads(sources[0])["samples"]) >= 2


def test_synth_pool_too_small(tmp_path):
    pool = write_jsonl(tmp_path / "pool.jsonl", [utt("A", 0, 3)])
    result = invoke("synth", pool, "--out-dir", tmp_path, "--seed", "1")
    assert result.exit_code == 1


def embeddings_file(path: Path) -> Path:
    rng = np.random.default_rng(0)
    rows = []
    for s, center in enumerate([(1.0, 0.0), (0.0, 1.0), (1.0, 0.1)]):
        for _ in range(3):
            vec = np.array(center) + 0.01 * rng.normal(size=2)
            rows.append({"owner": f"spk{s}", "vector": vec.tolist()})
    return write_jsonl(path, rows)


def test_cluster_is_reproducible(tmp_path):
    embeddings = embeddings_file(tmp_path / "e.jsonl")
    for name in ("a", "b"):
        args = ["--out-dir", tmp_path / name, "--k", "2", "--seed", "7"]
        result = invoke("cluster", embeddings, *args)
        assert result.exit_code == 0, result.output
    model = (tmp_path / "a" / "model.json").read_text()
    assert model == (tmp_path / "b" / "model.json").read_text()
    summary = json.loads(result.stdout)
    assert summary["k"] == 2
    assert summary["speakers"] == 3

    assignment = (tmp_path / "a" / "assignment.jsonl").read_text()
    assert "spk0" in assignment


def test_cluster_too_many_clusters(tmp_path):
    embeddings = embeddings_file(tmp_path / "e.jsonl")
    result = invoke(
        "cluster", embeddings, "--out-dir", tmp_path / "o", "--seed", "1"
    )
    assert result.exit_code == 1


def test_relabel(chunked, tmp_path):
    assignment = tmp_path / "assignment.jsonl"
    write_assignment(assignment, ClusterAssignment(map={"A": 14, "B": 52}))
    out = tmp_path / "cluster_refs"
    result = invoke(
        "relabel", chunked / "chunks.jsonl", assignment, "--out-dir", out
    )
    assert result.exit_code == 0, result.output
    text = (out / "s1_10s_0000.saa.txt").read_text()
    assert text.startswith("[Speaker 1 cluster 14]: a0 b0")


def test_mixdown(tmp_path):
    left = Wave(sample_rate_hz=8_000, samples=np.array([100, 3], np.int16))
    right = Wave(sample_rate_hz=8_000, samples=np.array([0, 4], np.int16))
    write_wav(tmp_path / "l.wav", left)
    write_wav(tmp_path / "r.wav", right)
    out = tmp_path / "mono.wav"
    result = invoke(
        "mixdown", tmp_path / "l.wav", tmp_path / "r.wav", "--out", out
    )
    assert result.exit_code == 0, result.output
    assert read_wav(out).samples.tolist() == [50, 4]

    result = invoke("mixdown", tmp_path / "l.wav", "--out", out)
    assert result.exit_code == 2


def test_chunk_cuts_audio(tmp_path):
    audio = tmp_path / "audio"
    audio.mkdir()
    rate = 8_000
    samples = np.arange(60 * rate, dtype=np.int64) % 1000
    write_wav(
        audio / "s1.wav",
        Wave(sample_rate_hz=rate, samples=samples.astype(np.int16)),
    )
    out = tmp_path / "out"
    manifest = conversation(tmp_path / "m.jsonl")
    args = ["--target", "10", "--audio-dir", audio, "--instances"]
    result = invoke("chunk", manifest, "--out-dir", out, *args)
    assert result.exit_code == 0, result.output
    wave = read_wav(out / "audio" / "s1_10s_0001.wav")
    assert len(wave.samples) == 10 * rate
    assert wave.samples[0] == (10 * rate) % 1000
    instance = json.loads(
        (out / "instances.jsonl").read_text().splitlines()[0]
    )
    assert instance["audio"].endswith("s1_10s_0000.wav")
