import json
from pathlib import Path

import pytest

from saakit.env_vars import settings


@pytest.fixture(autouse=True)
def quiet_logs(monkeypatch: pytest.MonkeyPatch):
    # keep CLI stdout parseable when stderr is mixed in
    monkeypatch.setattr(settings, "LOG_LEVEL", "ERROR")


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def utt(
    speaker_id: str,
    start_s: float,
    end_s: float,
    text: str = "word",
    session_id: str = "s1",
    channel: int | None = None,
) -> dict:
    row = {
        "session_id": session_id,
        "speaker_id": speaker_id,
        "start_s": start_s,
        "end_s": end_s,
        "text": text,
    }
    if channel is not None:
        row["channel"] = channel
    return row
