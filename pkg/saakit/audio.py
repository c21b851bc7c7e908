import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import AudioFormatError


INT16_MIN = -32768
INT16_MAX = 32767


class Wave(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sample_rate_hz: int = Field(gt=0)
    samples: np.ndarray

    @field_validator("samples", mode="before")
    @classmethod
    def _as_int16(cls, samples: object) -> np.ndarray:
        arr = np.asarray(samples)
        if arr.ndim != 1:
            raise ValueError("samples must be one-dimensional (mono)")
        if arr.dtype != np.int16:
            if arr.size and (arr.min() < INT16_MIN or arr.max() > INT16_MAX):
                raise ValueError("samples outside the 16-bit range")
            arr = arr.astype(np.int16)
        return arr

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Wave):
            return NotImplemented
        return self.sample_rate_hz == other.sample_rate_hz and np.array_equal(
            self.samples, other.samples
        )

    __hash__ = None  # type: ignore[assignment]


def _read_channels(path: Path) -> list[Wave]:
    try:
        info = sf.info(str(path))
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"{path}: cannot read WAV ({e})") from e
    if info.format != "WAV" or info.subtype != "PCM_16":
        raise AudioFormatError(
            f"{path}: only PCM16 WAV is supported, got "
            f"{info.format}/{info.subtype}"
        )
    if info.channels not in (1, 2):
        raise AudioFormatError(
            f"{path}: unsupported channel count {info.channels}"
        )
    try:
        data, rate = sf.read(str(path), dtype="int16", always_2d=True)
    except (RuntimeError, OSError) as e:
        raise AudioFormatError(f"{path}: truncated or corrupt ({e})") from e
    if data.shape[0] != info.frames:
        raise AudioFormatError(
            f"{path}: expected {info.frames} frames, read {data.shape[0]}"
        )
    return [
        Wave(sample_rate_hz=rate, samples=np.ascontiguousarray(data[:, c]))
        for c in range(data.shape[1])
    ]


def read_wav(path: Path) -> Wave:
    channels = _read_channels(path)
    if len(channels) != 1:
        raise AudioFormatError(f"{path}: expected mono, found stereo")
    return channels[0]


def read_wav_pair(path: Path) -> tuple[Wave, Wave]:
    channels = _read_channels(path)
    if len(channels) != 2:
        raise AudioFormatError(f"{path}: expected two channels, found one")
    return channels[0], channels[1]


def read_wav_any(path: Path) -> list[Wave]:
    return _read_channels(path)


def write_wav(path: Path, wave: Wave) -> None:
    sf.write(
        str(path),
        wave.samples,
        wave.sample_rate_hz,
        subtype="PCM_16",
        format="WAV",
    )


def write_wav_pair(path: Path, left: Wave, right: Wave) -> None:
    _check_compatible(left, right)
    sf.write(
        str(path),
        np.stack([left.samples, right.samples], axis=1),
        left.sample_rate_hz,
        subtype="PCM_16",
        format="WAV",
    )


def _check_compatible(a: Wave, b: Wave) -> None:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise AudioFormatError(
            f"Sample rate mismatch: {a.sample_rate_hz} vs {b.sample_rate_hz}"
        )
    if len(a.samples) != len(b.samples):
        raise AudioFormatError(
            f"Length mismatch: {len(a.samples)} vs {len(b.samples)} samples"
        )


def mixdown(a: Wave, b: Wave) -> Wave:
    _check_compatible(a, b)
    total = a.samples.astype(np.int32) + b.samples.astype(np.int32)
    # halve, rounding .5 away from zero
    mean = np.where(total >= 0, (total + 1) // 2, -((-total + 1) // 2))
    mean = np.clip(mean, INT16_MIN, INT16_MAX).astype(np.int16)
    return Wave(sample_rate_hz=a.sample_rate_hz, samples=mean)


def _sample_index(t_s: float, rate: int) -> int:
    # round first so 0.3 s at 10 Hz lands on sample 3, not 2
    return math.floor(round(t_s * rate, 6))


def cut_span(w: Wave, start_s: float, end_s: float) -> Wave:
    if not 0 <= start_s < end_s:
        raise ValueError(f"Bad span [{start_s}, {end_s})")
    if _sample_index(end_s, w.sample_rate_hz) > len(w.samples):
        raise ValueError(
            f"Span end {end_s}s is past the end of a {w.duration_s}s wave"
        )
    i0 = _sample_index(start_s, w.sample_rate_hz)
    i1 = _sample_index(end_s, w.sample_rate_hz)
    return Wave(sample_rate_hz=w.sample_rate_hz, samples=w.samples[i0:i1])


def concat(segments: Sequence[Wave], gap_s: float = 0.0) -> Wave:
    if not segments:
        raise ValueError("Nothing to concatenate")
    if gap_s < 0:
        raise ValueError("gap_s must be non-negative")
    rate = segments[0].sample_rate_hz
    for seg in segments[1:]:
        if seg.sample_rate_hz != rate:
            raise AudioFormatError(
                f"Mixed sample rates: {rate} and {seg.sample_rate_hz}"
            )
    gap = np.zeros(round(gap_s * rate), dtype=np.int16)
    parts: list[np.ndarray] = []
    for i, seg in enumerate(segments):
        if i:
            parts.append(gap)
        parts.append(seg.samples)
    return Wave(sample_rate_hz=rate, samples=np.concatenate(parts))
