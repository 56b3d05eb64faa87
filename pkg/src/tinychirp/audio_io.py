"""PCM audio I/O, fixed-length segmentation, and dataset manifests.

WAV support is deliberately narrow: RIFF/WAVE containers holding 16-bit
integer or 32-bit float PCM (plain or WAVE_FORMAT_EXTENSIBLE). Everything
else used in the field pipeline -- resampling, filtering, spectrograms --
lives in :mod:`tinychirp.dsp`.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

TARGET = "target"
NON_TARGET = "non_target"
LABELS = (TARGET, NON_TARGET)
SPLITS = ("train", "validation", "test")

# One int16 quantization step after scaling; WAV roundtrip error is
# bounded by one of these per sample.
INT16_SCALE = 32768

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioIoError(Exception):
    """Base class for everything this module raises."""


class MalformedHeader(AudioIoError):
    """Container is not a parseable RIFF/WAVE file."""


class UnsupportedEncoding(AudioIoError):
    """Valid WAV, but not 16-bit integer or 32-bit float PCM."""


class TruncatedData(AudioIoError):
    """Declared data length exceeds the bytes present in the file."""


class IoFailure(AudioIoError):
    """Underlying OS-level read/write failure."""


class EmptySignal(AudioIoError):
    pass


class ManifestError(AudioIoError):
    pass


class DuplicateAcrossSplits(ManifestError):
    pass


class UnknownLabel(ManifestError):
    pass


class UnknownSplit(ManifestError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    """PCM audio held as float amplitudes in [-1, 1].

    ``samples`` has shape (channels, n). The screening engine consumes
    mono; use :meth:`to_mono` to select the analysis channel.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 2:
            raise ValueError("samples must have shape (channels, n)")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    def to_mono(self, channel: int = 0) -> "AudioSignal":
        """Select one channel (default 0, the single-microphone convention)."""
        if not 0 <= channel < self.channels:
            raise ValueError(f"channel {channel} out of range")
        return AudioSignal(self.samples[channel : channel + 1], self.sample_rate)


@dataclass(frozen=True)
class AudioSegment:
    """A fixed-length mono window cut from a source recording."""

    samples: np.ndarray  # shape (n,)
    sample_rate: int
    label: Optional[str] = None
    source_id: str = ""
    offset_s: float = 0.0

    def __post_init__(self):
        if self.samples.ndim != 1:
            raise ValueError("segment samples must be 1-D")
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "AudioSegment":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def for_split(self, split: str) -> list:
        if split not in SPLITS:
            raise UnknownSplit(split)
        return [e for e in self.entries if e.split == split]


def read_wav(path) -> AudioSignal:
    """Parse a RIFF/WAVE file into float amplitudes.

    Accepts 16-bit integer PCM (scaled by 1/32768) and 32-bit float PCM,
    with plain or extensible fmt chunks. Channels are preserved; callers
    pick the mono analysis channel afterwards.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise TruncatedData(
                    f"{path}: data chunk declares {chunk_size} bytes, "
                    f"{len(body)} present"
                )
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise MalformedHeader(f"{path}: missing fmt/data chunk")

    format_tag, channels, sample_rate, bits = fmt
    if channels < 1 or sample_rate < 1:
        raise MalformedHeader(f"{path}: nonsensical fmt chunk")

    if format_tag == _WAVE_FORMAT_PCM and bits == 16:
        flat = np.frombuffer(data[: len(data) - len(data) % (2 * channels)], dtype="<i2")
        samples = flat.astype(np.float64) / INT16_SCALE
    elif format_tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        flat = np.frombuffer(data[: len(data) - len(data) % (4 * channels)], dtype="<f4")
        samples = flat.astype(np.float64)
    else:
        raise UnsupportedEncoding(
            f"{path}: format tag {format_tag} with {bits} bits not supported"
        )

    return AudioSignal(samples.reshape(-1, channels).T.copy(), sample_rate)


def _parse_fmt(body: bytes):
    if len(body) < 16:
        raise MalformedHeader("fmt chunk too short")
    format_tag, channels, sample_rate, _byte_rate, _block_align, bits = struct.unpack(
        "<HHIIHH", body[:16]
    )
    if format_tag == _WAVE_FORMAT_EXTENSIBLE:
        # Effective format is the first two bytes of the SubFormat GUID.
        if len(body) < 26:
            raise MalformedHeader("extensible fmt chunk too short")
        (format_tag,) = struct.unpack("<H", body[24:26])
    return format_tag, channels, sample_rate, bits


def write_wav(signal: AudioSignal, path) -> None:
    """Write 16-bit PCM with the canonical 44-byte header.

    Amplitudes are clamped (not wrapped) into the int16 range, so +1.0
    stores as 32767 and reads back as 32767/32768.
    """
    x = np.round(signal.samples * INT16_SCALE)
    pcm = np.clip(x, -32768, 32767).astype("<i2")
    payload = pcm.T.reshape(-1).tobytes()  # interleave channels

    channels = signal.channels
    rate = signal.sample_rate
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        _WAVE_FORMAT_PCM,
        channels,
        rate,
        rate * channels * 2,
        channels * 2,
        16,
        b"data",
        len(payload),
    )
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_segment_wav(segment: AudioSegment, path) -> None:
    write_wav(AudioSignal(segment.samples[np.newaxis, :], segment.sample_rate), path)


def segment(
    signal: AudioSignal, duration_s: float = 3.0, source_id: str = ""
) -> list:
    """Cut a mono signal into consecutive fixed-length windows.

    The final partial window is zero-padded to full length rather than
    dropped, so short recordings still produce one segment.
    """
    if signal.channels != 1:
        raise ValueError("segment() expects a mono signal; call to_mono() first")
    n = signal.n_samples
    if n == 0:
        raise EmptySignal("cannot segment an empty signal")
    seg_len = int(round(duration_s * signal.sample_rate))
    if seg_len <= 0:
        raise ValueError("duration too short for this sample rate")

    mono = signal.samples[0]
    count = math.ceil(n / seg_len)
    out = []
    for i in range(count):
        window = mono[i * seg_len : (i + 1) * seg_len]
        if len(window) < seg_len:
            window = np.concatenate([window, np.zeros(seg_len - len(window))])
        out.append(
            AudioSegment(
                samples=window.astype(np.float64),
                sample_rate=signal.sample_rate,
                source_id=source_id,
                offset_s=i * duration_s,
            )
        )
    return out


def load_manifest(path) -> DatasetManifest:
    """Load a ``path,label,split`` CSV, rejecting cross-split duplicates.

    A path listed in more than one split would leak data between train
    and evaluation sets, so that is a hard error.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
                "path",
                "label",
                "split",
            ]:
                raise ManifestError(
                    f"{path}: expected header 'path,label,split', got {reader.fieldnames}"
                )
            entries = []
            split_of = {}
            for row in reader:
                p = row["path"].strip()
                label = row["label"].strip()
                split = row["split"].strip()
                if label not in LABELS:
                    raise UnknownLabel(f"{path}: label {label!r} for {p}")
                if split not in SPLITS:
                    raise UnknownSplit(f"{path}: split {split!r} for {p}")
                if p in split_of and split_of[p] != split:
                    raise DuplicateAcrossSplits(
                        f"{path}: {p} appears in both {split_of[p]} and {split}"
                    )
                split_of[p] = split
                entries.append(ManifestEntry(path=p, label=label, split=split))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DatasetManifest(entries=tuple(entries))
