"""Signal processing for the screening chain.

Covers the cheap pre-screening path (min-max normalization, high-pass
Butterworth, mean-square power) and the spectral path (zero-order-hold
downsampling, Hann STFT, mel filterbank, log-mel). A 3 s segment at
16 kHz yields a 184x513 magnitude spectrogram and a 184x80 log-mel
matrix with the default window/hop/mel settings.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import sosfilt

from .audio_io import AudioSegment, AudioSignal

STFT_WINDOW = 1024
STFT_HOP = 256
MEL_BINS = 80
MEL_FMIN_HZ = 80.0
MEL_FMAX_HZ = 8000.0
ANALYSIS_RATE_HZ = 16000

HIGHPASS_ORDER = 9
HIGHPASS_CUTOFF_HZ = 7000.0

# Floor applied before the log so silent frames map to log10(eps) = -10
# instead of -inf.
LOG_FLOOR = 1e-10

SPECTROGRAM_MAGIC = b"TCSP"


class DspError(Exception):
    pass


class UpsampleRequested(DspError):
    pass


class InvalidCutoff(DspError):
    pass


class SampleRateMismatch(DspError):
    pass


class EmptySegment(DspError):
    pass


class SegmentTooShort(DspError):
    pass


class InvalidRange(DspError):
    pass


class ShapeMismatch(DspError):
    pass


class EmptyList(DspError):
    pass


@dataclass(frozen=True)
class FilterDesignMeta:
    order: int
    cutoff_hz: float
    sample_rate_hz: int
    kind: str = "highpass"


@dataclass(frozen=True)
class FilterSOS:
    """Cascade of second-order sections (a0 normalized to 1).

    ``sections`` has shape (n_sections, 5) with columns b0, b1, b2, a1, a2.
    Odd orders carry one first-order section with b2 = a2 = 0.
    """

    sections: np.ndarray
    design_meta: FilterDesignMeta

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]


@dataclass(frozen=True)
class Spectrogram:
    """Non-negative STFT magnitudes, shape (frames, bins)."""

    values: np.ndarray
    window: int = STFT_WINDOW
    hop: int = STFT_HOP
    sample_rate_hz: int = ANALYSIS_RATE_HZ

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]

    @property
    def bin_count(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MelParams:
    n_mels: int = MEL_BINS
    fmin_hz: float = MEL_FMIN_HZ
    fmax_hz: float = MEL_FMAX_HZ
    sample_rate_hz: int = ANALYSIS_RATE_HZ


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-magnitude mel matrix, shape (frames, n_mels)."""

    values: np.ndarray
    mel_params: MelParams = field(default_factory=MelParams)


@dataclass(frozen=True)
class PowerReading:
    """Mean squared amplitude over a segment of n samples."""

    p: float
    n: int


def minmax_normalize(segment: AudioSegment) -> AudioSegment:
    """Map samples affinely onto [0, 1].

    A constant segment maps to all zeros, so its power is 0 and the
    low-power gate discards it like any other silence.
    """
    x = segment.samples
    if len(x) == 0:
        raise EmptySegment("cannot normalize an empty segment")
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        return segment.with_samples(np.zeros_like(x))
    return segment.with_samples((x - lo) / (hi - lo))


def downsample_zoh(signal: AudioSignal, dst_rate: int) -> AudioSignal:
    """Zero-order-hold decimation: output k copies input floor(k*src/dst).

    No anti-alias filtering; this mirrors what the recorder can afford
    to do on-device.
    """
    src_rate = signal.sample_rate
    if dst_rate > src_rate:
        raise UpsampleRequested(f"{src_rate} Hz -> {dst_rate} Hz is an upsample")
    if dst_rate == src_rate:
        return AudioSignal(signal.samples.copy(), src_rate)
    out_len = (signal.n_samples * dst_rate) // src_rate
    idx = (np.arange(out_len, dtype=np.int64) * src_rate) // dst_rate
    return AudioSignal(signal.samples[:, idx], dst_rate)


def design_butterworth_highpass(
    order: int, cutoff_hz: float, sample_rate_hz: int
) -> FilterSOS:
    """Design a digital high-pass Butterworth as second-order sections.

    Analog low-pass prototype poles -> high-pass transform -> bilinear
    transform with frequency prewarping, then conjugate pole pairs are
    grouped into biquads. Each section is normalized to unity gain at
    Nyquist, which pins |H| at the cutoff to 1/sqrt(2). A direct-form
    realization of order 9 would be numerically fragile; the cascade is
    not.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise InvalidCutoff(
            f"cutoff {cutoff_hz} Hz outside (0, {sample_rate_hz / 2}) Hz"
        )

    fs = float(sample_rate_hz)
    # Butterworth prototype: poles evenly spaced on the unit circle, left
    # half-plane only.
    k = np.arange(1, order + 1)
    lp_poles = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # Low-pass -> high-pass (s -> warped/s) about the prewarped cutoff.
    warped = 2.0 * fs * math.tan(math.pi * cutoff_hz / fs)
    hp_poles = warped / lp_poles
    # Bilinear transform; the order zeros at s=0 land on z=1.
    z_poles = (1.0 + hp_poles / (2.0 * fs)) / (1.0 - hp_poles / (2.0 * fs))

    conj_pairs = sorted(
        (p for p in z_poles if p.imag > 1e-12), key=lambda p: abs(p)
    )
    real_poles = sorted(
        (p.real for p in z_poles if abs(p.imag) <= 1e-12), key=abs
    )

    rows = []
    for p in real_poles:
        a1 = -p
        gain = (1.0 - a1) / 2.0  # unity at z = -1
        rows.append([gain, -gain, 0.0, a1, 0.0])
    for p in conj_pairs:
        a1 = -2.0 * p.real
        a2 = abs(p) ** 2
        gain = (1.0 - a1 + a2) / 4.0  # unity at z = -1
        rows.append([gain, -2.0 * gain, gain, a1, a2])

    sections = np.array(rows, dtype=np.float64)
    for a1, a2 in sections[:, 3:]:
        if max(abs(r) for r in np.roots([1.0, a1, a2])) >= 1.0:
            raise DspError("designed section is unstable")  # pragma: no cover

    meta = FilterDesignMeta(
        order=order, cutoff_hz=float(cutoff_hz), sample_rate_hz=int(sample_rate_hz)
    )
    return FilterSOS(sections=sections, design_meta=meta)


def sos_frequency_response(filt: FilterSOS, freqs_hz) -> np.ndarray:
    """Complex response of the cascade at the given frequencies."""
    fs = filt.design_meta.sample_rate_hz
    w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs
    z1 = np.exp(-1j * w)
    z2 = z1 * z1
    h = np.ones_like(z1, dtype=np.complex128)
    for b0, b1, b2, a1, a2 in filt.sections:
        h *= (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
    return h


def filter_apply(filt: FilterSOS, segment: AudioSegment) -> AudioSegment:
    """Run the causal cascade (direct form II transposed, zero state)."""
    if segment.sample_rate != filt.design_meta.sample_rate_hz:
        raise SampleRateMismatch(
            f"segment at {segment.sample_rate} Hz, filter designed for "
            f"{filt.design_meta.sample_rate_hz} Hz"
        )
    sos = np.column_stack(
        [filt.sections[:, :3], np.ones(filt.n_sections), filt.sections[:, 3:]]
    )
    return segment.with_samples(sosfilt(sos, segment.samples))


def signal_power(segment: AudioSegment) -> PowerReading:
    """Mean squared amplitude: p = (1/N) * sum(x(n)^2)."""
    x = segment.samples
    if len(x) == 0:
        raise EmptySegment("power of an empty segment is undefined")
    return PowerReading(p=float(np.mean(x * x)), n=len(x))


def hann_window(width: int) -> np.ndarray:
    # Periodic Hann, the conventional analysis window for STFT.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(width) / width)


def stft_magnitude(
    segment: AudioSegment, window: int = STFT_WINDOW, hop: int = STFT_HOP
) -> Spectrogram:
    """Hann-windowed magnitude STFT without implicit padding.

    Frames are taken only where a full window fits (no centering), which
    gives floor((N - window)/hop) + 1 frames -- 184 for 48000 samples.
    """
    x = segment.samples
    if len(x) < window:
        raise SegmentTooShort(f"need >= {window} samples, got {len(x)}")
    n_frames = (len(x) - window) // hop + 1
    starts = np.arange(n_frames) * hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[starts]
    spec = np.abs(np.fft.rfft(frames * hann_window(window), axis=1))
    return Spectrogram(
        values=spec, window=window, hop=hop, sample_rate_hz=segment.sample_rate
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = MEL_BINS,
    fmin_hz: float = MEL_FMIN_HZ,
    fmax_hz: float = MEL_FMAX_HZ,
    sample_rate_hz: int = ANALYSIS_RATE_HZ,
    n_fft: int = STFT_WINDOW,
) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft//2 + 1).

    Centers are uniform on the mel scale between fmin and fmax; triangles
    peak at 1 (no area normalization).
    """
    if not 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2:
        raise InvalidRange(
            f"need 0 <= fmin < fmax <= Nyquist, got ({fmin_hz}, {fmax_hz})"
        )
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2)
    )
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft

    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = edges_hz[m : m + 3]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_band_centers_hz(params: MelParams = MelParams()) -> np.ndarray:
    edges = mel_to_hz(
        np.linspace(
            hz_to_mel(params.fmin_hz), hz_to_mel(params.fmax_hz), params.n_mels + 2
        )
    )
    return edges[1:-1]


def log_mel(spec: Spectrogram, fb: np.ndarray) -> MelSpectrogram:
    """Apply the filterbank and take log10 with a -10 floor."""
    if fb.shape[1] != spec.bin_count:
        raise ShapeMismatch(
            f"filterbank expects {fb.shape[1]} bins, spectrogram has {spec.bin_count}"
        )
    mel = spec.values @ fb.T
    values = np.log10(np.maximum(mel, LOG_FLOOR))
    params = MelParams(n_mels=fb.shape[0], sample_rate_hz=spec.sample_rate_hz)
    return MelSpectrogram(values=values, mel_params=params)


def average_stft(segments) -> Spectrogram:
    """Elementwise mean of per-segment magnitude spectrograms.

    Used for the pilot look at where target-song energy sits in
    frequency before committing to a cutoff.
    """
    if not segments:
        raise EmptyList("need at least one segment")
    lengths = {len(s.samples) for s in segments}
    if len(lengths) != 1:
        raise ShapeMismatch(f"segments have mixed lengths {sorted(lengths)}")
    specs = [stft_magnitude(s) for s in segments]
    first = specs[0]
    mean = np.mean([s.values for s in specs], axis=0)
    return Spectrogram(
        values=mean,
        window=first.window,
        hop=first.hop,
        sample_rate_hz=first.sample_rate_hz,
    )


def save_spectrogram_csv(values: np.ndarray, path) -> None:
    """One CSV row per frame."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in values:
            writer.writerow([f"{v:.8g}" for v in row])


def save_spectrogram_raw(values: np.ndarray, path) -> None:
    """Raw little-endian float32 matrix with a 16-byte TCSP header."""
    rows, cols = values.shape
    header = struct.pack("<4sIII", SPECTROGRAM_MAGIC, rows, cols, 0)
    Path(path).write_bytes(header + values.astype("<f4").tobytes())


def load_spectrogram_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != SPECTROGRAM_MAGIC:
        raise DspError(f"{path}: not a TCSP matrix")
    rows, cols, _ = struct.unpack("<III", raw[4:16])
    data = np.frombuffer(raw[16 : 16 + 4 * rows * cols], dtype="<f4")
    if data.size != rows * cols:
        raise DspError(f"{path}: truncated TCSP payload")
    return data.reshape(rows, cols).astype(np.float64)
