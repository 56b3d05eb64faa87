import struct

import numpy as np
import pytest

from tinychirp.audio_io import (
    AudioSegment,
    AudioSignal,
    DuplicateAcrossSplits,
    EmptySignal,
    MalformedHeader,
    ManifestError,
    TruncatedData,
    UnknownLabel,
    UnknownSplit,
    UnsupportedEncoding,
    load_manifest,
    read_wav,
    segment,
    write_wav,
)


def make_wav_bytes(pcm: bytes, channels=1, rate=16000, bits=16, fmt=1, declared=None):
    declared = len(pcm) if declared is None else declared
    return (
        struct.pack(
            "<4sI4s4sIHHIIHH4sI",
            b"RIFF",
            36 + declared,
            b"WAVE",
            b"fmt ",
            16,
            fmt,
            channels,
            rate,
            rate * channels * bits // 8,
            channels * bits // 8,
            bits,
            b"data",
            declared,
        )
        + pcm
    )


class TestReadWav:
    def test_int16_scaling(self, tmp_path):
        pcm = struct.pack("<3h", 0, 16384, -32768)
        p = tmp_path / "a.wav"
        p.write_bytes(make_wav_bytes(pcm))
        sig = read_wav(p)
        np.testing.assert_array_equal(sig.samples[0], [0.0, 0.5, -1.0])
        assert sig.sample_rate == 16000

    def test_four_channels_mono_picks_channel_zero(self, tmp_path):
        frames = struct.pack("<8h", 100, 200, 300, 400, 101, 201, 301, 401)
        p = tmp_path / "quad.wav"
        p.write_bytes(make_wav_bytes(frames, channels=4))
        sig = read_wav(p)
        assert sig.channels == 4
        mono = sig.to_mono()
        np.testing.assert_allclose(mono.samples[0] * 32768, [100, 101])

    def test_float32_payload(self, tmp_path):
        pcm = struct.pack("<3f", 0.25, -0.5, 1.0)
        p = tmp_path / "f.wav"
        p.write_bytes(make_wav_bytes(pcm, bits=32, fmt=3))
        sig = read_wav(p)
        np.testing.assert_allclose(sig.samples[0], [0.25, -0.5, 1.0])

    def test_truncated_data_chunk(self, tmp_path):
        pcm = struct.pack("<10h", *range(10))
        p = tmp_path / "t.wav"
        p.write_bytes(make_wav_bytes(pcm, declared=len(pcm) + 10))
        with pytest.raises(TruncatedData):
            read_wav(p)

    def test_not_riff(self, tmp_path):
        p = tmp_path / "bad.wav"
        p.write_bytes(b"OggS" + b"\x00" * 64)
        with pytest.raises(MalformedHeader):
            read_wav(p)

    def test_compressed_format_rejected(self, tmp_path):
        p = tmp_path / "adpcm.wav"
        p.write_bytes(make_wav_bytes(b"\x00" * 8, fmt=2))
        with pytest.raises(UnsupportedEncoding):
            read_wav(p)

    def test_24_bit_rejected(self, tmp_path):
        p = tmp_path / "b24.wav"
        p.write_bytes(make_wav_bytes(b"\x00" * 12, bits=24))
        with pytest.raises(UnsupportedEncoding):
            read_wav(p)


class TestWriteWav:
    def test_roundtrip_zeros(self, tmp_path):
        sig = AudioSignal(np.zeros((1, 48000)), 16000)
        p = tmp_path / "z.wav"
        write_wav(sig, p)
        back = read_wav(p)
        np.testing.assert_array_equal(back.samples, sig.samples)

    def test_full_scale_clamps_to_32767(self, tmp_path):
        sig = AudioSignal(np.array([[1.0]]), 16000)
        p = tmp_path / "one.wav"
        write_wav(sig, p)
        back = read_wav(p)
        assert back.samples[0, 0] == 32767 / 32768

    def test_roundtrip_noise_within_one_lsb(self, tmp_path):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1.0, 1.0, size=(1, 20000))
        p = tmp_path / "n.wav"
        write_wav(AudioSignal(x, 16000), p)
        back = read_wav(p)
        assert np.abs(back.samples - x).max() <= 1.0 / 32768


class TestSegment:
    def test_seven_seconds_pads_the_tail(self):
        sig = AudioSignal(np.ones((1, 7 * 16000)), 16000)
        segs = segment(sig, 3.0)
        assert len(segs) == 3
        assert all(len(s.samples) == 48000 for s in segs)
        assert np.count_nonzero(segs[2].samples) == 16000
        np.testing.assert_array_equal(segs[2].samples[16000:], 0.0)

    def test_exact_multiple_no_padding(self):
        sig = AudioSignal(np.ones((1, 48000)), 16000)
        segs = segment(sig, 3.0)
        assert len(segs) == 1
        assert np.count_nonzero(segs[0].samples) == 48000

    def test_single_sample(self):
        sig = AudioSignal(np.array([[0.5]]), 16000)
        (seg,) = segment(sig, 3.0)
        assert len(seg.samples) == 48000
        assert np.count_nonzero(seg.samples) == 1

    def test_empty_signal(self):
        with pytest.raises(EmptySignal):
            segment(AudioSignal(np.empty((1, 0)), 16000), 3.0)

    def test_offsets_and_length_conservation(self):
        rng = np.random.default_rng(3)
        for n in rng.integers(1, 200000, size=8):
            sig = AudioSignal(rng.uniform(-1, 1, size=(1, int(n))), 16000)
            segs = segment(sig, 3.0)
            rebuilt = np.concatenate([s.samples for s in segs])
            np.testing.assert_array_equal(rebuilt[: int(n)], sig.samples[0])
            np.testing.assert_array_equal(rebuilt[int(n) :], 0.0)
            assert [s.offset_s for s in segs] == [3.0 * i for i in range(len(segs))]


class TestManifest:
    def write(self, tmp_path, rows):
        p = tmp_path / "m.csv"
        p.write_text("path,label,split\n" + "\n".join(rows) + "\n", encoding="utf-8")
        return p

    def test_80_10_10(self, tmp_path):
        rows = [f"a{i}.wav,target,train" for i in range(8)]
        rows += ["v.wav,non_target,validation", "t.wav,target,test"]
        m = load_manifest(self.write(tmp_path, rows))
        assert len(m) == 10
        assert len(m.for_split("train")) == 8
        assert len(m.for_split("validation")) == 1
        assert len(m.for_split("test")) == 1

    def test_duplicate_across_splits(self, tmp_path):
        p = self.write(tmp_path, ["x.wav,target,train", "x.wav,target,test"])
        with pytest.raises(DuplicateAcrossSplits):
            load_manifest(p)

    def test_duplicate_within_split_allowed(self, tmp_path):
        p = self.write(tmp_path, ["x.wav,target,train", "x.wav,target,train"])
        assert len(load_manifest(p)) == 2

    def test_unknown_label(self, tmp_path):
        p = self.write(tmp_path, ["x.wav,bird,train"])
        with pytest.raises(UnknownLabel):
            load_manifest(p)

    def test_unknown_split(self, tmp_path):
        p = self.write(tmp_path, ["x.wav,target,holdout"])
        with pytest.raises(UnknownSplit):
            load_manifest(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("file,tag\nx.wav,target\n", encoding="utf-8")
        with pytest.raises(ManifestError):
            load_manifest(p)

    def test_order_preserved_and_deterministic(self, tmp_path):
        rows = [f"r{i}.wav,{'target' if i % 2 else 'non_target'},train" for i in range(9, -1, -1)]
        p = self.write(tmp_path, rows)
        first = load_manifest(p)
        second = load_manifest(p)
        assert [e.path for e in first] == [f"r{i}.wav" for i in range(9, -1, -1)]
        assert first == second


def test_segment_requires_mono():
    sig = AudioSignal(np.zeros((2, 100)), 16000)
    with pytest.raises(ValueError):
        segment(sig, 3.0)


def test_segment_label_validation():
    with pytest.raises(ValueError):
        AudioSegment(np.zeros(10), 16000, label="bird")
