import struct

import numpy as np
import pytest

from chestsep.dsp import Waveform
from chestsep.errors import WavFormatError
from chestsep.wavio import wav_read, wav_write


def write_pcm16(path, samples, rate=4000, channels=1):
    payload = np.asarray(samples, dtype="<i2").tobytes()
    block = 2 * channels
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, 1, channels, rate, rate * block, block, 16),
        b"data", struct.pack("<I", len(payload)),
    ])
    path.write_bytes(header + payload)


class TestRoundTrip:
    def test_float32_bitwise(self, tmp_path, rng):
        samples = rng.uniform(-1, 1, 5000).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.wav"
        wav_write(path, Waveform(samples))
        back = wav_read(path)
        np.testing.assert_array_equal(back.samples, samples)
        assert back.sample_rate_hz == 4000

    def test_out_of_range_written_verbatim_with_warning(self, tmp_path):
        samples = np.array([0.0, 1.5, -2.0], dtype=np.float64)
        path = tmp_path / "loud.wav"
        with pytest.warns(UserWarning):
            wav_write(path, Waveform(np.concatenate([samples, np.zeros(10)])))
        back = wav_read(path)
        assert back.samples[1] == np.float32(1.5)
        assert back.samples[2] == -2.0


class TestPcm16:
    def test_scaling_convention(self, tmp_path):
        path = tmp_path / "pcm.wav"
        write_pcm16(path, [-32768, 0, 16384, 32767])
        wave = wav_read(path)
        assert wave.samples[0] == -1.0
        assert wave.samples[1] == 0.0
        assert wave.samples[2] == 0.5
        assert abs(wave.samples[3] - (32767 / 32768)) < 1e-12


class TestResampleOnRead:
    def test_16k_read_at_4k(self, tmp_path):
        t = np.arange(16000) / 16000
        tone = (0.5 * np.sin(2 * np.pi * 100 * t)).astype(np.float32)
        path = tmp_path / "hi.wav"
        wav_write(path, Waveform(tone.astype(np.float64), 16000))
        wave = wav_read(path)
        assert wave.sample_rate_hz == 4000
        assert len(wave) == 4000

    def test_non_integer_factor_rejected(self, tmp_path):
        path = tmp_path / "odd.wav"
        wav_write(path, Waveform(np.zeros(100) + 0.1, 44100))
        with pytest.raises(WavFormatError):
            wav_read(path)


class TestMalformed:
    def test_not_riff(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"this is not audio")
        with pytest.raises(WavFormatError):
            wav_read(path)

    def test_multichannel_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        write_pcm16(path, np.zeros(64, dtype=np.int16), channels=2)
        with pytest.raises(WavFormatError):
            wav_read(path)

    def test_missing_data_chunk(self, tmp_path):
        path = tmp_path / "nodata.wav"
        header = b"RIFF" + struct.pack("<I", 20) + b"WAVE" + b"fmt " + struct.pack(
            "<IHHIIHH", 16, 1, 1, 4000, 8000, 2, 16
        )
        path.write_bytes(header)
        with pytest.raises(WavFormatError):
            wav_read(path)

    def test_unsupported_bit_depth(self, tmp_path):
        path = tmp_path / "odd_bits.wav"
        payload = bytes(12)
        header = b"".join([
            b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
            b"fmt ", struct.pack("<IHHIIHH", 16, 1, 1, 4000, 12000, 3, 24),
            b"data", struct.pack("<I", len(payload)),
        ])
        path.write_bytes(header + payload)
        with pytest.raises(WavFormatError):
            wav_read(path)
