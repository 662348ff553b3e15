"""Minimal RIFF/WAVE reader and writer.

Reads mono PCM16 or 32-bit IEEE float files at any rate that decimates to
4 kHz by an integer factor; writes 32-bit float mono. The stdlib wave module
does not handle float WAVs, hence the hand parser.
"""

import struct
import warnings

import numpy as np

from . import dsp
from .dsp import Waveform
from .errors import WavFormatError

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


def wav_write(path, x: Waveform):
    """Write mono 32-bit float WAV. Out-of-range samples are kept verbatim."""
    samples = np.asarray(x.samples, dtype=np.float32)
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        warnings.warn(f"writing samples up to {peak:.3f} outside [-1, 1] unclamped", stacklevel=2)
    payload = samples.tobytes()
    rate = int(x.sample_rate_hz)
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, _FMT_FLOAT, 1, rate, rate * 4, 4, 32),
        b"data", struct.pack("<I", len(payload)),
    ])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def wav_read(path, target_rate_hz: int = dsp.CANONICAL_RATE_HZ) -> Waveform:
    """Read a mono WAV; integer-factor decimate to the target rate if needed."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels; only mono supported")
    if audio_format == _FMT_PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format in (_FMT_FLOAT, _FMT_EXTENSIBLE) and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format {audio_format}, {bits} bits)")
    wave = Waveform(samples, rate)
    if rate == target_rate_hz:
        return wave
    if rate % target_rate_hz != 0:
        raise WavFormatError(
            f"{path}: rate {rate} does not decimate to {target_rate_hz} by an integer factor"
        )
    return dsp.resample_decimate(wave, rate // target_rate_hz)
