"""Deterministic DSP primitives: filters, STFT, resampling, power scaling.

Filter design is done from analog Butterworth prototypes via the bilinear
transform with frequency pre-warping, realized as cascaded biquad sections.
Filtering itself is delegated to scipy's sosfilt (zero-state, single forward
pass); the design math stays here so the -3 dB placement is under our control
and testable against the analytic magnitude response.
"""

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import sosfilt

from .errors import ShapeMismatch
from .validation import check_1d, check_not_silent, check_positive

CANONICAL_RATE_HZ = 4000

_POLE_MARGIN = 1e-9


@dataclass
class Waveform:
    """A 1-D sampled signal; the common currency between modules."""

    samples: np.ndarray
    sample_rate_hz: int = CANONICAL_RATE_HZ

    def __post_init__(self):
        self.samples = check_1d(self.samples, "samples")
        check_positive(self.sample_rate_hz, "sample_rate_hz")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def copy(self) -> "Waveform":
        return Waveform(self.samples.copy(), self.sample_rate_hz)


@dataclass
class BiquadSection:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def pole_magnitudes(self):
        roots = np.roots([1.0, self.a1, self.a2])
        return np.abs(roots)

    def response_at(self, z: complex) -> complex:
        zi = 1.0 / z
        num = self.b0 + self.b1 * zi + self.b2 * zi * zi
        den = 1.0 + self.a1 * zi + self.a2 * zi * zi
        return num / den


@dataclass
class BiquadCascade:
    """Second-order sections applied in series; always designed stable."""

    sections: list = field(default_factory=list)
    fs_hz: float = CANONICAL_RATE_HZ

    def validate(self):
        for i, s in enumerate(self.sections):
            if np.any(s.pole_magnitudes() >= 1.0 - _POLE_MARGIN):
                raise ValueError(f"section {i} is unstable (pole on/outside unit circle)")
        return self

    def response_at_hz(self, f_hz: float) -> complex:
        z = cmath.exp(2j * math.pi * f_hz / self.fs_hz)
        h = 1.0 + 0.0j
        for s in self.sections:
            h *= s.response_at(z)
        return h

    def gain_db(self, f_hz: float) -> float:
        return 20.0 * math.log10(abs(self.response_at_hz(f_hz)))

    def as_sos(self) -> np.ndarray:
        return np.array(
            [[s.b0, s.b1, s.b2, 1.0, s.a1, s.a2] for s in self.sections], dtype=np.float64
        )


def _butterworth_prototype_poles(n: int):
    """Left-half-plane poles of the analog Butterworth prototype (wc = 1)."""
    return [cmath.exp(1j * math.pi * (2 * k + n + 1) / (2 * n)) for k in range(n)]


def _bilinear(s: complex, fs: float) -> complex:
    return (2.0 * fs + s) / (2.0 * fs - s)


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f_hz / fs)


def _pair_conjugate_roots(roots, tol=1e-8):
    """Group roots into conjugate (or real) pairs for real-coefficient quadratics."""
    cplx = [r for r in roots if abs(r.imag) > tol]
    real = sorted(r.real for r in roots if abs(r.imag) <= tol)
    pairs = []
    used = [False] * len(cplx)
    for i, r in enumerate(cplx):
        if used[i]:
            continue
        used[i] = True
        best, best_d = None, None
        for j in range(i + 1, len(cplx)):
            if used[j]:
                continue
            d = abs(cplx[j] - r.conjugate())
            if best is None or d < best_d:
                best, best_d = j, d
        if best is None:
            raise ValueError("unpaired complex root; cannot form real sections")
        used[best] = True
        pairs.append((r, cplx[best]))
    while len(real) >= 2:
        pairs.append((complex(real.pop(0)), complex(real.pop(0))))
    if real:
        pairs.append((complex(real.pop()), None))
    return pairs


def _sections_from_poles(pole_pairs, zero_template, fs, norm_hz, single_zero=None):
    """Build biquads for the given digital pole pairs, then normalize |H(norm_hz)| to 1.

    zero_template is the numerator (b0, b1, b2) shared by every full section,
    e.g. (1, 0, -1) for one zero at z=1 and one at z=-1 per bandpass section;
    single_zero is the (b0, b1) numerator used when an odd pole is left over.
    """
    sections = []
    for p1, p2 in pole_pairs:
        if p2 is None:
            a1, a2 = -p1.real, 0.0
            b = (single_zero[0], single_zero[1], 0.0)
        else:
            a1 = -(p1 + p2).real
            a2 = (p1 * p2).real
            b = zero_template
        sections.append(BiquadSection(b[0], b[1], b[2], a1, a2))
    cascade = BiquadCascade(sections, fs)
    gain = abs(cascade.response_at_hz(norm_hz))
    if gain == 0.0:
        raise ValueError("zero gain at normalization frequency")
    first = cascade.sections[0]
    first.b0 /= gain
    first.b1 /= gain
    first.b2 /= gain
    return cascade.validate()


def design_butterworth_bandpass(order: int, lo_hz: float, hi_hz: float, fs_hz: float) -> BiquadCascade:
    """Design a maximally-flat bandpass with -3 dB points at lo_hz and hi_hz.

    `order` is the overall filter order (number of poles); it must be even,
    one of {2, 4, 8}.
    """
    if order not in (2, 4, 8):
        raise ValueError(f"order must be one of 2, 4, 8; got {order}")
    if not (0.0 < lo_hz < hi_hz < fs_hz / 2.0):
        raise ValueError(f"band edges must satisfy 0 < {lo_hz} < {hi_hz} < fs/2 = {fs_hz / 2}")
    n = order // 2
    wl = _prewarp(lo_hz, fs_hz)
    wh = _prewarp(hi_hz, fs_hz)
    w0 = math.sqrt(wl * wh)
    bw = wh - wl
    analog_poles = []
    for p in _butterworth_prototype_poles(n):
        # lowpass-to-bandpass: each prototype pole yields s^2 - bw*p*s + w0^2 = 0
        disc = cmath.sqrt((bw * p) ** 2 - 4.0 * w0 * w0)
        analog_poles.append((bw * p + disc) / 2.0)
        analog_poles.append((bw * p - disc) / 2.0)
    digital_poles = [_bilinear(s, fs_hz) for s in analog_poles]
    center_hz = fs_hz / math.pi * math.atan(w0 / (2.0 * fs_hz))
    return _sections_from_poles(
        _pair_conjugate_roots(digital_poles), (1.0, 0.0, -1.0), fs_hz, center_hz
    )


def design_butterworth_highpass(order: int, cutoff_hz: float, fs_hz: float) -> BiquadCascade:
    """Design a Butterworth highpass with its -3 dB point at cutoff_hz."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not (0.0 < cutoff_hz < fs_hz / 2.0):
        raise ValueError(f"cutoff must satisfy 0 < {cutoff_hz} < fs/2 = {fs_hz / 2}")
    wc = _prewarp(cutoff_hz, fs_hz)
    analog_poles = [wc / p for p in _butterworth_prototype_poles(order)]
    digital_poles = [_bilinear(s, fs_hz) for s in analog_poles]
    return _sections_from_poles(
        _pair_conjugate_roots(digital_poles), (1.0, -2.0, 1.0), fs_hz, fs_hz / 2.0, (1.0, -1.0)
    )


def design_butterworth_lowpass(order: int, cutoff_hz: float, fs_hz: float) -> BiquadCascade:
    """Butterworth lowpass counterpart (same topology; used for envelope smoothing)."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not (0.0 < cutoff_hz < fs_hz / 2.0):
        raise ValueError(f"cutoff must satisfy 0 < {cutoff_hz} < fs/2 = {fs_hz / 2}")
    wc = _prewarp(cutoff_hz, fs_hz)
    analog_poles = [wc * p for p in _butterworth_prototype_poles(order)]
    digital_poles = [_bilinear(s, fs_hz) for s in analog_poles]
    return _sections_from_poles(
        _pair_conjugate_roots(digital_poles), (1.0, 2.0, 1.0), fs_hz, 0.0, (1.0, 1.0)
    )


def butterworth_magnitude_bandpass(order, lo_hz, hi_hz, f_hz):
    """Analytic |H(f)| of the analog Butterworth bandpass; independent test oracle."""
    n = order // 2
    w0 = math.sqrt(lo_hz * hi_hz)
    bw = hi_hz - lo_hz
    if f_hz == 0.0:
        return 0.0
    s = (f_hz * f_hz - w0 * w0) / (bw * f_hz)
    return 1.0 / math.sqrt(1.0 + s ** (2 * n))


def butterworth_magnitude_highpass(order, cutoff_hz, f_hz):
    if f_hz == 0.0:
        return 0.0
    return 1.0 / math.sqrt(1.0 + (cutoff_hz / f_hz) ** (2 * order))


def filter_apply(cascade: BiquadCascade, x: Waveform) -> Waveform:
    """Run the cascade over the signal once (zero initial state)."""
    cascade.validate()
    y = sosfilt(cascade.as_sos(), x.samples)
    return Waveform(y, x.sample_rate_hz)


@dataclass
class Spectrogram:
    """Complex STFT bins of shape (window/2 + 1, frames)."""

    bins: np.ndarray
    window_len: int
    hop: int
    sample_rate_hz: int

    def __post_init__(self):
        expected = self.window_len // 2 + 1
        if self.bins.shape[0] != expected:
            raise ShapeMismatch(
                f"bins axis 0 is {self.bins.shape[0]}, expected window/2+1 = {expected}"
            )

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_cola(window_len, hop):
    if hop > window_len:
        raise ValueError(f"hop {hop} exceeds window length {window_len}")
    if window_len % hop != 0 or hop > window_len // 2:
        raise ValueError(
            f"hop {hop} breaks the overlap-add identity for a {window_len}-point Hann window; "
            f"use hop = window_len / m with integer m >= 2"
        )


def padded_length(n: int, window_len: int, hop: int) -> int:
    """Least n' >= max(n, window) with (n' - window) divisible by hop."""
    base = max(n, window_len)
    return window_len + hop * math.ceil((base - window_len) / hop)


def frame_signal(x: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """Zero-pad the tail and return a strided (frames, window) view copy."""
    n_pad = padded_length(x.shape[-1], window_len, hop)
    padded = np.zeros(x.shape[:-1] + (n_pad,), dtype=x.dtype)
    padded[..., : x.shape[-1]] = x
    n_frames = (n_pad - window_len) // hop + 1
    stride = padded.strides[-1]
    shape = padded.shape[:-1] + (n_frames, window_len)
    strides = padded.strides[:-1] + (hop * stride, stride)
    return np.lib.stride_tricks.as_strided(padded, shape, strides).copy()


def overlap_add(frames: np.ndarray, window: np.ndarray, hop: int) -> np.ndarray:
    """Windowed overlap-add with per-sample window-power normalization."""
    n_frames, window_len = frames.shape[-2], frames.shape[-1]
    out_len = (n_frames - 1) * hop + window_len
    out = np.zeros(frames.shape[:-2] + (out_len,), dtype=frames.dtype)
    wsq = np.zeros(out_len, dtype=np.float64)
    for m in range(n_frames):
        out[..., m * hop : m * hop + window_len] += frames[..., m, :] * window
        wsq[m * hop : m * hop + window_len] += window * window
    return out / np.maximum(wsq, 1e-12)


def stft(x: Waveform, window_len: int = 512, hop: int | None = None) -> Spectrogram:
    """Hann-windowed STFT; the tail is zero-padded onto a whole number of hops."""
    if hop is None:
        hop = window_len // 2
    _check_cola(window_len, hop)
    frames = frame_signal(x.samples, window_len, hop)
    window = hann_periodic(window_len)
    bins = np.fft.rfft(frames * window, axis=-1)
    return Spectrogram(bins.T.copy(), window_len, hop, x.sample_rate_hz)


def istft(spec: Spectrogram) -> Waveform:
    """Inverse STFT; exact up to the half-window edges of the analysis padding."""
    _check_cola(spec.window_len, spec.hop)
    frames = np.fft.irfft(spec.bins.T, n=spec.window_len, axis=-1)
    window = hann_periodic(spec.window_len)
    y = overlap_add(frames, window, spec.hop)
    return Waveform(y, spec.sample_rate_hz)


def design_decimation_fir(factor: int, n_taps: int = 64) -> np.ndarray:
    """Windowed-sinc (Hamming) anti-alias lowpass at 0.45x the new Nyquist."""
    cutoff = 0.45 * 0.5 / factor  # in cycles per input sample
    n = np.arange(n_taps)
    center = (n_taps - 1) / 2.0
    taps = 2.0 * cutoff * np.sinc(2.0 * cutoff * (n - center))
    taps *= np.hamming(n_taps)
    return taps / taps.sum()


def resample_decimate(x: Waveform, factor: int) -> Waveform:
    """Integer-factor decimation with anti-alias prefiltering."""
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    if x.sample_rate_hz % factor != 0:
        raise ValueError(f"rate {x.sample_rate_hz} not divisible by factor {factor}")
    filtered = np.convolve(x.samples, design_decimation_fir(factor), mode="same")
    return Waveform(filtered[::factor], x.sample_rate_hz // factor)


def signal_power(x: np.ndarray) -> float:
    x = np.asarray(x)
    return float(np.mean(np.square(x, dtype=np.float64)))


def normalize_power(x: Waveform) -> Waveform:
    """Scale so the mean squared amplitude is exactly 1."""
    check_not_silent(x.samples, "waveform")
    return Waveform(x.samples / math.sqrt(signal_power(x.samples)), x.sample_rate_hz)


def rescale_relative_db(x: Waveform, rel_db: float) -> Waveform:
    """Scale a power-normalized signal to the given relative power in dB."""
    return Waveform(x.samples * 10.0 ** (rel_db / 20.0), x.sample_rate_hz)
