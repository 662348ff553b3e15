"""Heart-rate and breathing-rate estimation from chest sounds.

Heart rate comes from the autocorrelation of the smoothed analytic envelope
of the 50-250 Hz band, searched over the neonatal 70-220 bpm lag range in
5-second sliding windows. Breathing rate counts peaks of the 300-450 Hz band
power envelope. Both estimators are amplitude-scale invariant (all validity
gates are relative), emit one value per elapsed second, and flag seconds
where the signal does not support an estimate.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks, hilbert

from . import dsp
from .dsp import Waveform
from .errors import UndefinedMetric

HR_BAND = (50.0, 250.0)
HR_SEARCH_BPM = (70.0, 220.0)
HR_WINDOW_S = 5.0
BR_BAND = (300.0, 450.0)
BR_WINDOW_S = 60.0
BR_ENVELOPE_HOP_S = 0.1
BR_MIN_PEAK_SPACING_S = 0.6

# relative gates (all scale-free). A window counts as heart-like when its
# envelope is periodic in the HR lag range AND either most signal power sits
# in the heart band (rules out lung sounds, whose band leakage stays < 0.2)
# or the envelope is strongly peaked (impulse-like beats are broadband, so
# their band share is low but their crest factor is large).
_HR_BAND_RATIO_MIN = 0.3
_HR_CREST_MIN = 8.0
_HR_PERIODICITY_MIN = 0.35
_BR_MODULATION_MIN = 0.2


@dataclass
class RateSeries:
    """Per-second rate estimates (bpm or breaths/min) with validity flags."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and valid flags must have the same length")

    def __len__(self):
        return self.values.shape[0]

    def valid_fraction(self) -> float:
        return float(np.mean(self.valid)) if len(self) else 0.0


def estimate_heart_rate(x: Waveform) -> RateSeries:
    """Envelope-autocorrelation heart rate, one bpm value per second."""
    fs = x.sample_rate_hz
    n_seconds = int(math.floor(x.duration_s))
    if x.duration_s < HR_WINDOW_S:
        raise ValueError(f"need at least {HR_WINDOW_S:.0f} s of audio, got {x.duration_s:.2f} s")
    band = dsp.design_butterworth_bandpass(4, HR_BAND[0], HR_BAND[1], fs)
    narrow = dsp.filter_apply(band, x).samples
    envelope = np.abs(hilbert(narrow))
    smooth = dsp.design_butterworth_lowpass(2, 20.0, fs)
    envelope = dsp.filter_apply(smooth, Waveform(envelope, fs)).samples
    window = int(HR_WINDOW_S * fs)
    lag_lo = int(fs * 60.0 / HR_SEARCH_BPM[1])
    lag_hi = int(fs * 60.0 / HR_SEARCH_BPM[0])
    values = np.zeros(n_seconds)
    valid = np.zeros(n_seconds, dtype=bool)
    for sec in range(n_seconds):
        start = int(np.clip((sec - 2) * fs, 0, len(x) - window))
        seg_env = envelope[start : start + window]
        seg_raw = narrow[start : start + window]
        band_ratio = dsp.signal_power(seg_raw) / max(
            dsp.signal_power(x.samples[start : start + window]), 1e-300
        )
        crest = float(seg_env.max()) / max(float(seg_env.mean()), 1e-300)
        centered = seg_env - seg_env.mean()
        denom = float(centered @ centered)
        if denom <= 0.0 or (band_ratio < _HR_BAND_RATIO_MIN and crest < _HR_CREST_MIN):
            continue
        ac = np.correlate(centered, centered, mode="full")[window - 1 :]
        search = ac[lag_lo:lag_hi]
        lag = lag_lo + int(np.argmax(search))
        periodicity = ac[lag] / denom
        if periodicity < _HR_PERIODICITY_MIN:
            continue
        values[sec] = 60.0 * fs / lag
        valid[sec] = True
    return RateSeries(values, valid)


def estimate_breathing_rate(x: Waveform) -> RateSeries:
    """Breaths/min from peaks of the 300-450 Hz power envelope."""
    fs = x.sample_rate_hz
    n_seconds = int(math.floor(x.duration_s))
    if x.duration_s < 15.0:
        raise ValueError(f"need at least 15 s of audio, got {x.duration_s:.2f} s")
    band = dsp.design_butterworth_bandpass(4, BR_BAND[0], BR_BAND[1], fs)
    narrow = dsp.filter_apply(band, x).samples
    hop = int(BR_ENVELOPE_HOP_S * fs)
    win = fs  # 1-second power windows, 0.1 s apart
    n_env = 1 + (len(narrow) - win) // hop
    squared = narrow * narrow
    cumsum = np.concatenate([[0.0], np.cumsum(squared)])
    starts = np.arange(n_env) * hop
    envelope = (cumsum[starts + win] - cumsum[starts]) / win
    env_rate = 1.0 / BR_ENVELOPE_HOP_S
    mean_env = float(envelope.mean())
    std_env = float(envelope.std())
    if mean_env <= 0.0 or std_env / mean_env < _BR_MODULATION_MIN:
        return RateSeries(np.zeros(n_seconds), np.zeros(n_seconds, dtype=bool))
    peaks, _ = find_peaks(
        envelope,
        distance=int(BR_MIN_PEAK_SPACING_S * env_rate),
        prominence=0.25 * std_env,
    )
    peak_times = peaks / env_rate
    window_s = min(BR_WINDOW_S, float(n_seconds))
    values = np.zeros(n_seconds)
    valid = np.zeros(n_seconds, dtype=bool)
    for sec in range(n_seconds):
        start = float(np.clip(sec + 0.5 - window_s / 2.0, 0.0, n_seconds - window_s))
        count = int(np.sum((peak_times >= start) & (peak_times < start + window_s)))
        if count >= 2:
            values[sec] = count * 60.0 / window_s
            valid[sec] = True
    return RateSeries(values, valid)


# ---------------------------------------------------------------------------
# improvement statistics
# ---------------------------------------------------------------------------

@dataclass
class ImprovementStats:
    """How much closer to the reference the estimates moved after separation."""

    errors_before: list = field(default_factory=list)
    errors_after: list = field(default_factory=list)

    @property
    def improvements(self) -> np.ndarray:
        return np.asarray(self.errors_before) - np.asarray(self.errors_after)

    @property
    def mean(self) -> float:
        return float(np.mean(self.improvements))

    @property
    def median(self) -> float:
        return float(np.median(self.improvements))

    @property
    def std(self) -> float:
        return float(np.std(self.improvements))


def recording_error(estimate: RateSeries, reference: RateSeries) -> float:
    """Mean absolute rate error over the seconds valid in both series."""
    n = min(len(estimate), len(reference))
    mask = estimate.valid[:n] & reference.valid[:n]
    if not np.any(mask):
        raise UndefinedMetric("no overlapping valid seconds between estimate and reference")
    return float(np.mean(np.abs(estimate.values[:n][mask] - reference.values[:n][mask])))


def rate_improvement(before, after, reference) -> ImprovementStats:
    """Aggregate improvement of after-separation estimates over before.

    Accepts single RateSeries or aligned sequences of them (one per recording).
    """
    if isinstance(before, RateSeries):
        before, after, reference = [before], [after], [reference]
    stats = ImprovementStats()
    for b, a, ref in zip(before, after, reference, strict=True):
        stats.errors_before.append(recording_error(b, ref))
        stats.errors_after.append(recording_error(a, ref))
    return stats


def load_reference_rates(path) -> tuple[RateSeries, RateSeries]:
    """Read a reference vitals CSV: second_index, hr_bpm, br_bpm (blank = missing)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.reader(fh):
            if not record or record[0].strip().lower() in ("second_index", ""):
                continue
            second = int(record[0])
            hr = float(record[1]) if len(record) > 1 and record[1].strip() else math.nan
            br = float(record[2]) if len(record) > 2 and record[2].strip() else math.nan
            rows.append((second, hr, br))
    if not rows:
        raise UndefinedMetric(f"no reference rows in {path}")
    n = max(second for second, _, _ in rows) + 1
    hr_vals, br_vals = np.zeros(n), np.zeros(n)
    hr_ok = np.zeros(n, dtype=bool)
    br_ok = np.zeros(n, dtype=bool)
    for second, hr, br in rows:
        if not math.isnan(hr):
            hr_vals[second], hr_ok[second] = hr, True
        if not math.isnan(br):
            br_vals[second], br_ok[second] = br, True
    return RateSeries(hr_vals, hr_ok), RateSeries(br_vals, br_ok)
