"""Synthetic chest-sound mixture lab.

Clinical recordings are replaced by parameterized generators that honor the
checkable properties of real neonatal chest sounds: heart sounds are periodic
S1/S2 pairs confined to 50-250 Hz, lung sounds are breath-modulated noise in
200-1000 Hz, plus cry, CPAP, and stethoscope-handling noise generators.
Mixtures are built additively or convolutively (short unit-norm FIRs) after
power normalization, with the heart fixed at the 0 dB reference.

Everything is manifest-driven: a manifest line stores seeds and scalar
parameters only, and regenerating from it is bitwise deterministic. Subjects
are assigned to exactly one partition; generation derives per-sample RNG
streams with a 64-bit mix so parallel synthesis equals serial synthesis.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp
from .dsp import Waveform
from .errors import ConfigError, ShapeMismatch
from .validation import check_same_length

SAMPLE_RATE = dsp.CANONICAL_RATE_HZ
DEFAULT_DURATION_S = 10.0
CROP_SECONDS = 8.0

NOISE_KINDS = ("cry", "cpap_bubble", "cpap_vent", "steth_rub", "steth_disconnect")
SOURCE_KINDS = ("heart", "lung") + NOISE_KINDS
TRAIN_NOISE_KINDS = ("cry", "cpap_bubble", "cpap_vent")  # stethoscope noise held out
GENERAL_NOISE_KINDS = ("cry", "steth_rub", "steth_disconnect")
RESP_NOISE_KINDS = ("cpap_bubble", "cpap_vent")
TEST_DB_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0)

PARTITIONS = ("train", "val", "test")
DEFAULT_SUBJECTS = {
    "train": tuple(range(0, 8)),
    "val": (8, 9),
    "test": (10, 11),
}

_SUBJECT_SALT = 0x5EED_0001
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(a: int, b: int) -> int:
    """Deterministic 64-bit stream-splitting mix (splitmix64 finalizer)."""
    x = (int(a) ^ (int(b) * _GOLDEN)) & 0xFFFFFFFFFFFFFFFF
    x = (x + _GOLDEN) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def noise_partition(noise_kind: str) -> str:
    if noise_kind == "none":
        return "no_noise"
    if noise_kind in GENERAL_NOISE_KINDS:
        return "general_noise"
    if noise_kind in RESP_NOISE_KINDS:
        return "resp_support"
    raise ConfigError(f"unknown noise kind {noise_kind!r}")


# ---------------------------------------------------------------------------
# source generators
# ---------------------------------------------------------------------------

@dataclass
class SourceSpec:
    kind: str
    subject_id: int = 0
    seed: int = 0
    duration_s: float = DEFAULT_DURATION_S
    heart_bpm: float = 140.0
    breath_rate_bpm: float = 50.0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {self.kind!r}")
        if not (100.0 <= self.heart_bpm <= 200.0):
            raise ConfigError(f"heart_bpm {self.heart_bpm} outside neonatal range [100, 200]")
        if not (30.0 <= self.breath_rate_bpm <= 80.0):
            raise ConfigError(f"breath_rate_bpm {self.breath_rate_bpm} outside [30, 80]")


def subject_profile(subject_id: int) -> dict:
    """Stable per-subject timbre so one 'baby' sounds the same across samples."""
    rng = np.random.default_rng(mix64(_SUBJECT_SALT, subject_id))
    return {
        "s1_hz": rng.uniform(65.0, 95.0),
        "s2_hz": rng.uniform(100.0, 145.0),
        "s1_width_s": rng.uniform(0.010, 0.016),
        "s2_width_s": rng.uniform(0.007, 0.012),
        "s2_level": rng.uniform(0.5, 0.75),
        "lung_tilt": rng.uniform(0.8, 1.2),
    }


def _pink_noise(rng, n: int) -> np.ndarray:
    """1/f-shaped noise via spectral shaping of white noise."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    shaping = np.ones_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    return np.fft.irfft(spec * shaping, n=n)


def _gaussian_tone(t, center_s, width_s, freq_hz, phase):
    return np.exp(-0.5 * ((t - center_s) / width_s) ** 2) * np.sin(
        2.0 * math.pi * freq_hz * (t - center_s) + phase
    )


def _synth_heart(spec: SourceSpec, rng) -> np.ndarray:
    """Regular S1/S2 pairs, bandpassed to the 50-250 Hz heart band."""
    profile = subject_profile(spec.subject_id)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    cycle = 60.0 / spec.heart_bpm
    x = np.zeros(n)
    # carrier phases fixed per recording so successive beats correlate
    s1_phase = rng.uniform(0, 2 * math.pi)
    s2_phase = rng.uniform(0, 2 * math.pi)
    wobble = 1.0 + 0.02 * rng.standard_normal()
    beat = 0
    while beat * cycle < spec.duration_s + cycle:
        s1_t = beat * cycle
        s2_t = s1_t + 0.45 * cycle
        amp = 1.0 + 0.1 * rng.standard_normal()
        lo = max(0, int((s1_t - 0.1) * SAMPLE_RATE))
        hi = min(n, int((s2_t + 0.1) * SAMPLE_RATE))
        if lo < hi:
            seg = slice(lo, hi)
            x[seg] += amp * _gaussian_tone(
                t[seg], s1_t, profile["s1_width_s"], profile["s1_hz"] * wobble, s1_phase
            )
            x[seg] += amp * profile["s2_level"] * _gaussian_tone(
                t[seg], s2_t, profile["s2_width_s"], profile["s2_hz"] * wobble, s2_phase
            )
        beat += 1
    band = dsp.design_butterworth_bandpass(4, 50.0, 250.0, SAMPLE_RATE)
    return dsp.filter_apply(band, Waveform(x)).samples


def _synth_lung(spec: SourceSpec, rng) -> np.ndarray:
    """Breath-modulated pink noise confined to the 200-1000 Hz lung band."""
    profile = subject_profile(spec.subject_id)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    noise = _pink_noise(rng, n) * profile["lung_tilt"]
    # 8th order: pink noise carries enough low-frequency energy that a 4th
    # order skirt leaks >10% outside the 200-1000 Hz lung band
    band = dsp.design_butterworth_bandpass(8, 200.0, 1000.0, SAMPLE_RATE)
    noise = dsp.filter_apply(band, Waveform(noise)).samples
    fb = spec.breath_rate_bpm / 60.0
    phase = rng.uniform(0, 2 * math.pi)
    envelope = 0.15 + 0.85 * (0.5 - 0.5 * np.cos(2 * math.pi * fb * t + phase)) ** 1.5
    return noise * envelope


def _synth_cry(spec: SourceSpec, rng) -> np.ndarray:
    """Harmonic stack with vibrato in cry bursts, highpassed at 300 Hz."""
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(350.0, 550.0)
    vibrato = 1.0 + 0.03 * np.sin(2 * math.pi * rng.uniform(4.0, 7.0) * t + rng.uniform(0, 2 * math.pi))
    inst_freq = f0 * vibrato
    phase = 2.0 * math.pi * np.cumsum(inst_freq) / SAMPLE_RATE
    x = np.zeros(n)
    for h in range(1, 6):
        x += np.sin(h * phase + rng.uniform(0, 2 * math.pi)) / h
    # cry comes in bursts with breathing gaps
    envelope = np.zeros(n)
    pos = rng.uniform(0.0, 0.4)
    while pos < spec.duration_s:
        burst = rng.uniform(0.6, 1.6)
        gap = rng.uniform(0.3, 1.0)
        i0, i1 = int(pos * SAMPLE_RATE), min(n, int((pos + burst) * SAMPLE_RATE))
        if i1 > i0:
            ramp = min(200, (i1 - i0) // 2)
            shape = np.ones(i1 - i0)
            if ramp > 0:
                edge = 0.5 - 0.5 * np.cos(np.linspace(0, math.pi, ramp))
                shape[:ramp] = edge
                shape[-ramp:] = edge[::-1]
            envelope[i0:i1] = shape
        pos += burst + gap
    hp = dsp.design_butterworth_highpass(2, 300.0, SAMPLE_RATE)
    return dsp.filter_apply(hp, Waveform(x * envelope)).samples


def _synth_cpap(spec: SourceSpec, rng, bubble: bool) -> np.ndarray:
    """Respiratory-support machinery: stationary narrowband hum plus broadband hiss."""
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    hum_hz = rng.uniform(85.0, 120.0) if bubble else rng.uniform(160.0, 260.0)
    hum = np.sin(2 * math.pi * hum_hz * t + rng.uniform(0, 2 * math.pi))
    hum += 0.4 * np.sin(2 * math.pi * 2 * hum_hz * t + rng.uniform(0, 2 * math.pi))
    hiss = rng.standard_normal(n)
    band = dsp.design_butterworth_bandpass(4, 150.0, 1500.0, SAMPLE_RATE)
    hiss = dsp.filter_apply(band, Waveform(hiss)).samples
    if bubble:
        # bubbling: hiss gated by rectified low-rate noise pops
        lp = dsp.design_butterworth_lowpass(2, rng.uniform(8.0, 15.0), SAMPLE_RATE)
        gate = dsp.filter_apply(lp, Waveform(rng.standard_normal(n))).samples
        gate = np.maximum(gate, 0.0)
        peak = np.max(gate)
        if peak > 0:
            gate = gate / peak
        hiss = hiss * (0.25 + 0.75 * gate)
    return 0.7 * hum + hiss


def _steth_burst_train(rng, n, n_bursts_range, burst_s_range) -> np.ndarray:
    x = np.zeros(n)
    band = dsp.design_butterworth_bandpass(4, 30.0, 800.0, SAMPLE_RATE)
    for _ in range(rng.integers(*n_bursts_range)):
        dur = rng.uniform(*burst_s_range)
        start = rng.uniform(0.0, max(0.01, n / SAMPLE_RATE - dur))
        i0, i1 = int(start * SAMPLE_RATE), min(n, int((start + dur) * SAMPLE_RATE))
        burst = rng.standard_normal(i1 - i0) * rng.uniform(0.5, 1.5)
        window = np.hanning(i1 - i0)
        x[i0:i1] += burst * window
    return dsp.filter_apply(band, Waveform(x)).samples


def disconnect_interval(spec: SourceSpec) -> tuple[int, int]:
    """Sample index range over which a steth_disconnect hides the chest sounds.

    Uses the same leading RNG draws as the generator, so interval and audio
    always agree for a given spec.
    """
    rng = np.random.default_rng(spec.seed)
    duration = float(rng.uniform(1.0, 3.0))
    latest = max(0.0, spec.duration_s - duration)
    start = float(rng.uniform(0.0, latest))
    i0 = int(start * SAMPLE_RATE)
    i1 = min(int(round(spec.duration_s * SAMPLE_RATE)), int((start + duration) * SAMPLE_RATE))
    return i0, i1


def _synth_steth_disconnect(spec: SourceSpec, rng) -> np.ndarray:
    n = int(round(spec.duration_s * SAMPLE_RATE))
    duration = float(rng.uniform(1.0, 3.0))
    latest = max(0.0, spec.duration_s - duration)
    start = float(rng.uniform(0.0, latest))
    i0 = int(start * SAMPLE_RATE)
    i1 = min(n, int((start + duration) * SAMPLE_RATE))
    x = np.zeros(n)
    handling = rng.standard_normal(i1 - i0)
    ramp = min(400, (i1 - i0) // 2)
    shape = np.ones(i1 - i0)
    if ramp > 0:
        edge = 0.5 - 0.5 * np.cos(np.linspace(0, math.pi, ramp))
        shape[:ramp] = edge
        shape[-ramp:] = edge[::-1]
    x[i0:i1] = handling * shape
    band = dsp.design_butterworth_bandpass(4, 50.0, 1500.0, SAMPLE_RATE)
    return dsp.filter_apply(band, Waveform(x)).samples


def synth_source(spec: SourceSpec) -> Waveform:
    """Render one reference source, bitwise deterministic per (kind, seed)."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "heart":
        samples = _synth_heart(spec, rng)
    elif spec.kind == "lung":
        samples = _synth_lung(spec, rng)
    elif spec.kind == "cry":
        samples = _synth_cry(spec, rng)
    elif spec.kind == "cpap_bubble":
        samples = _synth_cpap(spec, rng, bubble=True)
    elif spec.kind == "cpap_vent":
        samples = _synth_cpap(spec, rng, bubble=False)
    elif spec.kind == "steth_rub":
        samples = _steth_burst_train(rng, int(round(spec.duration_s * SAMPLE_RATE)), (3, 9), (0.05, 0.2))
    elif spec.kind == "steth_disconnect":
        samples = _synth_steth_disconnect(spec, rng)
    else:  # pragma: no cover - guarded by SourceSpec
        raise ConfigError(f"unknown source kind {spec.kind!r}")
    return Waveform(samples, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def random_unit_fir(rng, len_range=(3, 5)) -> np.ndarray:
    """Random FIR with unit squared norm; length uniform over the closed range."""
    lo, hi = len_range
    length = int(rng.integers(lo, hi + 1))
    coeffs = rng.standard_normal(length)
    return coeffs / np.linalg.norm(coeffs)


def causal_fir(x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """(a * b)(t) = sum_k a(k) b(t-k), truncated to the input length."""
    return np.convolve(x, coeffs)[: x.shape[0]]


@dataclass
class MixtureSample:
    mixture: Waveform
    target_heart: Waveform
    target_lung: Waveform
    noise: Waveform  # the contribution actually present in the mixture
    noise_kind: str = "none"
    rel_db_lung: float = 0.0
    rel_db_noise: float = 0.0
    mixing: str = "additive"
    fir_filters: list | None = None
    subject_id: int = 0
    partition: str = "train"

    def __post_init__(self):
        check_same_length(
            self.mixture.samples, self.target_heart.samples,
            self.target_lung.samples, self.noise.samples,
            names=["mixture", "target_heart", "target_lung", "noise"],
        )

    @property
    def length(self) -> int:
        return len(self.mixture)

    def targets_array(self) -> np.ndarray:
        return np.stack([self.target_heart.samples, self.target_lung.samples])


def mix(
    heart: Waveform,
    lung: Waveform,
    noise: Waveform | None,
    rel_db_lung: float,
    rel_db_noise: float,
    mode: str = "additive",
    firs: list | None = None,
    noise_kind: str = "none",
    zero_interval: tuple | None = None,
    subject_id: int = 0,
    partition: str = "train",
) -> MixtureSample:
    """Combine power-normalized sources into a mixture plus aligned targets.

    The heart stays at the 0 dB reference; lung and noise are rescaled to
    their relative powers. Convolutive mode filters each source with its own
    unit-norm FIR, and the stored targets are the filtered contributions.
    For disconnect noise the heart/lung contributions are zeroed over
    zero_interval before summation, so targets stay exact.
    """
    if mode not in ("additive", "convolutive"):
        raise ConfigError(f"unknown mixing mode {mode!r}")
    if (firs is not None) != (mode == "convolutive"):
        raise ConfigError("FIR filters must be given exactly when mode is convolutive")
    n = check_same_length(
        heart.samples, lung.samples,
        noise.samples if noise is not None else heart.samples,
        names=["heart", "lung", "noise"],
    )
    h = dsp.rescale_relative_db(dsp.normalize_power(heart), 0.0).samples
    l = dsp.rescale_relative_db(dsp.normalize_power(lung), rel_db_lung).samples
    if noise is not None:
        nz = dsp.rescale_relative_db(dsp.normalize_power(noise), rel_db_noise).samples
    else:
        nz = np.zeros(n)
    if mode == "convolutive":
        if len(firs) != 3:
            raise ConfigError(f"convolutive mixing needs 3 FIRs, got {len(firs)}")
        h = causal_fir(h, firs[0])
        l = causal_fir(l, firs[1])
        nz = causal_fir(nz, firs[2])
    if zero_interval is not None:
        i0, i1 = zero_interval
        h = h.copy()
        l = l.copy()
        h[i0:i1] = 0.0
        l[i0:i1] = 0.0
    mixture = h + l + nz
    rate = heart.sample_rate_hz
    return MixtureSample(
        Waveform(mixture, rate), Waveform(h, rate), Waveform(l, rate), Waveform(nz, rate),
        noise_kind=noise_kind, rel_db_lung=rel_db_lung, rel_db_noise=rel_db_noise,
        mixing=mode, fir_filters=firs, subject_id=subject_id, partition=partition,
    )


def random_crop(sample: MixtureSample, crop_s: float = CROP_SECONDS, rng=None) -> MixtureSample:
    """Crop the same random window out of the mixture and every target."""
    rate = sample.mixture.sample_rate_hz
    crop = int(round(crop_s * rate))
    if crop >= sample.length:
        raise ShapeMismatch(f"crop of {crop} samples >= sample length {sample.length}")
    offset = int(rng.integers(0, sample.length - crop + 1)) if rng is not None else 0
    window = slice(offset, offset + crop)
    return replace(
        sample,
        mixture=Waveform(sample.mixture.samples[window], rate),
        target_heart=Waveform(sample.target_heart.samples[window], rate),
        target_lung=Waveform(sample.target_lung.samples[window], rate),
        noise=Waveform(sample.noise.samples[window], rate),
    )


# ---------------------------------------------------------------------------
# manifest records and rendering
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    """One manifest line: everything needed to regenerate a sample exactly."""

    sample_index: int
    partition: str
    subject_id: int
    noise_kind: str
    mode: str
    rel_db_lung: float
    rel_db_noise: float
    seed: int
    heart_bpm: float
    breath_rate_bpm: float
    fir_len: int = 0

    def to_line(self) -> str:
        return (
            f"sample_index={self.sample_index} partition={self.partition} "
            f"subject_id={self.subject_id} noise_kind={self.noise_kind} mode={self.mode} "
            f"rel_db_lung={self.rel_db_lung!r} rel_db_noise={self.rel_db_noise!r} "
            f"seed={self.seed} heart_bpm={self.heart_bpm!r} "
            f"breath_rate_bpm={self.breath_rate_bpm!r} fir_len={self.fir_len}"
        )

    @classmethod
    def from_line(cls, line: str) -> "SampleRecord":
        pairs = {}
        for token in line.split():
            key, _, value = token.partition("=")
            if not _:
                raise ConfigError(f"malformed manifest token {token!r}")
            pairs[key] = value
        try:
            return cls(
                sample_index=int(pairs["sample_index"]),
                partition=pairs["partition"],
                subject_id=int(pairs["subject_id"]),
                noise_kind=pairs["noise_kind"],
                mode=pairs["mode"],
                rel_db_lung=float(pairs["rel_db_lung"]),
                rel_db_noise=float(pairs["rel_db_noise"]),
                seed=int(pairs["seed"]),
                heart_bpm=float(pairs["heart_bpm"]),
                breath_rate_bpm=float(pairs["breath_rate_bpm"]),
                fir_len=int(pairs.get("fir_len", "0")),
            )
        except KeyError as missing:
            raise ConfigError(f"manifest line missing key {missing}") from None


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def subjects_by_partition(self) -> dict:
        out = {}
        for row in self.rows:
            out.setdefault(row.partition, set()).add(row.subject_id)
        return out

    def assert_no_leakage(self):
        pools = self.subjects_by_partition()
        names = list(pools)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                overlap = pools[a] & pools[b]
                assert not overlap, f"subjects {sorted(overlap)} appear in both {a} and {b}"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# chestsep manifest v1\n")
            for row in self.rows:
                fh.write(row.to_line() + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                rows.append(SampleRecord.from_line(line))
        return cls(rows)


def render_sample(record: SampleRecord, duration_s: float = DEFAULT_DURATION_S) -> MixtureSample:
    """Regenerate the audio for a manifest row (bitwise deterministic)."""
    heart = synth_source(SourceSpec(
        "heart", record.subject_id, mix64(record.seed, 1), duration_s,
        heart_bpm=record.heart_bpm, breath_rate_bpm=record.breath_rate_bpm,
    ))
    lung = synth_source(SourceSpec(
        "lung", record.subject_id, mix64(record.seed, 2), duration_s,
        heart_bpm=record.heart_bpm, breath_rate_bpm=record.breath_rate_bpm,
    ))
    noise = None
    zero_interval = None
    if record.noise_kind != "none":
        noise_spec = SourceSpec(record.noise_kind, record.subject_id, mix64(record.seed, 3), duration_s)
        noise = synth_source(noise_spec)
        if record.noise_kind == "steth_disconnect":
            zero_interval = disconnect_interval(noise_spec)
    firs = None
    if record.mode == "convolutive":
        fir_rng = np.random.default_rng(mix64(record.seed, 4))
        length = record.fir_len
        firs = [random_unit_fir(fir_rng, (length, length)) for _ in range(3)]
    return mix(
        heart, lung, noise, record.rel_db_lung, record.rel_db_noise, record.mode,
        firs=firs, noise_kind=record.noise_kind, zero_interval=zero_interval,
        subject_id=record.subject_id, partition=record.partition,
    )


# ---------------------------------------------------------------------------
# dataset builders
# ---------------------------------------------------------------------------

@dataclass
class DatasetParams:
    seed: int = 0
    subjects: dict = field(default_factory=lambda: dict(DEFAULT_SUBJECTS))
    modes: tuple = ("additive", "convolutive")
    db_grid: tuple = TEST_DB_GRID
    val_samples: int = 32

    def pool(self, partition: str) -> tuple:
        if partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {partition!r}")
        return tuple(self.subjects[partition])

    def validate(self):
        for a in PARTITIONS:
            for b in PARTITIONS:
                if a < b:
                    overlap = set(self.subjects[a]) & set(self.subjects[b])
                    if overlap:
                        raise ConfigError(f"subjects {sorted(overlap)} leak between {a} and {b}")
        return self


def _subject_rates(rng):
    return float(rng.uniform(100.0, 200.0)), float(rng.uniform(30.0, 80.0))


def build_test_manifest(params: DatasetParams | None = None) -> DatasetManifest:
    """Full combinatorial test grid: subjects x noise kinds x dB grid x modes.

    The no-noise block varies only the lung level; noisy blocks sweep lung
    and noise levels independently. Test-set FIRs are fixed at length 3.
    """
    params = (params or DatasetParams()).validate()
    rows = []
    index = 0

    def push(subject, kind, mode, lung_db, noise_db):
        nonlocal index
        seed = mix64(params.seed, index)
        bpm, br = _subject_rates(np.random.default_rng(mix64(seed, 7)))
        rows.append(SampleRecord(
            index, "test", subject, kind, mode, float(lung_db), float(noise_db),
            seed, bpm, br, fir_len=3 if mode == "convolutive" else 0,
        ))
        index += 1

    for subject in params.pool("test"):
        for mode in params.modes:
            for lung_db in params.db_grid:
                push(subject, "none", mode, lung_db, 0.0)
    for kinds in (GENERAL_NOISE_KINDS, RESP_NOISE_KINDS):
        for subject in params.pool("test"):
            for kind in kinds:
                for mode in params.modes:
                    for lung_db in params.db_grid:
                        for noise_db in params.db_grid:
                            push(subject, kind, mode, lung_db, noise_db)
    manifest = DatasetManifest(rows)
    manifest.assert_no_leakage()
    return manifest


def build_validation_manifest(params: DatasetParams | None = None) -> DatasetManifest:
    """Fixed validation set mirroring the training distribution (no stethoscope noise)."""
    params = (params or DatasetParams()).validate()
    pool = params.pool("val")
    kinds = ("none",) + TRAIN_NOISE_KINDS
    rows = []
    for index in range(params.val_samples):
        seed = mix64(mix64(params.seed, 0x7A15EED), index)
        rng = np.random.default_rng(seed)
        subject = int(pool[int(rng.integers(len(pool)))])
        kind = kinds[int(rng.integers(len(kinds)))]
        mode = params.modes[int(rng.integers(len(params.modes)))]
        lung_db = float(rng.uniform(-10.0, 10.0))
        noise_db = float(rng.uniform(-10.0, 10.0)) if kind != "none" else 0.0
        bpm, br = _subject_rates(rng)
        rows.append(SampleRecord(
            index, "val", subject, kind, mode, lung_db, noise_db, seed, bpm, br,
            fir_len=int(rng.integers(3, 6)) if mode == "convolutive" else 0,
        ))
    manifest = DatasetManifest(rows)
    manifest.assert_no_leakage()
    return manifest


class TrainingStream:
    """Endless stream of freshly synthesized, randomly cropped training batches.

    Sample RNG streams derive from (seed, epoch, step, item), so any batch can
    be regenerated independently of generation order, and a resumed run sees
    exactly the data the uninterrupted run would have seen.
    """

    def __init__(
        self,
        seed: int = 0,
        params: DatasetParams | None = None,
        crop_s: float | None = CROP_SECONDS,
        include_stethoscope: bool = False,
        duration_s: float = DEFAULT_DURATION_S,
    ):
        self.seed = seed
        self.params = (params or DatasetParams()).validate()
        self.crop_s = crop_s
        self.duration_s = duration_s
        self.noise_kinds = TRAIN_NOISE_KINDS + (("steth_rub", "steth_disconnect") if include_stethoscope else ())

    def record_for(self, epoch: int, step: int, item: int, noise_db_range=(-20.0, 0.0)) -> SampleRecord:
        seed = mix64(mix64(mix64(self.seed, epoch), step), item)
        rng = np.random.default_rng(seed)
        pool = self.params.pool("train")
        subject = int(pool[int(rng.integers(len(pool)))])
        kind = self.noise_kinds[int(rng.integers(len(self.noise_kinds)))]
        mode = self.params.modes[int(rng.integers(len(self.params.modes)))]
        lung_db = float(rng.uniform(-10.0, 10.0))
        noise_db = float(rng.uniform(noise_db_range[0], noise_db_range[1]))
        bpm, br = _subject_rates(rng)
        fir_len = int(rng.integers(3, 6)) if mode == "convolutive" else 0
        return SampleRecord(
            item, "train", subject, kind, mode, lung_db, noise_db, seed, bpm, br, fir_len,
        )

    def sample(self, epoch: int, step: int, item: int, noise_db_range) -> MixtureSample:
        record = self.record_for(epoch, step, item, noise_db_range)
        rendered = render_sample(record, self.duration_s)
        if self.crop_s is not None:
            crop_rng = np.random.default_rng(mix64(record.seed, 5))
            rendered = random_crop(rendered, self.crop_s, crop_rng)
        return rendered

    def batch(self, epoch: int, step: int, batch_size: int, noise_db_range) -> tuple:
        """Returns (mixtures (B, T), targets (B, 2, T)) as float32 arrays."""
        mixtures, targets = [], []
        for item in range(batch_size):
            s = self.sample(epoch, step, item, noise_db_range)
            mixtures.append(s.mixture.samples)
            targets.append(s.targets_array())
        return (
            np.asarray(mixtures, dtype=np.float32),
            np.asarray(targets, dtype=np.float32),
        )
