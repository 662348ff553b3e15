"""Separation quality metrics: SI-SDR, the four-term projection decomposition,
SDR, improvement variants, and partitioned test-set evaluation.

The decomposition restricts the allowed deformation to a time-invariant gain,
so each component is an orthogonal projection onto the span of progressively
more references (target; +interferer; +noise). Perfect estimates would give
infinite ratios, so values are capped at +60 dB; the cap is recorded in the
report metadata.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datagen import DatasetManifest, noise_partition, render_sample
from .errors import DegenerateReferences, ShapeMismatch, UndefinedMetric

CAP_DB = 60.0
_CAP_RATIO = 1e-12

METRIC_NAMES = ("sdr", "sdri", "si_sdr", "si_sdri")
NOISE_PARTITIONS = ("no_noise", "general_noise", "resp_support")


def _samples(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D signal, got shape {arr.shape}")
    return arr


def _ratio_db(signal_energy: float, error_energy: float) -> float:
    if error_energy <= _CAP_RATIO * signal_energy:
        return CAP_DB
    return 10.0 * math.log10(signal_energy / error_energy)


def si_sdr(est, target) -> float:
    """Scale-invariant signal-to-distortion ratio in dB (capped at +60)."""
    e = _samples(est)
    t = _samples(target)
    if e.shape != t.shape:
        raise ShapeMismatch(f"est length {e.shape[0]} != target length {t.shape[0]}")
    tt = float(t @ t)
    if tt == 0.0:
        raise UndefinedMetric("si_sdr target is all zero")
    alpha = float(e @ t) / tt
    scaled = alpha * t
    err = scaled - e
    v = float(scaled @ scaled)
    if v == 0.0:
        return -math.inf
    return _ratio_db(v, float(err @ err))


@dataclass
class Decomposition:
    """est = s_target + e_interf + e_noise + e_artif, mutually orthogonal."""

    s_target: np.ndarray
    e_interf: np.ndarray
    e_noise: np.ndarray
    e_artif: np.ndarray

    def reconstruction(self) -> np.ndarray:
        return self.s_target + self.e_interf + self.e_noise + self.e_artif


def decompose(est, target, interferer, noise=None) -> Decomposition:
    """Split an estimate by projecting onto nested reference subspaces."""
    e = _samples(est)
    refs = [_samples(target), _samples(interferer)]
    if noise is not None:
        refs.append(_samples(noise))
    for r in refs:
        if r.shape != e.shape:
            raise ShapeMismatch(f"reference length {r.shape[0]} != estimate length {e.shape[0]}")
    basis = np.stack(refs, axis=1)
    q, r = np.linalg.qr(basis)
    col_norms = np.linalg.norm(basis, axis=0)
    if np.any(np.abs(np.diag(r)) <= 1e-10 * np.maximum(col_norms, 1e-300)):
        raise DegenerateReferences("reference signals are linearly dependent")
    coeffs = q.T @ e
    proj_t = q[:, 0] * coeffs[0]
    proj_ti = proj_t + q[:, 1] * coeffs[1]
    proj_all = proj_ti + (q[:, 2] * coeffs[2] if noise is not None else 0.0)
    return Decomposition(
        s_target=proj_t,
        e_interf=proj_ti - proj_t,
        e_noise=proj_all - proj_ti,
        e_artif=e - proj_all,
    )


def sdr(dec: Decomposition) -> float:
    """Signal-to-distortion ratio of a decomposition in dB (capped at +60)."""
    v = float(dec.s_target @ dec.s_target)
    err = dec.e_interf + dec.e_noise + dec.e_artif
    err_energy = float(err @ err)
    # a target component this far below the error energy is projection
    # round-off, not signal: the true component is zero
    if v <= 1e-20 * (v + err_energy):
        raise UndefinedMetric("sdr: projected target component is zero")
    return _ratio_db(v, err_energy)


def improvement(metric_fn, est, mixture, *refs) -> float:
    """metric(est) - metric(mixture): the unprocessed mixture is the baseline."""
    return metric_fn(est, *refs) - metric_fn(mixture, *refs)


# ---------------------------------------------------------------------------
# test-set evaluation
# ---------------------------------------------------------------------------

@dataclass
class SampleMetrics:
    sample_index: int
    partition: str  # noise partition tag
    noise_kind: str
    mode: str
    rel_db_lung: float
    rel_db_noise: float
    values: dict = field(default_factory=dict)  # e.g. values["heart"]["si_sdri"]
    skipped_reason: str = ""

    @property
    def skipped(self) -> bool:
        return bool(self.skipped_reason)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    cap_db: float = CAP_DB

    def partition_rows(self, partition: str) -> list:
        return [r for r in self.rows if r.partition == partition and not r.skipped]

    def aggregate(self, partition: str, source: str, metric: str, stat=np.median) -> float:
        rows = self.partition_rows(partition)
        if not rows:
            return math.nan
        return float(stat([r.values[source][metric] for r in rows]))

    def summary(self) -> dict:
        out = {}
        for partition in NOISE_PARTITIONS:
            if not self.partition_rows(partition):
                continue
            for source in ("heart", "lung"):
                for metric in METRIC_NAMES:
                    out[(partition, source, metric)] = round(
                        self.aggregate(partition, source, metric), 2
                    )
        return out

    def to_csv(self, path, include_summary: bool = True):
        header = ["sample_index", "partition", "noise_kind", "mode", "rel_db_lung", "rel_db_noise"]
        for source in ("heart", "lung"):
            header += [f"{m}_{source}" for m in METRIC_NAMES]
        header.append("skipped_reason")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"# cap_db={self.cap_db}"])
            writer.writerow(header)
            for r in self.rows:
                record = [r.sample_index, r.partition, r.noise_kind, r.mode, r.rel_db_lung, r.rel_db_noise]
                for source in ("heart", "lung"):
                    if r.skipped:
                        record += ["", "", "", ""]
                    else:
                        record += [f"{r.values[source][m]:.6f}" for m in METRIC_NAMES]
                record.append(r.skipped_reason)
                writer.writerow(record)
            if include_summary:
                for (partition, source, metric), value in self.summary().items():
                    writer.writerow(["median", partition, "", "", "", "", f"{source}_{metric}", f"{value:.2f}"])

    @property
    def n_skipped(self) -> int:
        return sum(1 for r in self.rows if r.skipped)


def _evaluate_one(separate_fn, record, duration_s):
    sample = render_sample(record, duration_s)
    mixture = sample.mixture.samples
    peak = np.max(np.abs(mixture))
    est = separate_fn((mixture / peak).astype(np.float32) if peak > 0 else mixture.astype(np.float32))
    est = np.asarray(est, dtype=np.float64)
    targets = {"heart": sample.target_heart.samples, "lung": sample.target_lung.samples}
    noise_ref = sample.noise.samples if record.noise_kind != "none" else None
    row = SampleMetrics(
        record.sample_index, noise_partition(record.noise_kind), record.noise_kind,
        record.mode, record.rel_db_lung, record.rel_db_noise,
    )
    try:
        for idx, source in enumerate(("heart", "lung")):
            target = targets[source]
            interferer = targets["lung" if source == "heart" else "heart"]
            est_s = est[idx]
            sdr_est = sdr(decompose(est_s, target, interferer, noise_ref))
            sdr_mix = sdr(decompose(mixture, target, interferer, noise_ref))
            si_est = si_sdr(est_s, target)
            si_mix = si_sdr(mixture, target)
            row.values[source] = {
                "sdr": sdr_est,
                "sdri": sdr_est - sdr_mix,
                "si_sdr": si_est,
                "si_sdri": si_est - si_mix,
            }
    except (UndefinedMetric, DegenerateReferences) as err:
        row.values = {}
        row.skipped_reason = str(err)
    return row


def evaluate_testset(model, manifest: DatasetManifest, duration_s: float = 10.0, threads: int = 1) -> MetricsReport:
    """Per-sample SDRi / SI-SDRi for heart and lung over a test manifest.

    `model` only needs a separate(mixture) -> (2, T) method. Undefined-metric
    samples are recorded as skipped with their reason, never dropped. Rows
    come back ordered by sample index regardless of thread count.
    """
    records = [r for r in manifest.rows if r.partition == "test"]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda r: _evaluate_one(model.separate, r, duration_s), records))
    else:
        rows = [_evaluate_one(model.separate, r, duration_s) for r in records]
    rows.sort(key=lambda r: r.sample_index)
    return MetricsReport(rows)
