"""Inference timing benchmark.

Random [-1, 1] input of 40,000 samples, 2 untimed warmup runs, then 10 timed
runs; the batched scenario divides the mean by the batch size. The timed
region contains nothing but the model's forward call, so allocation noise
stays inside the model's own working set. Absolute times are hardware facts,
reported but never asserted.
"""

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

RUNS = 10
WARMUP_RUNS = 2
INPUT_LENGTH = 40_000
BATCH_SIZE = 16
SCENARIOS = ("single", "batch16")


@dataclass
class BenchReport:
    scenario: str
    run_seconds: list = field(default_factory=list)
    batch_size: int = 1
    warmup_runs: int = WARMUP_RUNS
    threads: str = "default"
    hardware: str = ""

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.run_seconds))

    @property
    def amortized_seconds(self) -> float:
        """Per-item time: batch mean divided by the batch size."""
        return self.mean_seconds / self.batch_size

    def describe(self) -> str:
        return (
            f"{self.scenario}: mean {1e3 * self.mean_seconds:.2f} ms over {len(self.run_seconds)} runs "
            f"(batch {self.batch_size}, {1e3 * self.amortized_seconds:.2f} ms/item, "
            f"{self.warmup_runs} warmups excluded) on {self.hardware}"
        )


def _hardware_string() -> str:
    return f"{platform.machine()} / {platform.processor() or 'unknown cpu'} / python {platform.python_version()}"


def bench(model, scenario: str = "single", seed: int = 0, threads: str = "default") -> BenchReport:
    """Time model.separate on random input; returns all run samples."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    rng = np.random.default_rng(seed)
    batch = BATCH_SIZE if scenario == "batch16" else 1
    shape = (batch, INPUT_LENGTH) if batch > 1 else (INPUT_LENGTH,)
    x = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)
    report = BenchReport(scenario, batch_size=batch, threads=threads, hardware=_hardware_string())
    for _ in range(WARMUP_RUNS):
        model.separate(x)
    for _ in range(RUNS):
        t0 = time.perf_counter()
        model.separate(x)
        report.run_seconds.append(time.perf_counter() - t0)
    return report
