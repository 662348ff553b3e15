import numpy as np
import pytest

from chestsep.model import SeparatorConfig, SeparatorModel

# config small enough that a full forward/backward runs in milliseconds
TINY = dict(
    feature_size=32, mask_feature_size=16, conv_layers=1, transformer_depth=1,
    num_heads=2, kernel_size=64, stride=32,
)


@pytest.fixture
def tiny_model():
    return SeparatorModel(SeparatorConfig(**TINY), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    entries = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" in nodeid and getattr(report, "when", "call") == "call":
                name = nodeid.split("::")[-1]
                entries.append((name, "PASS" if status == "passed" else "FAIL"))
    if entries:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, verdict in sorted(entries):
            terminalreporter.write_line(f"{verdict}  {name}")
