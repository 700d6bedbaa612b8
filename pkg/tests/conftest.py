import os
from pathlib import Path

import pytest

from helpers import ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def benchmark_results(tmp_path_factory):
    """Every (preset, seed) run of the phantom benchmark.

    ``MEDSNET_BENCHMARK_RESULTS`` points at an ``ablation.json`` from an earlier
    run to skip retraining; ``MEDSNET_BENCHMARK_DIR`` keeps the run outputs.
    """
    from medsnet.ablation import BenchmarkConfig, read_results, run_benchmark
    cached = os.environ.get("MEDSNET_BENCHMARK_RESULTS")
    if cached:
        return read_results(cached)
    out = os.environ.get("MEDSNET_BENCHMARK_DIR")
    out = Path(out) if out else tmp_path_factory.mktemp("benchmark")
    return run_benchmark(BenchmarkConfig(), out_dir=out)


def _criterion_key(line):
    label = line.split()[1]
    digits = label.rstrip("abcdefghijklmnopqrstuvwxyz")
    return int(digits), label


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
