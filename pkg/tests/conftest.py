from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from kgssl.datahub import SyntheticConfig, fit_normalize, synthesize  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def csv_fixture(tmp_path: Path) -> Path:
    """Three entities, ten days of forcing each, plus an attributes table."""
    rng = np.random.default_rng(5)
    forcing = tmp_path / "forcing"
    forcing.mkdir()
    dates = np.datetime64("2005-03-01") + np.arange(10)
    for eid in ("b01", "b02", "b03"):
        with open(forcing / f"{eid}.csv", "w") as fh:
            fh.write("date,prcp,tmax,response\n")
            for d in dates:
                p, t, q = rng.gamma(1.0, 3.0), rng.normal(10, 5), rng.gamma(2.0, 1.0)
                fh.write(f"{d},{p:.4f},{t:.4f},{q:.4f}\n")
    (tmp_path / "attributes.csv").write_text(
        "entity_id,area,slope,depth\n"
        "b01,120.5,0.12,1.5\n"
        "b02,80.0,,2.0\n"
        "b03,200.25,0.30,0.7\n"
    )
    return tmp_path


@pytest.fixture(scope="session")
def tiny_synthetic():
    """Standardized 20-entity synthetic dataset (T=400)."""
    raw = synthesize(SyntheticConfig(n_entities=20, n_days=400, seed=3))
    std, stats = fit_normalize(raw)
    return raw, std, stats


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
