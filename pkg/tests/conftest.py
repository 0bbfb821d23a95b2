from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (file, label column, positive label override)
DATASETS = {
    "wbc": (DATA / "wbc.csv", "Class", None),
    "pima": (DATA / "pima.csv", "Class", None),
    "heart": (DATA / "heart.csv", "Class", None),
    "hepatitis": (DATA / "hepatitis.csv", "Class", "1"),
}


@pytest.fixture(scope="session")
def wbc_path():
    return DATA / "wbc.csv"
