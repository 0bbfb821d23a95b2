"""Build the four benchmark CSVs under data/ from wheels on a PyPI mirror.

UCI is not reachable from every build host, so the raw tables are pulled out
of two small data wheels instead:

* ``keel-ds``               -> wisconsin (683 rows), pima (768), heart (270)
* ``imbalanced-databases``  -> hepatitis (155 rows, original "?" cells kept)

The KEEL copy of Wisconsin Breast Cancer already has the 16 rows with a missing
``BareNuclei`` value removed, so it has 683 rows instead of the UCI 699.

Usage::

    python scripts/fetch_datasets.py [--wheel-dir DIR] [--out data]
"""
from __future__ import annotations

import argparse
import csv
import subprocess
import sys
import zipfile
from pathlib import Path

WHEELS = {
    "keel-ds": "keel_ds-*.whl",
    "imbalanced-databases": "imbalanced_databases-*.whl",
}

WBC_COLUMNS = [
    "ClumpThickness", "CellSize", "CellShape", "MarginalAdhesion",
    "EpithelialSize", "BareNuclei", "BlandChromatin", "NormalNucleoli",
    "Mitoses", "Class",
]

PIMA_COLUMNS = [
    "Pregnancies", "Glucose", "BloodPressure", "SkinThickness", "Insulin",
    "BMI", "DiabetesPedigree", "Age", "Class",
]

HEART_COLUMNS = [
    "Age", "Sex", "ChestPain", "RestBP", "Cholesterol", "FastingSugar",
    "RestECG", "MaxHeartRate", "ExerciseAngina", "Oldpeak", "Slope",
    "MajorVessels", "Thal", "Class",
]

HEPATITIS_COLUMNS = [
    "Class", "Age", "Sex", "Steroid", "Antivirals", "Fatigue", "Malaise",
    "Anorexia", "LiverBig", "LiverFirm", "SpleenPalpable", "Spiders",
    "Ascites", "Varices", "Bilirubin", "AlkPhosphate", "Sgot", "Albumin",
    "Protime", "Histology",
]


def _wheel(wheel_dir: Path, name: str) -> zipfile.ZipFile:
    found = sorted(wheel_dir.glob(WHEELS[name]))
    if not found:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", name, "--no-deps",
             "-d", str(wheel_dir)],
            check=True,
        )
        found = sorted(wheel_dir.glob(WHEELS[name]))
    return zipfile.ZipFile(found[-1])


def _parse_keel(text: str) -> tuple[list[str], list[list[str]]]:
    names, rows = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.lower().startswith("@attribute"):
            names.append(line.split()[1])
        elif not line.startswith("@"):
            rows.append([c.strip() for c in line.split(",")])
    return names, rows


def _write(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows, {len(header) - 1} features)")


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel-dir", type=Path, default=Path("/tmp/leaffuse-wheels"))
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args(argv)
    args.wheel_dir.mkdir(parents=True, exist_ok=True)
    args.out.mkdir(parents=True, exist_ok=True)

    keel = _wheel(args.wheel_dir, "keel-ds")
    # The "balanced" copies carry the original UCI labels but no header.
    for src, dst, names in [
        ("balanced/raw/wisconsin.dat", "wbc.csv", WBC_COLUMNS),
        ("balanced/raw/pima.dat", "pima.csv", PIMA_COLUMNS),
        ("balanced/raw/heart.dat", "heart.csv", HEART_COLUMNS),
    ]:
        _, rows = _parse_keel(keel.read(f"keel_ds/data/{src}").decode())
        _write(args.out / dst, names, rows)

    imb = _wheel(args.wheel_dir, "imbalanced-databases")
    raw = imb.read("imbalanced_databases/data/hepatitis/hepatitis.data.txt").decode()
    rows = [line.split(",") for line in raw.split() if line]
    # Class is the first UCI column; move it last to match the other files.
    rows = [r[1:] + r[:1] for r in rows]
    _write(args.out / "hepatitis.csv", HEPATITIS_COLUMNS[1:] + ["Class"], rows)


if __name__ == "__main__":
    main()
