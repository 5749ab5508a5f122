"""
File Handler Utilities
----------------------
Reading the inputs an experiment needs: the school-level success dataset
(tab-separated), lattice observation grids (row-major numeric text) and
writing result tables next to each other in an output directory.
"""

import json
from pathlib import Path

import numpy as np
import pandas as pd

from config.constants import DATASET_COLUMNS, EXCLUDED_DISTRICTS, EXCLUDED_YEARS
from services.errors import ConfigError, MalformedRow
from utils.logger import dcsmc_logger


def ingest_dataset(path):
    """
    Load the hierarchical dataset.

    Each row holds county, district, school, year, trials and successes.
    Rows from the excluded district and the excluded years are dropped.
    Line numbers in errors count the header as line 1.

    Args:
        path: TSV file with a header row

    Returns:
        list of record dicts, in file order

    Raises:
        MalformedRow: missing columns, non-integer counts, or successes
            outside [0, trials]
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist")

    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    missing = [c for c in DATASET_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRow(1, f"missing columns {', '.join(missing)}")

    records = []
    for index, row in frame.iterrows():
        line = index + 2
        try:
            year = int(row["year"])
            trials = int(row["trials"])
            successes = int(row["successes"])
        except ValueError:
            raise MalformedRow(line, "year, trials and successes must be integers") from None
        if trials < 0 or not 0 <= successes <= trials:
            raise MalformedRow(line, f"successes {successes} outside [0, {trials}]")
        district = row["district"].strip()
        if district in EXCLUDED_DISTRICTS or year in EXCLUDED_YEARS:
            continue
        records.append({
            "county": row["county"].strip(),
            "district": district,
            "school": row["school"].strip(),
            "year": year,
            "trials": trials,
            "successes": successes,
        })

    dcsmc_logger.info(f"Loaded {len(records)} record(s) from {path.name} ({len(frame) - len(records)} excluded)")
    return records


def load_observation_grid(path, M=None):
    """Observation grid as a flat row-major array; checks it is M x M when M is given."""
    grid = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if M is not None and grid.shape != (M, M):
        raise ConfigError(f"observation grid {path} is {grid.shape[0]}x{grid.shape[1]}, expected {M}x{M}")
    return grid.reshape(-1)


def write_results(frame, summary, out_dir, csv_name, json_name):
    """Write the per-replicate table and the JSON summary; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / csv_name
    json_path = out_dir / json_name
    frame.to_csv(csv_path, index=False)
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return csv_path, json_path
