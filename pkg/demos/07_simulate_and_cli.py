"""Scenario simulation plus the end-to-end CLI pipeline.

Generates a synthetic dataset from a scenario file, then drives the same
commands a user would run: ingest -> fit -> plot, all inside a temp directory.
"""

import subprocess
import sys
import tempfile
from pathlib import Path

from supplyshare import SimScenario, simulate_dataset

scenario = SimScenario(n_countries=2, provinces_per_country=2, n_methods=2,
                       n_surveys=3, rho=0.4, sigma_delta=0.2, seed=123)
dataset, truth_state, phi = simulate_dataset(scenario)
print(f"simulated {len(dataset.observations)} rows over {dataset.populations()}")
print("true composition at the first grid year, first population:",
      [round(v, 3) for v in phi[0, 0, 0]])


def run(*args):
    cmd = [sys.executable, "-m", "supplyshare.cli", *args]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(f"$ supplyshare {' '.join(args)}")
    print(proc.stdout.strip())
    if proc.returncode != 0:
        print(proc.stderr.strip())
        raise SystemExit(proc.returncode)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    run("simulate", "--seed", "123", "--output", str(tmp / "sim"))
    run("ingest", "--input", str(tmp / "sim" / "survey.csv"),
        "--geography", str(tmp / "sim" / "geography.csv"),
        "--output", str(tmp / "ingested"))
    run("fit", "--data", str(tmp / "ingested"), "--output", str(tmp / "run"),
        "--start", "2000", "--end", "2020", "--segments", "4",
        "--iter", "1200", "--burnin", "400", "--thin", "4",
        "--seed", "5", "--monitor", "alpha_cms")
    run("plot", "--run", str(tmp / "run"))
    figures = sorted((tmp / "run" / "figures").glob("*.svg"))
    print(f"{len(figures)} figures written")
