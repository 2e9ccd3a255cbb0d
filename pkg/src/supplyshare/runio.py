"""Run-directory persistence: draw matrices, diagnostics, manifests.

A run directory is the unit analysts exchange: canonical dataset, geography,
settings, draws (one .npy per chain and parameter, so files are hash-stable),
diagnostics, estimates, and a manifest recording digests of everything.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .sampler import ChainOutput, DiagnosticRow

MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()


def package_versions() -> dict[str, str]:
    import matplotlib
    import pandas
    import scipy

    from . import __version__

    return {
        "supplyshare": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_manifest(
    run_dir, command: str, seed: int, config: dict, inputs: dict, outputs: list
) -> Path:
    """Record the run: config hash, input digests, output digests, versions."""
    run_dir = Path(run_dir)
    manifest = {
        "schema": 1,
        "command": command,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "versions": package_versions(),
        "inputs": {
            name: {"path": str(path), "sha256": sha256_file(path)}
            for name, path in inputs.items()
        },
        "outputs": {
            str(Path(p).relative_to(run_dir)): sha256_file(p) for p in outputs
        },
    }
    path = run_dir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ConfigError(f"no manifest in {run_dir}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_draws(run_dir, output: ChainOutput) -> list[Path]:
    """Write per-chain draw matrices plus their own manifest."""
    draws_dir = Path(run_dir) / "draws"
    draws_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, arr in sorted(output.draws.items()):
        for chain in range(output.n_chains):
            path = draws_dir / f"chain{chain}_{name}.npy"
            np.save(path, arr[chain])
            written.append(path)
    meta = {
        "parameters": {
            name: list(arr.shape[2:]) for name, arr in sorted(output.draws.items())
        },
        "n_chains": output.n_chains,
        "n_keep": output.n_keep,
        "seed": output.config.seed,
        "config_hash": config_hash(asdict(output.config)),
    }
    meta_path = draws_dir / "manifest.json"
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(meta_path)
    return written


def load_draws(run_dir) -> dict[str, np.ndarray]:
    """Load draw arrays back as {parameter: (n_chains, n_keep, ...)}."""
    draws_dir = Path(run_dir) / "draws"
    meta_path = draws_dir / "manifest.json"
    if not meta_path.exists():
        raise ConfigError(f"no draws manifest in {draws_dir}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    out = {}
    for name in meta["parameters"]:
        chains = [
            np.load(draws_dir / f"chain{c}_{name}.npy") for c in range(meta["n_chains"])
        ]
        out[name] = np.stack(chains)
    return out


def write_diagnostics_csv(rows: list[DiagnosticRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "rhat", "ess", "acceptance"])
        for row in rows:
            writer.writerow(
                [row.parameter, repr(row.rhat), repr(row.ess), repr(row.acceptance)]
            )
