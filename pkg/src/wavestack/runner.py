"""Seeded batch execution and result emission."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .experiments import EXPERIMENTS, SeedResult

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ExperimentError(RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"seed {seed}: {type(cause).__name__}: {cause}")
        self.seed = seed


@dataclass
class ResultRecord:
    kind: str
    config_hash: str
    seeds: list
    per_seed: dict
    aggregate: dict
    artifacts: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    tool_version: str = __version__
    timestamp: str = ""

    @property
    def ok(self):
        return not self.failures

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "kind": self.kind,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "per_seed": {str(s): m for s, m in self.per_seed.items()},
            "aggregate": self.aggregate,
            "failures": {str(s): msg for s, msg in self.failures.items()},
            "artifacts": self.artifacts,
            "timestamp": self.timestamp,
        }


def _run_one(args):
    cfg, seed = args
    try:
        return EXPERIMENTS[cfg.kind](cfg, seed), None
    except Exception as exc:  # reported per seed, the batch goes on
        logger.exception("seed %s failed", seed)
        return None, f"{type(exc).__name__}: {exc}"


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


def aggregate(per_seed: dict) -> dict:
    """Mean and population std over seeds, elementwise for list metrics."""
    out = {}
    if not per_seed:
        return out
    keys = list(next(iter(per_seed.values())))
    for key in keys:
        vals = [per_seed[s].get(key) for s in sorted(per_seed)]
        try:
            arr = np.array(vals, dtype=float)
        except (TypeError, ValueError):
            continue
        if arr.ndim > 2:
            continue
        out[key] = {"mean": _jsonable(arr.mean(axis=0).tolist()),
                    "std": _jsonable(arr.std(axis=0).tolist())}
    return out


def run(config: ExperimentConfig, parallelism: int = 1, out_dir=None) -> ResultRecord:
    """Run every seed of ``config`` and, if ``out_dir`` is given, write the artifacts."""
    seeds = sorted(set(int(s) for s in config.seeds))
    jobs = [(config, s) for s in seeds]
    if parallelism > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(seeds))) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    results, failures = {}, {}
    for s, (res, err) in zip(seeds, outcomes):
        if err is None:
            results[s] = res
        else:
            failures[s] = err
    per_seed = {s: {k: _jsonable(v) for k, v in r.metrics.items()} for s, r in results.items()}
    record = ResultRecord(config.kind, config.hash(), seeds, per_seed, aggregate(per_seed),
                          failures=failures,
                          timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    if out_dir is not None:
        write_outputs(record, results, config, out_dir)
    return record


def write_outputs(record: ResultRecord, results: dict, config: ExperimentConfig, out_dir):
    os.makedirs(os.path.join(out_dir, "matrices"), exist_ok=True)
    artifacts = ["config.effective.txt", "trace.csv"]
    with open(os.path.join(out_dir, "config.effective.txt"), "w") as fh:
        fh.write(config.to_text())
    with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "series", "iteration", "loss", "best_loss", "rate"])
        for s in sorted(results):
            for name, trace in results[s].traces.items():
                for i, (l, b, r) in enumerate(zip(trace.loss, trace.best, trace.rate)):
                    w.writerow([s, name, i, repr(l), repr(b), repr(r)])
    for s in sorted(results):
        for name, M in results[s].matrices.items():
            rel = f"matrices/{name}_seed{s}.csv"
            np.savetxt(os.path.join(out_dir, rel), np.atleast_2d(np.real_if_close(M)),
                       delimiter=",", fmt="%.17g")
            artifacts.append(rel)
    artifacts.append("report.json")
    record.artifacts = artifacts
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(record.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def seed_result_or_raise(config: ExperimentConfig, seed: int) -> SeedResult:
    """Run one seed, wrapping failures with the seed number."""
    try:
        return EXPERIMENTS[config.kind](config, seed)
    except Exception as exc:
        raise ExperimentError(seed, exc) from exc
