"""Experiment manifests and the desk-scale suite runner."""

from __future__ import annotations

import configparser
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import cli
from .errors import ConfigError
from .io import read_kv
from .validate import ValidationEntry, ValidationReport

log = logging.getLogger(__name__)

RUNTIME_BUDGET = 900.0
OUTPUT_FILES = ("m.csv", "b.csv", "u.ckpt")


@dataclass
class Experiment:
    name: str
    config: Path
    seed: int = 0
    paths: int = 100_000
    expect: tuple = ()


@dataclass
class Criterion:
    number: int
    title: str
    experiment: str
    source: str
    keys: tuple
    test: str


@dataclass
class ExperimentManifest:
    path: Path
    experiments: dict = field(default_factory=dict)
    criteria: list = field(default_factory=list)
    runtime_budget: float = RUNTIME_BUDGET
    recorded_runtimes: dict = field(default_factory=dict)
    output_hashes: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            if not cp.read(path):
                raise ConfigError(f"cannot read manifest {path}")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: duplicate or malformed entry: {exc}") from exc
        man = cls(path)
        for sect in cp.sections():
            s = cp[sect]
            kind, _, name = sect.partition(" ")
            if kind == "suite":
                man.runtime_budget = s.getfloat("runtime_budget_seconds", RUNTIME_BUDGET)
            elif kind == "experiment":
                cfg = path.parent / s["config"]
                if not cfg.exists():
                    raise ConfigError(f"{path}: experiment {name!r} references missing config {cfg}")
                man.experiments[name] = Experiment(
                    name, cfg, s.getint("seed", 0), s.getint("paths", 100_000),
                    tuple(k.strip() for k in s.get("expect", "").split(",") if k.strip()),
                )
                if "runtime_seconds" in s:
                    man.recorded_runtimes[name] = s.getfloat("runtime_seconds")
                if "output_hash" in s:
                    man.output_hashes[name] = s["output_hash"]
            elif kind == "criterion":
                keys = tuple(k.strip() for k in s.get("key", "").split(",") if k.strip())
                man.criteria.append(Criterion(int(name), s.get("title", ""), s.get("experiment", ""),
                                              s.get("source", "pytest"), keys, s.get("test", "")))
            else:
                raise ConfigError(f"{path}: unknown manifest section [{sect}]")
        nums = [c.number for c in man.criteria]
        if len(nums) != len(set(nums)):
            raise ConfigError(f"{path}: duplicate criterion entries")
        for c in man.criteria:
            if c.source not in ("validation", "summary", "pytest"):
                raise ConfigError(f"{path}: criterion {c.number} has unknown source {c.source!r}")
            if c.source != "pytest" and not c.keys:
                raise ConfigError(f"{path}: criterion {c.number} needs a key")
            if c.source != "pytest" and c.experiment not in man.experiments:
                raise ConfigError(f"{path}: criterion {c.number} references unknown experiment {c.experiment!r}")
        return man


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def output_hash(out: Path) -> str:
    """Hash over the blob hashes of the solution outputs, in a fixed order."""
    parts = "".join(f"{name} {git_blob_hash((out / name).read_bytes())}\n" for name in OUTPUT_FILES)
    return git_blob_hash(parts.encode())


def run_suite(manifest, work_dir) -> ValidationReport:
    """Solve and validate each experiment, then map results onto the criteria."""
    man = manifest if isinstance(manifest, ExperimentManifest) else ExperimentManifest.load(manifest)
    work = Path(work_dir)
    rep = ValidationReport()
    if not man.experiments and not man.criteria:
        log.warning("empty manifest %s: nothing to run", man.path)
        return rep
    results, total = {}, 0.0
    for exp in man.experiments.values():
        out = work / exp.name
        t0 = time.perf_counter()
        rc_solve = cli.main(["solve", "--config", str(exp.config), "--out", str(out), "--log", "error"])
        rc_val = None
        if rc_solve == cli.EXIT_OK:
            rc_val = cli.main(["validate", "--config", str(exp.config), "--out", str(out), "--seed",
                               str(exp.seed), "--paths", str(exp.paths), "--log", "error"])
        dt = time.perf_counter() - t0
        total += dt
        val = read_kv(out / "validation.txt") if (out / "validation.txt").exists() else {}
        summ = read_kv(out / "summary.txt") if (out / "summary.txt").exists() else {}
        results[exp.name] = (val, summ)
        meta = {"runtime_seconds": dt, "solve_exit": rc_solve, "validate_exit": rc_val}
        if rc_solve == cli.EXIT_OK:
            meta["output_hash"] = output_hash(out)
        rep.add(ValidationEntry(f"{exp.name}.exit", float(rc_val if rc_val is not None else rc_solve), 0.0,
                                rc_solve == 0 and rc_val == 0, "DERIVED", meta))
        for key in exp.expect:
            ok = val.get(f"{key}.passed") == "true"
            v = float(val.get(f"{key}.value", "nan"))
            tol = float(val.get(f"{key}.tolerance", "nan"))
            rep.add(ValidationEntry(f"{exp.name}.{key}", v, tol, ok, val.get(f"{key}.provenance", "DERIVED")))
    for c in man.criteria:
        if c.source == "pytest":
            continue
        val, summ = results.get(c.experiment, ({}, {}))
        if c.source == "validation":
            ok = bool(c.keys) and all(val.get(f"{k}.passed") == "true" for k in c.keys)
        else:
            ok = bool(c.keys) and all(summ.get(k) == "true" for k in c.keys)
        rep.add(ValidationEntry(f"criterion_{c.number:02d}", float(ok), 1.0, ok, "DERIVED",
                                {"title": c.title, "experiment": c.experiment, "keys": list(c.keys)}))
    rep.add(ValidationEntry("suite_runtime_seconds", total, man.runtime_budget, total <= man.runtime_budget,
                            "INFO", {"soft": True}))
    return rep
