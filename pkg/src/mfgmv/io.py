"""Configuration parsing, checkpoints, CSV curves and solution directories."""

from __future__ import annotations

import configparser
import hashlib
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boundary import BoundaryCurve
from .errors import CheckpointError, ConfigError, MFGError
from .fixedpoint import EpsilonRecord, EquilibriumSolution, FixedPointConfig, Problem, k_membership
from .model import InitialDistribution, MarketModel, MeanFieldCurve, Preferences, derive_market
from .mollify import MollifierKernel
from .pde import PdeSolution, SchemeOptions, SpaceTimeGrid, check_solution_invariants, make_grid

MAGIC = b"MFGMV1"
FLOAT_FMT = "%.17g"


def _floats(text):
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _matrix(text):
    rows = [r for r in text.split(";") if r.strip()]
    return tuple(tuple(float(v) for v in r.split(",") if v.strip()) for r in rows)


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return "; ".join(", ".join(repr(x) for x in row) for row in v)
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v)


# section -> key -> (parser, default); a default of ... marks a required key
SCHEMA = {
    "market": {
        "T": (float, 1.0),
        "r": (float, ...),
        "mu": (_floats, ...),
        "sigma": (_matrix, ...),
        "n_time": (int, 401),
        "curve_file": (str, ""),
    },
    "preferences": {"gamma1": (float, ...), "gamma2": (float, ...)},
    "initial": {
        "kind": (str, "uniform"),
        "lo": (float, 0.5),
        "hi": (float, 1.5),
        "loc": (float, 1.0),
        "scale": (float, 0.25),
        "edges": (_floats, ()),
        "weights": (_floats, ()),
    },
    "grid": {"nt": (int, 401), "nx": (int, 601), "margin_factor": (float, 1.0)},
    "scheme": {"theta": (float, 1.0), "advection": (str, "central")},
    "mollifier": {"kind": (str, "quartic-polynomial"), "schedule": (_floats, ()), "floor": (float, 0.0)},
    "fixedpoint": {
        "damping": (float, 0.5),
        "tol": (float, 0.0),
        "max_iters": (int, 200),
        "engine": (str, "density"),
        "paths": (int, 20000),
        "seed": (int, 12345),
    },
    "output": {"dir": (str, "out"), "log_level": (str, "info")},
}


def _line_index(text):
    """(section, key) -> 1-based line number, plus section header lines."""
    idx, sect = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        mh = re.match(r"\[(.+)\]$", s)
        if mh:
            sect = mh.group(1).strip()
            idx.setdefault((sect, None), n)
            continue
        mk = re.match(r"([^=:]+)[=:]", s)
        if mk and sect is not None:
            idx.setdefault((sect, mk.group(1).strip()), n)
    return idx


@dataclass
class EngineConfig:
    values: dict
    source: str = "<string>"
    base_dir: Path = Path(".")

    @classmethod
    def parse(cls, text: str, source: str = "<string>", base_dir=".") -> "EngineConfig":
        lines = _line_index(text)
        cp = configparser.ConfigParser(interpolation=None, strict=True)
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        values = {}
        for sect in cp.sections():
            if sect not in SCHEMA:
                raise ConfigError(f"{source}:{lines.get((sect, None), '?')}: unknown section [{sect}]")
        for sect, keys in SCHEMA.items():
            values[sect] = {}
            given = cp[sect] if cp.has_section(sect) else {}
            for key in given:
                if key not in keys:
                    raise ConfigError(f"{source}:{lines.get((sect, key), '?')}: unknown key {key!r} in [{sect}]")
            for key, (conv, default) in keys.items():
                if key in given:
                    try:
                        values[sect][key] = conv(given[key])
                    except ValueError as exc:
                        raise ConfigError(
                            f"{source}:{lines.get((sect, key), '?')}: bad value for {sect}.{key}: {exc}"
                        ) from exc
                elif default is ...:
                    if sect == "market" and "curve_file" in given:
                        continue
                    raise ConfigError(f"{source}:{lines.get((sect, None), '?')}: missing key {sect}.{key}")
                else:
                    values[sect][key] = default
        return cls(values, source, Path(base_dir))

    @classmethod
    def load(cls, path) -> "EngineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path), path.parent)

    def dump(self) -> str:
        out = []
        for sect, keys in SCHEMA.items():
            out.append(f"[{sect}]")
            for key in keys:
                if key in self.values[sect]:
                    out.append(f"{key} = {_fmt_value(self.values[sect][key])}")
            out.append("")
        return "\n".join(out)

    def __getitem__(self, sect):
        return self.values[sect]

    def _wrap(self, fn, what):
        try:
            return fn()
        except ConfigError:
            raise
        except MFGError as exc:
            exc.args = (f"{self.source}: invalid {what}: {exc}",)
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.source}: invalid {what}: {exc}") from exc

    def market_model(self) -> MarketModel:
        mk = self["market"]
        if mk.get("curve_file"):
            return self._wrap(lambda: _load_curves(self.base_dir / mk["curve_file"], mk["T"]), "[market]")
        return self._wrap(
            lambda: MarketModel.constant(mk["T"], mk["r"], mk["mu"], np.array(mk["sigma"]), mk["n_time"]),
            "[market]",
        )

    def preferences(self) -> Preferences:
        p = self["preferences"]
        return self._wrap(lambda: Preferences(p["gamma1"], p["gamma2"]), "[preferences]")

    def initial(self) -> InitialDistribution:
        return self._wrap(lambda: InitialDistribution(**self["initial"]), "[initial]")

    def scheme(self) -> SchemeOptions:
        return self._wrap(lambda: SchemeOptions(**self["scheme"]), "[scheme]")

    def fixed_point(self, epsilon_floor: float | None = None) -> FixedPointConfig:
        f, mo = self["fixedpoint"], self["mollifier"]
        floor = epsilon_floor if epsilon_floor is not None else (mo["floor"] or None)
        return self._wrap(lambda: FixedPointConfig(
            damping=f["damping"], tol_fp=f["tol"] or None, max_iters=f["max_iters"],
            epsilon_schedule=mo["schedule"], epsilon_floor=floor, expectation_engine=f["engine"],
            mc_paths=f["paths"], mc_seed=f["seed"], kernel_kind=mo["kind"],
        ), "[fixedpoint]")

    def problem(self) -> Problem:
        dm = self._wrap(lambda: derive_market(self.market_model()), "[market]")
        prefs, xi = self.preferences(), self.initial()
        g = self["grid"]
        grid = self._wrap(lambda: make_grid(dm, prefs, xi, g["nt"], g["nx"], g["margin_factor"]), "[grid]")
        return Problem(dm, prefs, xi, grid, self.scheme())


def _load_curves(path: Path, T: float) -> MarketModel:
    """CSV with header t, r, mu_1..mu_d, sigma_11..sigma_dd on a uniform grid."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n, cols = data.shape
    d = int(round((-(1) + np.sqrt(1 + 4 * (cols - 2))) / 2))
    if 2 + d + d * d != cols:
        raise ValueError(f"{path}: expected 2 + d + d^2 columns, got {cols}")
    if not np.allclose(data[:, 0], np.linspace(0.0, T, n)):
        raise ValueError(f"{path}: time column must be uniform on [0, T]")
    return MarketModel(T, data[:, 1], data[:, 2:2 + d], data[:, 2 + d:].reshape(n, d, d))


# -- CSV ------------------------------------------------------------------

def write_csv(path, header, columns):
    arr = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, arr, delimiter=",", header=",".join(header), comments="", fmt=FLOAT_FMT)


def read_csv(path):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


# -- checkpoints ----------------------------------------------------------

def _sha(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def save_checkpoint(path, sol: PdeSolution):
    """MAGIC, little-endian u64 header length, JSON header, then <f8 row-major arrays."""
    g = sol.grid
    arrays = {"u": sol.u, "ux": sol.ux, "m_t": sol.m_used.t, "m_values": sol.m_used.values}
    header = {
        "grid": {"T": g.T, "nt": g.nt, "x_lo": g.x_lo, "x_hi": g.x_hi, "nx": g.nx},
        "epsilon": sol.epsilon,
        "kernel_kind": sol.kernel_kind,
        "arrays": [{"name": k, "shape": list(np.shape(v)), "sha256": _sha(v)} for k, v in arrays.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> PdeSolution:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", raw, off)
        header = json.loads(raw[off + 8: off + 8 + n])
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += 8 + n
    arrays = {}
    try:
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"]))
            a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(entry["shape"]).astype(float)
            off += 8 * count
            if _sha(a) != entry["sha256"]:
                raise CheckpointError(f"{path}: hash mismatch for array {entry['name']!r}")
            arrays[entry["name"]] = a
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt payload: {exc}") from exc
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    grid = SpaceTimeGrid(**header["grid"])
    u, ux = arrays["u"], arrays["ux"]
    return PdeSolution(grid=grid, u=u, ux=ux, epsilon=header["epsilon"],
                       m_used=MeanFieldCurve(arrays["m_t"], arrays["m_values"]),
                       picard_iters=np.zeros(grid.nt - 1, dtype=int), kernel_kind=header["kernel_kind"],
                       ux_min=float(ux.min()), ux_max=float(ux.max()))


# -- solution directories -------------------------------------------------

def _write_kv(path, items):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items))


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _record_summary(rec: EpsilonRecord):
    items = [("epsilon", FLOAT_FMT % rec.epsilon), ("residual", FLOAT_FMT % rec.residual),
             ("iterations", rec.iterations), ("history", " ".join(FLOAT_FMT % h for h in rec.history)),
             ("runtime_seconds", "%.3f" % rec.runtime), ("invariants_pass", str(rec.invariants.passes).lower())]
    items += [(f"invariant.{k}", str(v).lower()) for k, v in rec.invariants.checks.items()]
    items += [(f"k.{k}", v if not isinstance(v, float) else FLOAT_FMT % v) for k, v in rec.k_report.items()]
    return items


def _write_record(d: Path, rec: EpsilonRecord):
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "m.csv", ["t", "m"], [rec.m.t, rec.m.values])
    b = rec.boundary
    write_csv(d / "b.csv", ["t", "b", "residual"], [b.t, b.b, b.residuals])
    save_checkpoint(d / "u.ckpt", rec.sol)
    _write_kv(d / "summary.txt", _record_summary(rec))


def record_dirname(k: int) -> str:
    return f"eps_{k:02d}"


def save_solution(out: Path, eq: EquilibriumSolution, cfg: EngineConfig | None = None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(eq.records):
        _write_record(out / record_dirname(k), rec)
    if eq.records:
        _write_record(out, eq.final)
    items = [("complete", str(eq.complete).lower()), ("n_records", len(eq.records)),
             ("tol_fp", FLOAT_FMT % eq.tol_fp),
             ("epsilons", " ".join(FLOAT_FMT % r.epsilon for r in eq.records)),
             ("continuation_diffs", " ".join(FLOAT_FMT % v for v in eq.continuation_diffs)),
             ("boundary_diffs", " ".join(FLOAT_FMT % v for v in eq.boundary_diffs)),
             ("cauchy_ok", str(eq.cauchy_ok).lower()), ("boundary_cauchy_ok", str(eq.boundary_cauchy_ok).lower())]
    if eq.records:
        items += [(f"final.{k}", v) for k, v in _record_summary(eq.final)]
    _write_kv(out / "summary.txt", items)
    if cfg is not None:
        (out / "config.ini").write_text(cfg.dump())


def _load_record(d: Path, problem: Problem, kernel_kind: str) -> EpsilonRecord:
    s = read_kv(d / "summary.txt")
    sol = load_checkpoint(d / "u.ckpt")
    _, m = read_csv(d / "m.csv")
    _, b = read_csv(d / "b.csv")
    curve = MeanFieldCurve(m[:, 0], m[:, 1])
    P = problem
    bc = P.bounds(sol.ux_max)
    kernel = MollifierKernel(kernel_kind, sol.epsilon)
    target = P.dm.P0_at(b[:, 0]) * curve(b[:, 0])
    hist = [float(v) for v in s.get("history", "").split()]
    return EpsilonRecord(
        epsilon=sol.epsilon, m=curve, sol=sol, boundary=BoundaryCurve(b[:, 0], b[:, 1], target, b[:, 2]),
        residual=float(s["residual"]), iterations=int(s["iterations"]), history=hist,
        k_report=k_membership(curve, bc, P.xi.mean, m0_tol=P.quadrature_tol()),
        invariants=check_solution_invariants(sol, bc, P.dm, P.prefs, kernel, P.scheme), bounds=bc,
        runtime=float(s.get("runtime_seconds", 0.0)),
    )


def load_solution(out, problem: Problem, kernel_kind: str = "quartic-polynomial") -> EquilibriumSolution:
    out = Path(out)
    if not (out / "summary.txt").exists():
        raise ConfigError(f"{out}: not a solution directory (summary.txt missing)")
    top = read_kv(out / "summary.txt")
    n = int(top["n_records"])
    recs = [_load_record(out / record_dirname(k), problem, kernel_kind) for k in range(n)]
    if recs:
        top_sol = load_checkpoint(out / "u.ckpt")
        if not np.array_equal(top_sol.u, recs[-1].sol.u):
            raise CheckpointError(f"{out}: top-level u.ckpt differs from the final record")
    diffs = [float(v) for v in top.get("continuation_diffs", "").split()]
    bdiffs = [float(v) for v in top.get("boundary_diffs", "").split()]
    return EquilibriumSolution(recs, diffs, bdiffs, float(top["tol_fp"]), top["complete"] == "true")
