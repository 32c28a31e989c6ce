"""Configuration files, binary snapshots, CSV tables and run manifests."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kinetic import InitialKineticData, ParticleEnsemble
from .solver import CFL_LIMIT, FluidProfile, SimConfig, initial_velocity
from .spectral import SpectralField, TorusGrid, pointwise_magnitude

CODE_VERSION = "0.1.0"


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

REQUIRED = object()


def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _int(text):
    return int(text)


SCHEMA = {
    "run": {
        "grid_points": (_int, REQUIRED),
        "box_length": (float, 2 * math.pi),
        "particles": (_int, 0),
        "final_time": (float, REQUIRED),
        "dt": (float, None),
        "seed": (_int, 0),
        "snapshot_every": (_int, 0),
    },
    "fluid": {
        "profile": (str, "zero"),
        "amplitude": (float, 0.0),
        "mode": (_int, 1),
        "kmax": (float, 4.0),
        "slope": (float, 2.0),
        "seed": (_int, 0),
    },
    "kinetic": {
        "mass": (float, 1.0),
        "spatial": (str, "uniform"),
        "amplitude": (float, 0.0),
        "mode": (_ints, (1, 0, 0)),
        "velocity": (str, "maxwellian"),
        "sigma": (float, 1.0),
        "drift": (_floats, (0.0, 0.0, 0.0)),
        "kappa": (float, 6.0),
        "q_decay": (float, 6.0),
        "v_cut": (float, None),
    },
    "twin": {
        "perturbation": (str, "fluid"),
        "deltas": (_floats, (0.0, 1e-4, 1e-3, 1e-2, 1e-1)),
        "w1_every": (_int, 0),
        "w1_particles": (_int, 4096),
        "w1_exact_particles": (_int, 0),
        "snapshot_every": (_int, 0),
    },
    "mild": {
        "p": (float, 6.0),
        "time_steps": (_int, 32),
        "amplitude_fraction": (float, 0.1),
        "max_iter": (_int, 50),
        "tol": (float, 1e-8),
    },
}

DEFAULTS_DOC = {sec: {k: (None if d is REQUIRED else d) for k, (_, d) in keys.items()}
                for sec, keys in SCHEMA.items()}


@dataclass
class RunSpec:
    """Everything a configuration file describes."""

    sim: SimConfig
    twin: dict | None
    mild: dict | None
    canonical: str
    dt_from_heuristic: bool = False

    @property
    def config_hash(self):
        return hashlib.sha256(self.canonical.encode()).hexdigest()


def _parser():
    return configparser.ConfigParser(strict=True, interpolation=None,
                                     inline_comment_prefixes=("#", ";"), empty_lines_in_values=False)


def _read_sections(text):
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"line {exc.lineno}: duplicate section [{exc.section}]") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        values = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            conv = SCHEMA[sec][key][0]
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}") from exc
        out[sec] = values
    return out


def _with_defaults(sections, sec):
    given = sections.get(sec, {})
    vals = {}
    for key, (_, default) in SCHEMA[sec].items():
        if key in given:
            vals[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {key!r} in [{sec}]")
        else:
            vals[key] = default
    return vals


def _canonical(sections):
    lines = []
    for sec in sorted(sections):
        lines.append(f"[{sec}]")
        for key in sorted(sections[sec]):
            val = sections[sec][key]
            if val is None:  # unset optional keys keep their default on reload
                continue
            if isinstance(val, tuple):
                val = " ".join(repr(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def cfl_timestep(fluid, grid, T, kinetic=None):
    """Time step from the CFL heuristic: a quarter cell per step at the
    larger of the initial fluid speed and the particle speed scale, capped at
    1e-2 and at T/10, then shortened so that it divides T."""
    u = initial_velocity(fluid, grid)
    speed = float(np.max(pointwise_magnitude(u.values)))
    if kinetic is not None:
        speed = max(speed, float(np.linalg.norm(kinetic.drift)) + 3 * kinetic.sigma)
    dt = 0.5 * CFL_LIMIT * grid.spacing / max(speed, 1e-12)
    dt = min(dt, 1e-2, T / 10)
    steps = math.ceil(T / dt - 1e-9)
    return T / steps


def parse_config(text, overrides=None):
    """Parse and validate a configuration; returns a RunSpec.

    ``overrides`` maps section -> {key: value} and is applied before
    validation (used for command-line flags such as --seed).
    """
    sections = _read_sections(text)
    for sec, vals in (overrides or {}).items():
        sections.setdefault(sec, {}).update(vals)
    if "run" not in sections:
        raise ConfigError("missing section [run]")
    run = _with_defaults(sections, "run")
    fl = _with_defaults(sections, "fluid")
    n = run["grid_points"]
    if n < 4 or n & (n - 1):
        raise ConfigError(f"grid_points must be a power of two, got {n}")
    if not run["final_time"] > 0:
        raise ConfigError("final_time must be positive")
    if run["particles"] < 0 or run["snapshot_every"] < 0:
        raise ConfigError("particles and snapshot_every must be nonnegative")
    if not run["box_length"] > 0:
        raise ConfigError("box_length must be positive")
    try:
        fluid = FluidProfile(fl["profile"], fl["amplitude"], fl["mode"], fl["kmax"], fl["slope"], fl["seed"])
        kinetic = None
        if "kinetic" in sections:
            kn = _with_defaults(sections, "kinetic")
            if len(kn["mode"]) != 3 or len(kn["drift"]) != 3:
                raise ConfigError("kinetic mode and drift need three entries")
            kinetic = InitialKineticData(kn["mass"], run["box_length"], kn["spatial"], kn["amplitude"],
                                         kn["mode"], kn["velocity"], kn["sigma"], kn["drift"],
                                         kn["kappa"], kn["q_decay"], kn["v_cut"])
        if kinetic is None and run["particles"] > 0:
            raise ConfigError("particles requested without a [kinetic] section")
        grid = TorusGrid(n, run["box_length"], 3)
        heuristic = run["dt"] is None
        dt = cfl_timestep(fluid, grid, run["final_time"], kinetic) if heuristic else run["dt"]
        if not dt > 0:
            raise ConfigError("dt must be positive")
        sim = SimConfig(n, run["box_length"], run["particles"], dt, run["final_time"], fluid, kinetic,
                        run["seed"], run["snapshot_every"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    twin = _with_defaults(sections, "twin") if "twin" in sections else None
    if twin is not None:
        if twin["perturbation"] not in ("fluid", "kinetic"):
            raise ConfigError("twin perturbation must be 'fluid' or 'kinetic'")
        if twin["perturbation"] == "kinetic" and kinetic is None:
            raise ConfigError("kinetic twin perturbation needs a [kinetic] section")
    mild = _with_defaults(sections, "mild") if "mild" in sections else None
    if mild is not None and not 3 < mild["p"] < math.inf:
        raise ConfigError("mild p must lie in (3, inf)")
    resolved = {sec: _with_defaults(sections, sec) for sec in sections}
    resolved["run"]["dt"] = dt
    return RunSpec(sim, twin, mild, _canonical(resolved), heuristic)


def load_config(path):
    return parse_config(Path(path).read_text())


# -- binary snapshots ---------------------------------------------------------------

FIELD_MAGIC = b"VNSF"
PARTICLE_MAGIC = b"VNSP"
FORMAT_VERSION = 1
_FIELD_HEAD = struct.Struct("<4sIIIIdB")
_PART_HEAD = struct.Struct("<4sIQddd")


def write_field(path, u):
    g = u.grid
    head = _FIELD_HEAD.pack(FIELD_MAGIC, FORMAT_VERSION, g.n, g.dim, u.components, g.L, int(u.solenoidal))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(u.modes, dtype="<c16").tobytes())
    return Path(path)


def read_field(path):
    data = Path(path).read_bytes()
    if len(data) < _FIELD_HEAD.size:
        raise FormatError("truncated field file")
    magic, version, n, dim, comps, L, sol = _FIELD_HEAD.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported field format version {version}")
    grid = TorusGrid(n, L, dim)
    shape = (comps,) + grid.shape
    body = np.frombuffer(data, dtype="<c16", offset=_FIELD_HEAD.size)
    if body.size != math.prod(shape):
        raise FormatError("field payload size does not match its header")
    return SpectralField(grid, body.reshape(shape).astype(complex), bool(sol))


def write_particles(path, ens):
    head = _PART_HEAD.pack(PARTICLE_MAGIC, FORMAT_VERSION, len(ens), ens.time, ens.L, ens.tail_mass)
    with open(path, "wb") as fh:
        fh.write(head)
        for arr, dt in ((ens.x, "<f8"), (ens.v, "<f8"), (ens.w, "<f8"), (ens.ids, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return Path(path)


def read_particles(path):
    data = Path(path).read_bytes()
    if len(data) < _PART_HEAD.size:
        raise FormatError("truncated particle file")
    magic, version, count, t, L, tail = _PART_HEAD.unpack_from(data)
    if magic != PARTICLE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PARTICLE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported particle format version {version}")
    if len(data) != _PART_HEAD.size + count * 8 * 8:
        raise FormatError("particle payload size does not match its header")
    off = _PART_HEAD.size
    x = np.frombuffer(data, "<f8", 3 * count, off).reshape(count, 3).copy()
    off += 24 * count
    v = np.frombuffer(data, "<f8", 3 * count, off).reshape(count, 3).copy()
    off += 24 * count
    w = np.frombuffer(data, "<f8", count, off).copy()
    off += 8 * count
    ids = np.frombuffer(data, "<i8", count, off).copy()
    return ParticleEnsemble(x, v, w, ids, t, L, tail)


# -- CSV tables -----------------------------------------------------------------------

CSV_VERSION = 1


def write_table(path, columns, kind):
    """Write equal-length columns with a version header; floats use repr so
    that reloading is exact."""
    names = list(columns)
    data = [np.asarray(columns[k]) for k in names]
    lengths = {len(d) for d in data}
    if len(lengths) > 1:
        raise ValueError("columns differ in length")
    with open(path, "w", newline="") as fh:
        fh.write(f"# vnslab {kind} v{CSV_VERSION}\n")
        wr = csv.writer(fh)
        wr.writerow(names)
        for row in zip(*data):
            wr.writerow([repr(float(x)) if np.issubdtype(type(x), np.floating) or isinstance(x, float)
                         else str(x) for x in row])
    return Path(path)


def read_table(path, kind=None):
    """Read a table written by write_table; returns (kind, dict of float arrays)."""
    with open(path, newline="") as fh:
        parts = fh.readline().split()
        if len(parts) != 4 or parts[:2] != ["#", "vnslab"]:
            raise FormatError(f"{path}: missing vnslab table header")
        if parts[3] != f"v{CSV_VERSION}":
            raise FormatError(f"{path}: unsupported table version {parts[3]}")
        if kind is not None and parts[2] != kind:
            raise FormatError(f"{path}: expected a {kind} table, found {parts[2]}")
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
    return parts[2], cols


def write_ledger(path, ledger):
    from .solver import LEDGER_COLUMNS
    rows = list(ledger.rows())
    cols = {name: [r[i] for r in rows] for i, name in enumerate(LEDGER_COLUMNS)}
    return write_table(path, cols, "ledger")


def read_ledger(path):
    return read_table(path, "ledger")[1]


# -- manifests ----------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    seed: int
    code_version: str
    grid_points: int
    particles: int
    command: str
    outputs: list = field(default_factory=list)
    threads: int = 1
    started: float = 0.0
    finished: float = 0.0
    config_text: str = ""

    @property
    def wall_seconds(self):
        return self.finished - self.started

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def new_manifest(spec, command, threads=1):
    return RunManifest(spec.config_hash, spec.sim.seed, CODE_VERSION, spec.sim.n, spec.sim.n_particles,
                       command, threads=threads, started=time.time(), config_text=spec.canonical)
