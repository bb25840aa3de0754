"""Readers and writers for every artifact the command line produces.

All formats carry ``schema_version``. Numbers are written with 17
significant digits (or raw little-endian float64), so a value read back
is bit-identical to the one written.
"""

from __future__ import annotations

import datetime
import hashlib
import io
import json
import re
import struct
from pathlib import Path

import numpy as np

from .assembly import EventLog, Move, MovePlan, Occupancy, Particle
from .dynamics import CHANNEL_UNITS, Trajectory
from .errors import ConfigError
from .optics import EllipsoidGeometry

SCHEMA_VERSION = 1
MAGIC = b"NTRJ"
BINARY_SUFFIXES = (".ntrj", ".bin")
_UNIT_HEADER = re.compile(r"^\s*([A-Za-z_]\w*)\s*\[([^\]]*)\]\s*$")


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, numpy scalars and arrays unwrapped."""
    return json.dumps(obj, sort_keys=True, indent=1, default=_plain) + "\n"


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return sorted(obj) if isinstance(obj, (set, frozenset)) else list(obj)
    if hasattr(obj, "value"):  # enums
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


# ---------------------------------------------------------------- trajectories

def _columns(traj: Trajectory) -> tuple[list[str], np.ndarray]:
    names = ["t", *traj.channels]
    data = np.column_stack([traj.time, *traj.channels.values()]) if len(traj) else np.empty((0, len(names)))
    return names, data


def trajectory_csv(traj: Trajectory) -> str:
    names, data = _columns(traj)
    buf = io.StringIO()
    buf.write(f"# schema_version: {SCHEMA_VERSION}\n")
    # the sample rate always travels with the data
    metadata = {**traj.metadata, "sample_rate_hz": traj.sample_rate}
    for key, value in sorted(metadata.items()):
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True, default=_plain)}\n")
    buf.write(",".join(f"{n}[{CHANNEL_UNITS.get(n, '')}]" for n in names) + "\n")
    np.savetxt(buf, data, fmt="%.17g", delimiter=",")
    return buf.getvalue()


def trajectory_binary(traj: Trajectory) -> bytes:
    names, data = _columns(traj)
    header = json.dumps({"schema_version": SCHEMA_VERSION, "columns": names,
                         "units": [CHANNEL_UNITS.get(n, "") for n in names],
                         "rows": int(data.shape[0]), "sample_rate_hz": traj.sample_rate,
                         "metadata": traj.metadata}, sort_keys=True, default=_plain).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + data.astype("<f8").tobytes()


def write_trajectory(path, traj: Trajectory) -> Path:
    """CSV, or the binary layout when the suffix is ``.ntrj`` or ``.bin``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix in BINARY_SUFFIXES:
        path.write_bytes(trajectory_binary(traj))
    else:
        path.write_text(trajectory_csv(traj))
    return path


def _check_schema(version, source):
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version!r}")


def _from_table(names, data, metadata, sample_rate, source) -> Trajectory:
    if not names or names[0] != "t":
        raise ConfigError(f"{source}: first column must be t")
    channels = {n: np.ascontiguousarray(data[:, i]) for i, n in enumerate(names) if i}
    return Trajectory(float(sample_rate), channels, metadata)


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        (size,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8:8 + size])
        _check_schema(header.get("schema_version"), path)
        names = header["columns"]
        data = np.frombuffer(raw[8 + size:], dtype="<f8").reshape(header["rows"], len(names))
        return _from_table(names, data.astype(float), header["metadata"], header["sample_rate_hz"], path)

    metadata, version, names, rows = {}, None, None, []
    for lineno, line in enumerate(raw.decode().splitlines(), 1):
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(f"{path}:{lineno}: bad metadata value {value.strip()!r}") from None
            if key.strip() == "schema_version":
                version = parsed
            else:
                metadata[key.strip()] = parsed
        elif names is None:
            names = []
            for cell in line.split(","):
                m = _UNIT_HEADER.match(cell)
                if not m:
                    raise ConfigError(f"{path}:{lineno}: header cell {cell!r} is not name[unit]")
                names.append(m.group(1))
        elif line.strip():
            rows.append(line)
    _check_schema(version, path)
    if names is None:
        raise ConfigError(f"{path}: missing header row")
    data = np.loadtxt(rows, delimiter=",", ndmin=2) if rows else np.empty((0, len(names)))
    if "sample_rate_hz" not in metadata:
        raise ConfigError(f"{path}: metadata lacks sample_rate_hz")
    return _from_table(names, data, metadata, metadata["sample_rate_hz"], path)


# ---------------------------------------------------------------- occupancy patterns

GRID_MARKS = {".": 0, "o": 1, "D": 1, "P": 2}


def grid_text(occ_or_rows, seed=None) -> str:
    rows = occ_or_rows.as_grid() if isinstance(occ_or_rows, Occupancy) else list(occ_or_rows)
    head = f"# schema_version: {SCHEMA_VERSION}\n" + (f"# seed: {seed}\n" if seed is not None else "")
    return head + "\n".join(rows) + "\n"


def sites_grid(sites, rows: int, cols: int) -> list[str]:
    sites = set(map(tuple, sites))
    return ["".join("o" if (r, c) in sites else "." for c in range(cols)) for r in range(rows)]


def coordinates_text(sites, rows: int, cols: int, seed=None) -> str:
    lines = [f"# schema_version: {SCHEMA_VERSION}", f"# shape: {rows} {cols}"]
    lines += [f"# seed: {seed}"] if seed is not None else []
    lines += [f"{r} {c}" for r, c in sorted(map(tuple, sites))]
    return "\n".join(lines) + "\n"


def parse_pattern(text: str, source: str = "<pattern>") -> tuple[int, int, list[str]]:
    """Read a grid or coordinate-list pattern into ``(rows, cols, grid rows)``.

    Grid lines use ``.`` empty, ``o`` occupied, ``D`` dumbbell and ``P``
    two particles. Coordinate lists give one ``row col`` pair per line
    after a ``# shape: rows cols`` comment.
    """
    shape, grid, coords = None, [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            key, _, value = stripped[1:].partition(":")
            key = key.strip()
            if key == "schema_version":
                if value.strip() != str(SCHEMA_VERSION):
                    raise ConfigError(f"{source}:{lineno}: unsupported schema_version {value.strip()}")
            elif key == "shape":
                try:
                    shape = tuple(int(v) for v in value.replace(",", " ").split())
                    assert len(shape) == 2
                except (ValueError, AssertionError):
                    raise ConfigError(f"{source}:{lineno}: shape needs two integers") from None
            continue
        if re.fullmatch(r"-?\d+[\s,]+-?\d+", stripped):
            r, c = (int(v) for v in re.split(r"[\s,]+", stripped))
            coords.append((r, c, lineno))
            continue
        bad = next((i for i, ch in enumerate(stripped) if ch not in GRID_MARKS), None)
        if bad is not None:
            raise ConfigError(f"{source}:{lineno}:{line.index(stripped) + bad + 1}: "
                              f"unexpected character {stripped[bad]!r}")
        grid.append(stripped)
    if grid and coords:
        raise ConfigError(f"{source}: mixes grid rows and coordinates")
    if coords:
        if shape is None:
            raise ConfigError(f"{source}: coordinate list needs a '# shape: rows cols' line")
        rows, cols = shape
        for r, c, lineno in coords:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ConfigError(f"{source}:{lineno}: site ({r}, {c}) outside {rows}x{cols}")
        return rows, cols, sites_grid([(r, c) for r, c, _ in coords], rows, cols)
    if not grid:
        raise ConfigError(f"{source}: empty pattern")
    if len({len(g) for g in grid}) != 1:
        raise ConfigError(f"{source}: grid rows differ in length")
    if shape is not None and shape != (len(grid), len(grid[0])):
        raise ConfigError(f"{source}: declared shape {shape} does not match the grid")
    return len(grid), len(grid[0]), grid


def read_pattern(path) -> tuple[int, int, list[str]]:
    path = Path(path)
    try:
        return parse_pattern(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def pattern_sites(grid: list[str]) -> frozenset:
    return frozenset((r, c) for r, row in enumerate(grid) for c, ch in enumerate(row) if ch != ".")


def occupancy_from_grid(grid: list[str], radius: float, pitch_x: float = 1.77e-6,
                        pitch_y: float = 2.66e-6) -> Occupancy:
    """Populate an occupancy: ``o`` one sphere, ``D`` one dumbbell, ``P`` two spheres."""
    occ = Occupancy(len(grid), len(grid[0]), pitch_x, pitch_y)
    for r, row in enumerate(grid):
        for c, ch in enumerate(row):
            if ch == "D":
                occ.add((r, c), EllipsoidGeometry.dumbbell(radius))
            else:
                for _ in range(GRID_MARKS[ch]):
                    occ.add((r, c), EllipsoidGeometry.sphere(radius))
    return occ


def geometry_dict(g: EllipsoidGeometry) -> dict:
    return {"shape": g.shape, "r1": g.r1, "r2": g.r2, "r3": g.r3}


def particles_table(occ: Occupancy) -> list[dict]:
    out = []
    for site in occ.occupied():
        for pid in occ.contents(site):
            p: Particle = occ.particles[pid]
            out.append({"id": pid, "site": list(site), "charge_c": p.charge,
                        "verdict": p.verdict, **geometry_dict(p.geometry)})
    return out


# ---------------------------------------------------------------- plans and events

def plan_document(plan: MovePlan, current: Occupancy | None = None, seed=None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "seed": seed, "cost_m": plan.cost,
           "path_length_m": plan.path_length, "version": plan.version,
           "fingerprint": plan.fingerprint, "exclusion_radius_m": plan.exclusion_radius,
           "target": sorted(list(s) for s in plan.target),
           "moves": [{"source": list(m.source),
                      "destination": None if m.discard else list(m.destination),
                      "path_m": [list(p) for p in m.path]} for m in plan.moves]}
    if current is not None:
        doc["shape"] = [current.rows, current.cols]
        doc["current"] = current.as_grid()
    return doc


def plan_from_document(doc: dict, source: str = "<plan>") -> MovePlan:
    _check_schema(doc.get("schema_version"), source)
    try:
        moves = tuple(Move(tuple(m["source"]), None if m["destination"] is None else tuple(m["destination"]),
                           tuple(tuple(p) for p in m["path_m"])) for m in doc["moves"])
        return MovePlan(moves, frozenset(tuple(s) for s in doc["target"]), doc["cost_m"], doc["version"],
                        doc["fingerprint"], doc["exclusion_radius_m"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{source}: malformed plan ({exc})") from None


def events_jsonl(log: EventLog, seed=None) -> str:
    head = json.dumps({"schema_version": SCHEMA_VERSION, "op": "header", "seed": seed}, sort_keys=True)
    body = [json.dumps(r, sort_keys=True, default=_plain) for r in log]
    return "\n".join([head, *body]) + "\n"


def read_events(path) -> list[dict]:
    records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not records or records[0].get("op") != "header":
        raise ConfigError(f"{path}: missing header record")
    _check_schema(records[0].get("schema_version"), path)
    return records[1:]


# ---------------------------------------------------------------- spectra and tables

def table_csv(columns: dict, metadata: dict | None = None) -> str:
    """Columnar text table; keys are ``name[unit]`` headers."""
    buf = io.StringIO()
    buf.write(f"# schema_version: {SCHEMA_VERSION}\n")
    for key, value in sorted((metadata or {}).items()):
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True, default=_plain)}\n")
    buf.write(",".join(columns) + "\n")
    cols = [np.asarray(v) for v in columns.values()]
    for row in zip(*cols):
        buf.write(",".join(_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return f"{float(v):.17g}"


def read_table(path) -> tuple[dict, dict]:
    """Inverse of :func:`table_csv`: ``(columns by bare name, metadata)``."""
    metadata, header, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            metadata[key.strip()] = json.loads(value)
        elif header is None:
            header = [h.split("[")[0] for h in line.split(",")]
        elif line:
            rows.append(line.split(","))
    _check_schema(metadata.pop("schema_version", None), path)
    cols = {}
    for i, name in enumerate(header or []):
        cells = [r[i] for r in rows]
        try:
            cols[name] = np.array([float(c) for c in cells])
        except ValueError:
            cols[name] = cells
    return cols, metadata


def psd_csv(psd, metadata: dict | None = None) -> str:
    unit = CHANNEL_UNITS.get(psd.channel, "")
    meta = {"channel": psd.channel, "segment_count": psd.segment_count, "resolution_hz": psd.resolution,
            "variance": psd.variance, "windowed_variance": psd.windowed_variance, **(metadata or {})}
    return table_csv({"frequency[Hz]": psd.frequencies, f"power[{unit}^2/Hz]": psd.power}, meta)


def fit_dict(fit) -> dict:
    return {"center_frequency_hz": fit.center_frequency, "center_error_hz": fit.center_error,
            "damping_rad_s": fit.damping, "damping_error_rad_s": fit.damping_error,
            "amplitude": fit.amplitude, "noise_floor": fit.noise_floor,
            "reduced_chi2": fit.goodness, "peak_db": fit.peak_db, "band_hz": list(fit.band)}


# ---------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(root, seed=None, status: str = "complete", extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    """Hash every file under ``root`` (except the manifest) into ``root/name``."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != name)
    doc = {"schema_version": SCHEMA_VERSION, "seed": seed, "status": status,
           "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
           "files": [{"path": p.relative_to(root).as_posix(), "sha256": sha256_file(p),
                      "bytes": p.stat().st_size} for p in files]}
    doc.update(extra or {})
    return write_text(root / name, dumps(doc))


def verify_manifest(root, name: str = "manifest.json") -> list[str]:
    """Paths whose content no longer matches the manifest."""
    root = Path(root)
    doc = read_json(root / name)
    return [f["path"] for f in doc["files"]
            if not (root / f["path"]).is_file() or sha256_file(root / f["path"]) != f["sha256"]]
