"""Field snapshots, archives and atomic file output.

SPF1 layout: b"SPF1", u8 dim, u32 K, [u8 component count for vector fields],
then little-endian f64 (re, im) pairs over k in [-K, K]^dim, row-major,
components concatenated.  Scalar and vector files are told apart by length.
"""
from __future__ import annotations

import configparser
import csv
import io as _io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, GridMismatchError
from .solvers import ObservationStream, Trajectory
from .spectral import ScalarField, VectorField, WaveGrid

MAGIC = b"SPF1"
_HEAD = struct.Struct("<4sBI")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


# ------------------------------------------------------------------- SPF1


def encode_spf1(field):
    grid = field.grid
    head = _HEAD.pack(MAGIC, grid.dim, grid.K)
    c = np.ascontiguousarray(field.coeffs, dtype="<c16")
    if isinstance(field, VectorField):
        head += struct.pack("<B", c.shape[0])
    return head + c.tobytes()


def decode_spf1(data, grid=None):
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise ValueError("not an SPF1 snapshot")
    _, dim, K = _HEAD.unpack_from(data)
    n = (2 * K + 1) ** dim
    body = len(data) - _HEAD.size
    if body == 16 * n:
        comps, off = None, _HEAD.size
    else:
        comps = data[_HEAD.size]
        off = _HEAD.size + 1
        if body != 1 + 16 * n * comps:
            raise ValueError(f"SPF1 length {len(data)} matches neither a scalar nor a vector field")
    g = WaveGrid(dim, K)
    if grid is not None and grid != g:
        raise GridMismatchError(f"snapshot grid {g} differs from expected {grid}")
    arr = np.frombuffer(data, dtype="<c16", offset=off).astype(complex)
    if comps is None:
        return ScalarField._raw(g, arr.reshape(g.shape))
    return VectorField._raw(g, arr.reshape((comps,) + g.shape))


def write_spf1(path, field):
    atomic_write_bytes(path, encode_spf1(field))


def read_spf1(path, grid=None):
    return decode_spf1(Path(path).read_bytes(), grid)


# -------------------------------------------------------------------- CSV


def write_csv(path, rows, columns):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    atomic_write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        try:
            out[k] = np.array([float(r[k]) for r in rows])
        except ValueError:
            out[k] = [r[k] for r in rows]
    return out


# ------------------------------------------------------------ manifests


def write_manifest(path, sections):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, items in sections.items():
        parser[name] = {k: _manifest_value(v) for k, v in items.items()}
    buf = _io.StringIO()
    parser.write(buf)
    atomic_write_text(path, buf.getvalue())


def _manifest_value(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_manifest(path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read manifest {path}")
    return {s: dict(parser[s]) for s in parser.sections()}


# --------------------------------------------------------------- archives


def write_archive(directory, traj, obs, config_echo=None):
    """Truth states as SPF1 snapshots, observations in ``observations.npz``, plus a manifest."""
    d = Path(directory)
    (d / "states").mkdir(parents=True, exist_ok=True)
    cls = VectorField if traj.vector else ScalarField
    for i, s in enumerate(traj.states):
        write_spf1(d / "states" / f"state_{i:06d}.spf", cls._raw(traj.grid, s))
    write_spf1(d / "final.spf", cls._raw(traj.grid, traj.final))
    arrays = {"low": obs.low}
    for name in ("rhs_low", "stage_low", "stage_rhs"):
        val = getattr(obs, name)
        if val is not None:
            arrays[name] = val
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(d / "observations.npz", buf.getvalue())
    sections = {
        "archive": {
            "dim": traj.grid.dim, "K": traj.grid.K, "dt": traj.dt, "keep_every": traj.keep_every,
            "vector": int(traj.vector), "n_states": len(traj.states), "times": traj.times,
            "N_obs": obs.N_obs, "obs_static": int(obs.static), "obs_t0": obs.t0,
        }
    }
    if config_echo:
        sections.update(config_echo)
    write_manifest(d / "manifest.ini", sections)


def read_archive(directory):
    d = Path(directory)
    man = read_manifest(d / "manifest.ini")
    a = man["archive"]
    grid = WaveGrid(int(a["dim"]), int(a["K"]))
    n = int(a["n_states"])
    states = [read_spf1(d / "states" / f"state_{i:06d}.spf", grid).coeffs for i in range(n)]
    final = read_spf1(d / "final.spf", grid).coeffs
    times = np.array([float(x) for x in a["times"].split()])
    vector = bool(int(a["vector"]))
    traj = Trajectory(grid, float(a["dt"]), int(a["keep_every"]), times, states, final, vector)
    with np.load(d / "observations.npz") as z:
        arrays = {k: z[k] for k in z.files}
    obs = ObservationStream(
        grid, int(a["N_obs"]), float(a["dt"]), arrays["low"], arrays.get("rhs_low"),
        arrays.get("stage_low"), arrays.get("stage_rhs"), vector=vector,
        t0=float(a["obs_t0"]), static=bool(int(a["obs_static"])),
    )
    return traj, obs, man
