"""Snapshot files and CSV tables (layouts are described in docs/formats.md)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .geometry import Discretization, DomainSpec, build_discretization
from .spectral import Collocation
from .state import ALL_FIELDS, State

MAGIC = b"FPSI-SNAPSHOT 1\n"
SNAPSHOT_FORMAT = "fpsi-snapshot"
SNAPSHOT_VERSION = 1


def config_hash(text: str | bytes) -> str:
    data = text.encode("utf-8") if isinstance(text, str) else text
    return hashlib.sha256(data).hexdigest()


def provenance(cfg_hash: str, mode: str, **extra) -> dict[str, str]:
    """Provenance record written at the top of every output file."""
    out = {"config_sha256": cfg_hash, "version": __version__, "mode": mode}
    out.update({k: str(v) for k, v in extra.items()})
    return out


def _grid_array(coeffs: np.ndarray, colloc: Collocation) -> np.ndarray:
    vals = colloc.to_physical(coeffs)
    return vals.reshape(colloc.shape + vals.shape[1:])


def save_snapshot(path: str | Path, state: State, prov: Mapping[str, str], energy: float | None = None) -> Path:
    """Write one State as real collocation arrays after a JSON header line."""
    disc = state.disc
    colloc = Collocation(disc)
    arrays = {name: np.ascontiguousarray(_grid_array(getattr(state, name), colloc), dtype="<f8") for name in ALL_FIELDS}
    header = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "t": float(state.t),
        "M": disc.M,
        "d_plane": disc.d,
        "h": disc.domain.h,
        "n_elems": list(disc.n_elems),
        "degrees": list(disc.degrees),
        "n_colloc": colloc.n,
        "fields": [{"name": n, "shape": list(arrays[n].shape)} for n in ALL_FIELDS],
        "energy": None if energy is None else float(energy),
        "provenance": dict(prov),
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for name in ALL_FIELDS:
            fh.write(arrays[name].tobytes(order="C"))
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        line = fh.readline()
        return json.loads(line.decode("utf-8")), len(MAGIC) + len(line)


def discretization_from_header(header: Mapping) -> Discretization:
    return build_discretization(
        DomainSpec(int(header["d_plane"]), float(header["h"])), int(header["M"]), tuple(header["n_elems"]), tuple(header["degrees"])
    )


def load_snapshot(path: str | Path, disc: Discretization | None = None) -> tuple[State, dict]:
    """Read a snapshot; with ``disc`` given, the file must match it."""
    header, offset = read_header(path)
    if header.get("format") != SNAPSHOT_FORMAT or header.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot format")
    if disc is None:
        disc = discretization_from_header(header)
    else:
        expect = {
            "M": disc.M,
            "d_plane": disc.d,
            "h": disc.domain.h,
            "n_elems": list(disc.n_elems),
            "degrees": list(disc.degrees),
        }
        for key, val in expect.items():
            if header[key] != val:
                raise ValueError(f"{path}: snapshot {key}={header[key]} does not match the discretization ({val})")
    colloc = Collocation(disc, int(header["n_colloc"]))
    raw = np.fromfile(path, dtype="<f8", offset=offset)
    fields, pos = {}, 0
    for entry in header["fields"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if pos + size > raw.size:
            raise ValueError(f"{path}: truncated snapshot")
        vals = raw[pos : pos + size].reshape((colloc.size,) + shape[disc.d :])
        pos += size
        coeffs = colloc.to_modes(vals)
        fields[entry["name"]] = 0.5 * (coeffs + np.conj(coeffs[::-1]))
    if pos != raw.size:
        raise ValueError(f"{path}: trailing data in snapshot")
    missing = set(ALL_FIELDS) - set(fields)
    if missing:
        raise ValueError(f"{path}: snapshot lacks fields {sorted(missing)}")
    return State(disc=disc, t=float(header["t"]), **{n: fields[n] for n in ALL_FIELDS}), header


def format_float(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(
    path: str | Path, columns: Sequence[str], rows: Iterable[Mapping[str, float] | Sequence[float]], prov: Mapping[str, str]
) -> Path:
    """'#'-prefixed provenance lines, a header row, then one row per record."""
    path = Path(path)
    lines = [f"# {k}: {v}" for k, v in prov.items()]
    lines.append(",".join(columns))
    for row in rows:
        vals = [row[c] for c in columns] if isinstance(row, Mapping) else list(row)
        lines.append(",".join(v if isinstance(v, str) else format_float(v) for v in vals))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path: str | Path) -> tuple[dict[str, str], list[str], np.ndarray]:
    """Provenance, column names and a float array of the rows."""
    prov, cols, rows = {}, None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            prov[k] = v
        elif cols is None:
            cols = line.split(",")
        elif line:
            rows.append([float(x) for x in line.split(",")])
    return prov, cols or [], np.array(rows, dtype=float).reshape(len(rows), len(cols or []))
