"""Binary snapshot/checkpoint formats, CSV tables and run manifests.

All binary files are little-endian.

Spinor snapshot (.spn):
    8s  magic  b"DHSNAP01"
    u4  n1, u4 n2
    f8  extent1, f8 extent2, f8 hbar, f8 t
    c16 payload: component 0 (n1*n2, row-major), then component 1
Band density dump (.phs):
    8s  magic  b"DHPHAS01"
    u4  P, u4 nkx, u4 nky, i4 band
    f8  hbar, f8 t, f8 dx_weight
    f8  x (P*2), kx (nkx), ky (nky), values (P*nkx*nky)
Ensemble checkpoint (.ens):
    8s  magic  b"DHENS001"
    u8  N, f8 t, u8 seed, f8 extent1, f8 extent2
    f8  x (N*2), k (N*2), w (N);  i1 band (N)
"""
from __future__ import annotations

import csv
import json
import os
import struct

import numpy as np

from .lattice import make_grid
from .propagator import SpinorField
from .vlasov import ParticleEnsemble
from .wigner import BandDensity

SNAP_MAGIC = b"DHSNAP01"
PHASE_MAGIC = b"DHPHAS01"
ENS_MAGIC = b"DHENS001"

RESIDUAL_COLUMNS = ("t", "hbar", "a", "band", "test", "residual", "normalized")
CSV_SCHEMA_VERSION = 1


def _check_magic(fh, magic):
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")


def write_snapshot(path, psi: SpinorField, diagnostics=None, config_hash=None):
    n1, n2 = psi.grid.n
    with open(path, "wb") as fh:
        fh.write(SNAP_MAGIC)
        fh.write(struct.pack("<II4d", n1, n2, psi.grid.extent[0], psi.grid.extent[1], psi.hbar, psi.t))
        fh.write(np.ascontiguousarray(psi.values, dtype="<c16").tobytes())
    side = {"t": psi.t, "hbar": psi.hbar, "n": [n1, n2], "extent": list(psi.grid.extent),
            "diagnostics": diagnostics or {}, "config_hash": config_hash}
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, default=float)


def read_snapshot(path):
    with open(path, "rb") as fh:
        _check_magic(fh, SNAP_MAGIC)
        n1, n2, e1, e2, hbar, t = struct.unpack("<II4d", fh.read(struct.calcsize("<II4d")))
        vals = np.frombuffer(fh.read(), dtype="<c16").reshape(2, n1, n2).copy()
    return SpinorField(make_grid((e1, e2), (n1, n2)), vals, hbar, t)


def write_band_density(path, f: BandDensity, hbar, t):
    P = f.values.shape[0]
    with open(path, "wb") as fh:
        fh.write(PHASE_MAGIC)
        fh.write(struct.pack("<IIIi3d", P, len(f.kx), len(f.ky), int(f.band), hbar, t, f.dx_weight))
        for arr in (f.x, f.kx, f.ky, f.values):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_band_density(path):
    with open(path, "rb") as fh:
        _check_magic(fh, PHASE_MAGIC)
        fmt = "<IIIi3d"
        P, nkx, nky, band, hbar, t, dxw = struct.unpack(fmt, fh.read(struct.calcsize(fmt)))
        data = np.frombuffer(fh.read(), dtype="<f8")
    o = 0
    x = data[o:o + 2 * P].reshape(P, 2); o += 2 * P
    kx = data[o:o + nkx]; o += nkx
    ky = data[o:o + nky]; o += nky
    vals = data[o:o + P * nkx * nky].reshape(P, nkx, nky)
    return BandDensity(x.copy(), kx.copy(), ky.copy(), vals.copy(), band, dxw), hbar, t


def write_ensemble(path, ens: ParticleEnsemble):
    with open(path, "wb") as fh:
        fh.write(ENS_MAGIC)
        fh.write(struct.pack("<QdQ2d", ens.size, ens.t, int(ens.seed) & (2 ** 64 - 1), *ens.extent))
        for arr in (ens.x, ens.k, ens.w):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.band, dtype="<i1").tobytes())


def read_ensemble(path):
    with open(path, "rb") as fh:
        _check_magic(fh, ENS_MAGIC)
        fmt = "<QdQ2d"
        N, t, seed, e1, e2 = struct.unpack(fmt, fh.read(struct.calcsize(fmt)))
        x = np.frombuffer(fh.read(16 * N), "<f8").reshape(N, 2).copy()
        k = np.frombuffer(fh.read(16 * N), "<f8").reshape(N, 2).copy()
        w = np.frombuffer(fh.read(8 * N), "<f8").copy()
        b = np.frombuffer(fh.read(N), "<i1").copy()
    return ParticleEnsemble(x, k, w, b, (e1, e2), t, seed)


def write_csv(path, rows, columns, config_hash=None):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={CSV_SCHEMA_VERSION}")
        if config_hash:
            fh.write(f" config_hash={config_hash}")
        fh.write("\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in r.items()})


def read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_manifest(outdir, payload):
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
    return path


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return str(o)
