"""Run configuration: YAML key/value document, validation and hashing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import math
import os

import numpy as np
import yaml

from .lattice import LatticeSpec, make_grid
from .potentials import PeriodicPotential, kernel_from_name
from .symbol import DiracConstants
from .wigner import Bump, TestFunction, TrigPoly


class ConfigError(ValueError):
    def __init__(self, constraint, message):
        super().__init__(f"[{constraint}] {message}")
        self.constraint = constraint
        self.message = message

    def report(self):
        return {"error": "config", "constraint": self.constraint, "message": self.message}


DEFAULT_BATTERY = (
    {"name": "t1", "eta": [[1, 0, 1.0, 0.0]], "phi": {"center": [1.0, 0.0], "radius": 1.2}},
    {"name": "t2", "eta": [[0, 1, 1.0, 0.5]], "phi": {"center": [1.0, 0.0], "radius": 1.2}},
    {"name": "t3", "eta": [[1, 1, 1.0, 0.0], [1, 0, 0.5, 1.0]], "phi": {"center": [1.0, 0.0], "radius": 1.2}},
    {"name": "t4", "eta": [[1, 0, 1.0, 0.7]], "phi": {"center": [1.2, 0.2], "radius": 0.8}},
    {"name": "t5", "eta": [[0, 1, 1.0, 0.0], [1, 0, 0.5, 0.3]], "phi": {"center": [1.2, 0.2], "radius": 0.8}},
    {"name": "t6", "eta": [[2, 0, 0.5, 0.2]], "phi": {"center": [0.8, -0.2], "radius": 0.8}},
)


@dataclass
class RunConfig:
    # physical constants
    m: float = 1.0                 # mass [dimensionless units]
    c: float = 1.0                 # speed of light [length / time]
    hbar: float = 1.0 / 16         # semiclassical parameter, power of two
    # lattice
    basis: list = field(default_factory=lambda: [[1.0, 0.0], [0.0, 1.0]])  # e1, e2 [length]
    a: float = 0.5                 # lattice scale (dimensionless)
    potential: list = field(default_factory=lambda: [[1, 0, 0.05, 0.0]])  # (m1, m2, re, im) [energy]
    # grids
    box: float = 2.0               # torus side L [length]
    n: int = 256                   # position nodes per axis
    xstride: int = 8               # coarse phase-space stride
    # time
    T: float = 0.5                 # final time [time]
    dt: float | None = None        # step [time]; None -> min(1e-3, 0.1 hbar / E_max)
    hartree_update: str = "symmetric"
    # interaction
    kernel: str = "gaussian"       # gaussian | coulomb | none
    sigma: float = 1.0             # kernel width [length]
    alpha: float | None = None     # if set, sigma = hbar ** alpha
    # massless cutoff
    kappa: float = 0.5             # radius of excluded disc around k = 0 [momentum]
    # initial data
    x0: list = field(default_factory=lambda: [1.0, 1.0])   # [length]
    k0: list = field(default_factory=lambda: [1.0, 0.0])   # [momentum]
    band: str = "+"
    width: float | None = 0.2      # envelope width [length]; None -> sqrt(hbar)
    # diagnostics
    residual_times: list = field(default_factory=lambda: [0.1, 0.25, 0.5])  # [time]
    fd_steps: int = 3              # half-width of centred time difference, in steps
    od_samples: int = 11           # snapshots for sup_t of the interband norm
    battery: list = field(default_factory=lambda: [dict(b) for b in DEFAULT_BATTERY])
    # particles
    particles: int = 1_000_000
    vlasov_dt: float = 2.5e-3      # [time]
    seed: int = 20240601
    output_dir: str = "runs"

    # -- derived objects --------------------------------------------------
    @property
    def consts(self):
        return DiracConstants(self.m, self.c, self.hbar)

    @property
    def lattice(self):
        return LatticeSpec(np.asarray(self.basis, dtype=float), self.a)

    @property
    def grid(self):
        return make_grid(self.box, self.n)

    @property
    def pot(self):
        return PeriodicPotential.from_records(self.lattice, self.potential)

    @property
    def kernel_sigma(self):
        return self.hbar ** self.alpha if self.alpha is not None else self.sigma

    @property
    def hartree_kernel(self):
        return kernel_from_name(self.kernel, self.kernel_sigma)

    def tests(self):
        out = []
        for i, b in enumerate(self.battery):
            eta = TrigPoly((self.box, self.box), tuple(tuple(t) for t in b["eta"]))
            phi = Bump(tuple(b["phi"]["center"]), float(b["phi"]["radius"]))
            out.append(TestFunction(eta, phi, b.get("name", f"t{i + 1}")))
        return out

    def with_(self, **kw):
        return replace(self, **kw)

    # -- validation -------------------------------------------------------
    def validate(self):
        try:
            consts = self.consts
            lat = self.lattice
            grid = self.grid
        except ValueError as exc:
            raise ConfigError("domain", str(exc)) from exc
        p = -math.log2(self.hbar)
        if abs(p - round(p)) > 1e-12 or p < 0:
            raise ConfigError("commensurability",
                              f"hbar must be 2^-p so that the Wigner shift grid is a grid refinement; got {self.hbar}")
        mu, _ = self.pot.modes(rel_tol=0.0)
        for m_ in mu:
            r = self.box * m_ / (2 * math.pi * self.a)
            if np.any(np.abs(r - np.round(r)) > 1e-9):
                raise ConfigError("commensurability",
                                  f"potential mode mu={m_} is not periodic on the box L={self.box} at a={self.a}; "
                                  "the momentum shifts hbar mu/2a would fall off the Wigner grid")
        if self.xstride < 1 or self.n % self.xstride:
            raise ConfigError("grid", f"xstride {self.xstride} must divide n={self.n}")
        if self.T < 0:
            raise ConfigError("time", "T must be nonnegative")
        if self.band not in ("+", "-"):
            raise ConfigError("initial-data", "band must be '+' or '-'")
        if self.kernel not in ("gaussian", "coulomb", "none"):
            raise ConfigError("kernel", f"unknown kernel {self.kernel}")
        if self.alpha is not None and not (0 <= self.alpha < 1):
            raise ConfigError("kernel", "alpha must lie in [0, 1)")
        if consts.massless:
            w = self.width if self.width is not None else math.sqrt(self.hbar)
            need = self.kappa + 3.0 * self.hbar / (w * math.sqrt(2))
            if np.linalg.norm(self.k0) < need:
                raise ConfigError("cutoff", f"|k0| must be >= kappa + 3 momentum spreads = {need:.4g}")
            for t in self.tests():
                if t.phi.min_abs_k() <= self.kappa:
                    raise ConfigError("cutoff", f"test {t.name} is not supported inside |k| >= kappa")
        return self

    # -- serialisation ----------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def hash(self):
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(render_yaml(self))


_UNITS = {
    "m": "mass", "c": "length / time", "hbar": "action (dimensionless, power of two)",
    "basis": "length", "a": "dimensionless", "potential": "(m1, m2, re, im) with re/im in energy",
    "box": "length", "n": "nodes per axis", "xstride": "nodes", "T": "time", "dt": "time",
    "hartree_update": "symmetric | lagged", "kernel": "gaussian | coulomb | none", "sigma": "length",
    "alpha": "dimensionless, sigma = hbar^alpha", "kappa": "momentum", "x0": "length",
    "k0": "momentum", "band": "+ | -", "width": "length", "residual_times": "time",
    "fd_steps": "steps", "od_samples": "count", "battery": "eta: (n1, n2, amp, phase); phi: momentum",
    "particles": "count", "vlasov_dt": "time", "seed": "64-bit integer", "output_dir": "path",
}


def render_yaml(cfg: RunConfig):
    lines = []
    for k, v in cfg.to_dict().items():
        val = yaml.safe_dump(v, default_flow_style=True, width=10 ** 6).strip()
        if val.endswith("..."):
            val = val[:-3].strip()
        lines.append(f"# [{_UNITS.get(k, '')}]")
        lines.append(f"{k}: {val}")
    return "\n".join(lines) + "\n"


def load_config(path_or_text, env=True):
    if isinstance(path_or_text, dict):
        data = dict(path_or_text)
    elif os.path.exists(str(path_or_text)):
        with open(path_or_text) as fh:
            data = yaml.safe_load(fh) or {}
    else:
        data = yaml.safe_load(path_or_text) or {}
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError("schema", f"unknown keys {sorted(unknown)}")
    cfg = RunConfig(**data)
    if env and os.environ.get("DIRACLAB_OUTPUT_DIR"):
        cfg = cfg.with_(output_dir=os.environ["DIRACLAB_OUTPUT_DIR"])
    return cfg


def benchmark_config(massless=False, **kw):
    """The fixed benchmark: m=1, c=1, a=1/2, square lattice, V(+-e^1)=0.05, Gaussian kernel."""
    cfg = RunConfig()
    if massless:
        cfg = cfg.with_(m=0.0, k0=[2.0, 0.0], battery=[dict(b) for b in MASSLESS_BATTERY])
    return cfg.with_(**kw)


MASSLESS_BATTERY = (
    {"name": "u1", "eta": [[1, 0, 1.0, 0.0]], "phi": {"center": [2.0, 0.0], "radius": 1.2}},
    {"name": "u2", "eta": [[0, 1, 1.0, 0.5]], "phi": {"center": [2.0, 0.0], "radius": 1.2}},
    {"name": "u3", "eta": [[1, 1, 1.0, 0.0], [1, 0, 0.5, 1.0]], "phi": {"center": [2.0, 0.0], "radius": 1.2}},
    {"name": "u4", "eta": [[1, 0, 1.0, 0.7]], "phi": {"center": [2.2, 0.2], "radius": 0.8}},
    {"name": "u5", "eta": [[0, 1, 1.0, 0.0], [1, 0, 0.5, 0.3]], "phi": {"center": [2.2, 0.2], "radius": 0.8}},
    {"name": "u6", "eta": [[2, 0, 0.5, 0.2]], "phi": {"center": [1.8, -0.2], "radius": 0.8}},
)
