"""Command line entry point: ``diraclab <subcommand> config.yaml``."""
from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(n):
    # must run before numpy is first imported to take effect
    if n:
        for v in _THREAD_VARS:
            os.environ[v] = str(n)


def _parser():
    p = argparse.ArgumentParser(prog="diraclab", description="Dirac-Hartree semiclassics laboratory")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML run configuration")
        sp.add_argument("--output-dir", help="artifact root (env DIRACLAB_OUTPUT_DIR)")
        sp.add_argument("--threads", type=int, help="BLAS/FFT threads (env DIRACLAB_THREADS)")
        sp.add_argument("--seed", type=int, help="override the sampling seed")
        return sp

    common(sub.add_parser("run", help="single evolution with artifacts"))
    sp = common(sub.add_parser("sweep", help="hbar convergence sweep"))
    sp.add_argument("--hbars", default="1/8,1/16,1/32,1/64")
    sp = common(sub.add_parser("compare", help="Dirac band densities against the Vlasov ensemble"))
    sp.add_argument("--particles", type=int)
    sp = common(sub.add_parser("coulomb", help="regularized Coulomb sweeps, sigma = hbar^alpha"))
    sp.add_argument("--hbars", default="1/8,1/16,1/32,1/64")
    sp.add_argument("--alphas", default="0,0.2,0.3")
    common(sub.add_parser("validate-config", help="check a configuration and exit"))
    return p


def _fractions(text):
    from fractions import Fraction
    return [float(Fraction(t.strip())) for t in text.split(",") if t.strip()]


def _outdir(cfg, name):
    d = os.path.join(cfg.output_dir, f"{name}-{cfg.hash()}")
    os.makedirs(d, exist_ok=True)
    return d


def main(argv=None):
    args = _parser().parse_args(argv)
    _set_threads(args.threads or os.environ.get("DIRACLAB_THREADS"))

    from . import io as dio
    from .config import ConfigError, load_config
    from . import experiments as ex

    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = cfg.with_(output_dir=args.output_dir)
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        cfg.validate()
    except ConfigError as exc:
        print(json.dumps(exc.report()), file=sys.stderr)
        return 2
    except (OSError, TypeError) as exc:
        print(json.dumps({"error": "config", "constraint": "io", "message": str(exc)}), file=sys.stderr)
        return 2

    h = cfg.hash()
    if args.cmd == "validate-config":
        print(json.dumps({"valid": True, "config_hash": h}))
        return 0
    if args.cmd == "run":
        out = ex.run(cfg)
        with open(os.path.join(out, "manifest.json")) as fh:
            ok = json.load(fh)["all_monitors_passed"]
        print(json.dumps({"output": out, "all_monitors_passed": ok}))
        return 0
    if args.cmd == "sweep":
        rep = ex.convergence_sweep(cfg, _fractions(args.hbars))
        out = _outdir(cfg, "sweep")
        dio.write_csv(os.path.join(out, "residuals.csv"), rep.rows, dio.RESIDUAL_COLUMNS, h)
        dio.write_csv(os.path.join(out, "sweep.csv"),
                      [{"hbar": a, "residual": b} for a, b in zip(rep.hbars, rep.residuals)],
                      ("hbar", "residual"), h)
        print(json.dumps({"output": out, "slope": rep.slope, "monotone": rep.monotone}))
        return 0
    if args.cmd == "compare":
        rows, info = ex.compare_dirac_vlasov(cfg, args.particles)
        out = _outdir(cfg, "compare")
        dio.write_csv(os.path.join(out, "compare.csv"), rows,
                      ("t", "hbar", "band", "test", "dirac", "vlasov", "distance"), h)
        dio.write_manifest(out, {"config_hash": h, "info": info})
        print(json.dumps({"output": out, "distance_T": ex.distance_at(rows, cfg.T)}))
        return 0
    if args.cmd == "coulomb":
        hb = _fractions(args.hbars)
        res = ex.coulomb_study(cfg, _fractions(args.alphas), hb)
        out = _outdir(cfg, "coulomb")
        rows = []
        for al, rep in res.items():
            for hh, r in zip(rep.hbars, rep.residuals):
                rows.append({"alpha": al, "hbar": hh, "sigma": hh ** al, "residual": r, "slope": rep.slope})
        dio.write_csv(os.path.join(out, "coulomb.csv"), rows, ("alpha", "hbar", "sigma", "residual", "slope"), h)
        print(json.dumps({"output": out, "slopes": {str(a): r.slope for a, r in res.items()}}))
        return 0
    return 1


if __name__ == "__main__":
    sys.exit(main())
