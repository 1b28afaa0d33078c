"""Command line entry point.

Exit codes: 0 when every selected check passes, 1 when a check or the
simplicity gate fails, 2 for configuration and usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import (PROBE_SUITES, VERIFY_SUITES, ConfigParseError, ExperimentConfig,
                     load_config)
from .expr import MatrixFunction, random_disk_points, skew_hermitian_defect
from .fields import SKEW_TOL, FieldValidationError
from .flow import PhasePoint, integrate_geodesic, scatter_fan, validate_simple
from .geometry import DomainError, NotSimpleError, boundary_fan
from .probes import ConfigError
from .suites import VERIFY, run_probe, suite_rng
from .transform import scattering_data_for, transport_fan

SUBCOMMANDS = ("trace", "scatter-fan", "transform", "scatter", "verify", "probe", "validate-fields")


class UsageError(ValueError):
    pass


def _threads() -> int:
    raw = os.environ.get("MAGTOMO_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"MAGTOMO_THREADS must be an integer, got {raw!r}") from None


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


class Writer:
    """Single writer for every artifact of a run."""

    def __init__(self, out: Path, config_hash: str):
        self.out, self.config_hash, self.files = out, config_hash, []
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name, header, rows):
        path = self.out / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
        self.files.append(name)

    def json(self, name, payload):
        with open(self.out / name, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True, indent=2, default=float) + "\n")
        self.files.append(name)

    def manifest(self, subcommand, ok):
        self.json("run.json", {"subcommand": subcommand, "config_hash": self.config_hash,
                               "pass": ok, "files": sorted(set(self.files))})


def _suites(arg, cfg: ExperimentConfig, allowed) -> list[str]:
    names = [s for s in (arg.split(",") if arg else cfg.suites) if s]
    names = [s for s in names if s in allowed] if not arg else names
    if not names:
        names = list(allowed)
    bad = [s for s in names if s not in allowed]
    if bad:
        raise UsageError(f"unknown suite(s) {', '.join(bad)}; choose from {', '.join(allowed)}")
    return names


# --- subcommands -----------------------------------------------------------------------

def cmd_trace(cfg, args, writer):
    x0, y0, th0 = args.start
    tr = integrate_geodesic(cfg.system, PhasePoint(x0, y0, th0), cfg.dt)
    writer.csv("trace.csv", ["t", "x", "y", "theta"], zip(tr.t, tr.x, tr.y, tr.theta))
    print(f"trace: {tr.t.size} samples, exit time {tr.exit_time:.10g}")
    return True


def cmd_scatter_fan(cfg, args, writer):
    rows = [(e.beta, e.mu, ex.beta, ex.mu, tau)
            for e, ex, tau in scatter_fan(cfg.system, boundary_fan(cfg.fan_size), cfg.dt)]
    writer.csv("scatter_fan.csv", ["beta_in", "mu_in", "beta_out", "mu_out", "tau"], rows)
    print(f"scatter-fan: {len(rows)} rays")
    return True


def cmd_transform(cfg, args, writer):
    entries = boundary_fan(cfg.fan_size)
    ft = transport_fan(cfg.system, cfg.pair, entries, cfg.dt)
    f = cfg.integrand_function
    if f.n == 1 and cfg.n > 1:
        raise UsageError("a scalar integrand needs n = 1; give one component per rank")
    I = ft.integrate(f)
    header = ["beta", "mu", "tau"]
    for j in range(I.shape[1]):
        header += [f"re_{j}", f"im_{j}"]
    rows = []
    for i, e in enumerate(entries):
        row = [e.beta, e.mu, ft.tau[i]]
        for v in I[i]:
            row += [v.real, v.imag]
        rows.append(row)
    writer.csv("transform.csv", header, rows)
    print(f"transform: {len(rows)} rays, max |I| {np.abs(I).max():.6g}")
    return True


def cmd_scatter(cfg, args, writer):
    entries = boundary_fan(cfg.fan_size)
    sd = scattering_data_for(cfg.system, cfg.pair, entries, cfg.dt)
    n = sd.C.shape[-1]
    header = ["beta", "mu", "tau"]
    for a in range(n):
        for b in range(n):
            header += [f"re_C{a}{b}", f"im_C{a}{b}"]
    rows = []
    for i, e in enumerate(entries):
        row = [e.beta, e.mu, sd.tau[i]]
        for v in sd.C[i].ravel():
            row += [v.real, v.imag]
        rows.append(row)
    writer.csv("scatter.csv", header, rows)
    print(f"scatter: {len(rows)} rays, unitarity defect {sd.unitarity_defect():.3g}")
    return True


def _map(fn, items):
    threads = _threads()
    if threads == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def cmd_verify(cfg, args, writer):
    names = _suites(args.suite, cfg, VERIFY_SUITES)
    grid = tuple(cfg.grid)

    def run(name):
        kw = {}
        if name == "intfactor" and _degree_one_scalar(cfg):
            kw["attenuation"] = cfg.integrand_function
        return VERIFY[name](cfg.system, cfg.pair, grid, suite_rng(cfg.seed, name), **kw)

    ok = True
    for name, res in zip(names, _map(run, names)):
        writer.json(f"verify_{name}.json", res.to_dict(cfg.config_hash, cfg.seed))
        writer.csv(f"verify_{name}_refinement.csv", ["resolution", "quantity", "residual"],
                   res.refinement)
        print(f"verify {name}: residual {res.residual:.3e} at {res.resolution} "
              f"{'PASS' if res.passed else 'FAIL'}")
        ok &= res.passed
    return ok


def _degree_one_scalar(cfg) -> bool:
    if cfg.n != 1 or len(cfg.integrand) != 1:
        return False
    from .fiber import attenuation_layers, get_mesh
    try:
        attenuation_layers(cfg.system, cfg.integrand_function, get_mesh(17))
    except ValueError:
        return False
    return True


def cmd_probe(cfg, args, writer):
    names = _suites(args.suite, cfg, PROBE_SUITES)

    def run(name):
        return run_probe(name, cfg.system, cfg.pair, fan_size=cfg.fan_size, dt=cfg.dt,
                         seed=int(suite_rng(cfg.seed, name).integers(2**31)))

    ok = True
    for name, rep in zip(names, _map(run, names)):
        rep.config_hash = cfg.config_hash
        writer.json(f"probe_{name}.json", rep.to_dict())
        head = ", ".join(f"{k} {v:.3e}" if isinstance(v, float) else f"{k} {v}"
                         for k, v in rep.metrics[:2])
        print(f"probe {name}: {head} {'PASS' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    return ok


def cmd_validate_fields(cfg, args, writer):
    pts = random_disk_points(np.random.default_rng(cfg.seed), 256)
    pair = cfg.pair
    report, ok = {}, True
    for name in ("A_x", "A_y", "Phi"):
        d = skew_hermitian_defect(MatrixFunction([getattr(pair, name)]), pts)
        report[name] = d
        good = d <= SKEW_TOL
        ok &= good
        print(f"{name}: skew-Hermitian residual {d:.3e} {'ok' if good else 'NOT skew-Hermitian'}")
    writer.json("fields.json", {"n": pair.n, "skew_hermitian_residual": report, "pass": ok,
                                "tolerance": SKEW_TOL, "config_hash": cfg.config_hash})
    return ok


COMMANDS = {"trace": cmd_trace, "scatter-fan": cmd_scatter_fan, "transform": cmd_transform,
            "scatter": cmd_scatter, "verify": cmd_verify, "probe": cmd_probe,
            "validate-fields": cmd_validate_fields}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--out", type=Path, default=Path("magtomo-out"), help="artifact directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--grid", type=int, nargs=3, metavar=("NX", "NY", "NT"))
    common.add_argument("--fan", type=int, metavar="N")
    common.add_argument("--suite", metavar="NAME[,NAME...]")
    parser = argparse.ArgumentParser(prog="magtomo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "trace":
            p.add_argument("--start", type=float, nargs=3, metavar=("X", "Y", "THETA"),
                           default=(0.0, 0.0, 0.0))
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.dt is not None and not args.dt > 0:
        raise UsageError("--dt must be positive")
    if args.fan is not None and args.fan < 1:
        raise UsageError("--fan must be >= 1")
    if args.grid is not None and min(args.grid) < 5:
        raise UsageError("--grid sizes must be >= 5")
    return cfg.with_overrides(seed=args.seed, dt=args.dt, fan_size=args.fan,
                              grid=tuple(args.grid) if args.grid else None)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = _apply_overrides(cfg, args)
        cfg.pair  # force parsing of the attenuation entries
    except (ConfigParseError, UsageError, FieldValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    print(f"config sha256 {cfg.config_hash}")
    writer = Writer(args.out, cfg.config_hash)
    try:
        if args.command != "validate-fields":
            validate_simple(cfg.system, dt=max(cfg.dt, 1e-3))
            cfg.pair.validate()
        ok = COMMANDS[args.command](cfg, args, writer)
    except (NotSimpleError, FieldValidationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        writer.manifest(args.command, False)
        return 1
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    writer.manifest(args.command, bool(ok))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
