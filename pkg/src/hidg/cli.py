"""Command line entry point: ``hidg solve`` and ``hidg study``.

Exit codes: 0 ok, 2 bad flags, 3 unreadable or invalid config file,
4 mesh error, 5 assembly/coefficient error, 6 solver failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .forms import REGIMES, AssemblyError, StabilizationConfig
from .harness import (
    CSV_NOTE,
    build_manufactured,
    predicted_rates,
    run_study_grid,
    solve_level,
    write_report_csv,
)
from .memory import HistoryError
from .mesh import MeshError, build_uniform_triangulation, import_mesh
from .stepper import SolverError

log = logging.getLogger("hidg")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MESH = 4
EXIT_ASSEMBLY = 5
EXIT_SOLVER = 6

THREADS_ENV = "HIDG_NUM_THREADS"

C11_CHOICES = {"one": "c11-one", "inv-h": "c11-inv-h"}
C22_CHOICES = {"zero": "c22-zero", "one": "c22-one", "h": "c22-h"}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[E_USAGE]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--config", help="key = value file mirroring the flags")
    p.add_argument("--c11", choices=sorted(C11_CHOICES), help="C11 scaling: O(1) or O(p^2/h)")
    p.add_argument("--c22", choices=sorted(C22_CHOICES), help="C22 scaling: 0, O(1) or O(h/p^2)")
    p.add_argument("--zeta", type=float, default=1.0)
    p.add_argument("--kappa", type=float, default=None, help="C22 constant when C22 is not zero")
    p.add_argument("--t-final", type=float, default=1.0)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hidg", description="hp-LDG solver for hyperbolic integro-differential equations")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="one solve of the manufactured problem")
    _common(s)
    s.add_argument("--mesh-n", type=int, help="uniform n x n triangulation of the unit square")
    s.add_argument("--mesh-file", help="mesh in the vertices/elements text format")
    s.add_argument("--degree", type=int, default=1)
    s.add_argument("--regime", choices=sorted(REGIMES))
    s.add_argument("--k", type=float, help="time step (default: min(h/2, h^((p+1)/2)))")
    s.add_argument("--dump-fields", help="directory for state dumps")
    s.add_argument("--dump-every", type=int, default=0, help="also dump every N steps")

    st = sub.add_parser("study", help="convergence study over uniform refinements")
    _common(st)
    st.add_argument("--degrees", type=_int_list, default=[1, 2, 3])
    st.add_argument("--levels", type=int, default=4, help="number of meshes, n = base, 2 base, ...")
    st.add_argument("--base-n", type=int, default=4)
    st.add_argument("--regime", help="regime name, comma list, or 'all'")
    st.add_argument("--k", type=float, help="fixed time step for every level")
    st.add_argument("--timing", action="store_true", help="fill the wall_time_s column")
    return parser


def _config_tokens(path: str, command: str) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    tokens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("_", "-")
        if not key or key in ("config", "command"):
            raise ConfigError(f"{path}:{lineno}: invalid key {key!r}")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(f"--{key}")
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens += [f"--{key}", value]
    return tokens


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        extra = _config_tokens(args.config, args.command)
        # file values first so explicit flags win
        argv = [argv[0]] + extra + list(argv[1:])
        args = parser.parse_args(argv)
    return args


def _regimes(args) -> list[str]:
    if args.regime:
        if args.regime == "all":
            return list(REGIMES)
        names = [r.strip() for r in args.regime.split(",") if r.strip()]
        unknown = [r for r in names if r not in REGIMES]
        if unknown:
            raise ConfigError(f"unknown regime(s) {unknown}; choose from {sorted(REGIMES)}")
        return names
    c11 = C11_CHOICES[args.c11 or "one"]
    c22 = C22_CHOICES[args.c22 or "zero"]
    return [f"{c11}-{c22}"]


def _stabilization(regime, args) -> StabilizationConfig:
    over = {"zeta": args.zeta}
    if args.kappa is not None and REGIMES[regime]["kappa"] > 0:
        over["kappa"] = args.kappa
    return StabilizationConfig.from_regime(regime, **over)


def _output(path):
    if path is None:
        return nullcontext(sys.stdout)
    return open(path, "w", newline="")


SOLVE_COLUMNS = ["regime", "p", "mesh_n", "h", "k", "N", "e_U", "e_Z", "predicted_u_order", "predicted_flux_order"]


def cmd_solve(args) -> int:
    if args.mesh_file and args.mesh_n is not None:
        raise ConfigError("give either --mesh-n or --mesh-file, not both")
    if args.mesh_file:
        mesh = import_mesh(args.mesh_file)
    elif args.mesh_n is not None:
        mesh = build_uniform_triangulation(args.mesh_n)
    else:
        raise ConfigError("solve needs --mesh-n or --mesh-file")
    (regime,) = _regimes(args)[:1]
    cfg = _stabilization(regime, args)
    if args.k is not None and not args.k > 0:
        raise ConfigError("--k must be positive")
    if args.dump_fields:
        Path(args.dump_fields).mkdir(parents=True, exist_ok=True)
    res, _, _ = solve_level(
        build_manufactured(), cfg, args.degree, mesh, args.t_final, args.k, args.dump_fields, args.dump_every
    )
    rates = predicted_rates(cfg, args.degree)
    with _output(args.out) as fh:
        fh.write(CSV_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLVE_COLUMNS)
        w.writerow(
            [
                regime,
                args.degree,
                args.mesh_n if args.mesh_n is not None else "",
                f"{res.h:.6g}",
                f"{res.k:.6g}",
                res.N,
                f"{res.e_U:.6g}",
                f"{res.e_Z:.6g}",
                f"{rates.u_order:.6g}",
                f"{rates.flux_order:.6g}",
            ]
        )
    return EXIT_OK


def cmd_study(args) -> int:
    if args.levels < 1 or args.base_n < 1:
        raise ConfigError("--levels and --base-n must be positive")
    levels = [args.base_n * 2**i for i in range(args.levels)]
    reports = run_study_grid(
        _regimes(args),
        args.degrees,
        levels=levels,
        t_final=args.t_final,
        zeta=args.zeta,
        kappa=args.kappa,
        k=args.k,
    )
    with _output(args.out) as fh:
        write_report_csv(reports, fh, timing=args.timing)
    return EXIT_OK


def _limit_threads():
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if count < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0")
    if count == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error[E_CONFIG]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"solve": cmd_solve, "study": cmd_study}
    try:
        with _limit_threads():
            return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error[E_CONFIG]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeshError as exc:
        print(f"error[E_MESH]: {exc}", file=sys.stderr)
        return EXIT_MESH
    except AssemblyError as exc:
        print(f"error[E_ASSEMBLY]: {exc}", file=sys.stderr)
        return EXIT_ASSEMBLY
    except (SolverError, HistoryError) as exc:
        print(f"error[E_SOLVER]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error[E_CONFIG]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # pragma: no cover - last resort
        log.debug("internal error", exc_info=True)
        print(f"error[E_INTERNAL]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
