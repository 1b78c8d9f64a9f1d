"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 validation failure, 64 usage error.
Every command writes a run manifest (JSON) describing what it did; the
``replay`` command re-runs a manifest.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from ._io import dump_json, load_json
from .errors import NetInfeasible, RidgecraftError
from .geometry import (
    ManifoldKind,
    ManifoldSpec,
    add_gaussian_noise,
    default_spec,
    read_point_cloud_csv,
    sample_manifold,
    write_point_cloud_csv,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_USAGE = 64

MANIFOLDS = {"circle": ManifoldKind.CIRCLE, "curve": ManifoldKind.CURVE, "sphere": ManifoldKind.SPHERE}


class UsageError(Exception):
    pass


class ValidationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    version: str = __version__
    outputs: list = field(default_factory=list)
    duration_seconds: float = 0.0

    def write(self, path: "str | Path") -> Path:
        return dump_json(path, self.__dict__)


def _threads_arg(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument(
        "--threads", type=_threads_arg, default=None, help="worker threads (default: $RIDGECRAFT_THREADS or 1)"
    )

    parser = _Parser(prog="ridgecraft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ridgecraft {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs: dict[str, _Parser] = {}

    p = sub.add_parser("sample", parents=[common], help="sample a synthetic manifold to CSV")
    p.add_argument("--manifold", choices=sorted(MANIFOLDS), required=True)
    p.add_argument("--scale", type=float, default=None, help="radius (default 1, curve 0.5)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--header", action="store_true", help="write an x0,x1,... header row")
    subs["sample"] = p

    p = sub.add_parser("descend", parents=[common], help="fit an asdf and descend a mesh onto its ridge")
    p.add_argument("--asdf", choices=["kde", "pca"], required=True)
    p.add_argument("--fit", required=True, help="CSV of fitting samples")
    p.add_argument("--mesh", required=True, help="CSV of starting points")
    p.add_argument("--d", type=int, required=True, help="intrinsic dimension")
    p.add_argument("--bandwidth", type=float, required=True, help="sigma (kde) or tau_bar (pca)")
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--no-backtracking", action="store_true")
    p.add_argument("--reach", type=float, default=None, help="pca: reach used for packet validation warnings")
    p.add_argument("--volume", type=float, default=None, help="pca: volume used for packet validation warnings")
    p.add_argument("--out", required=True, help="trace CSV")
    subs["descend"] = p

    p = sub.add_parser("bench", parents=[common], help="run the benchmark table")
    p.add_argument("--profile", choices=["ci", "full"], default="ci")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cells", default=None, help="comma list like circle:kde,sphere:pca (default: all six)")
    subs["bench"] = p

    p = sub.add_parser("validate-packet", parents=[common], help="build a packet and check its conditions")
    p.add_argument("--fit", required=True)
    p.add_argument("--tau-bar", type=float, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--reach", type=float, required=True)
    p.add_argument("--volume", type=float, required=True)
    p.add_argument("--count-scale", choices=["tau_bar", "reach"], default="tau_bar")
    p.add_argument("--out", default=None, help="optional JSON report")
    subs["validate-packet"] = p

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    subs["replay"] = p
    return parser, subs


def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def parse_args(argv: Sequence[str]) -> tuple[argparse.Namespace, dict]:
    parser, subs = build_parser()
    # required flags may come from the config, so enforce them after merging
    required = {name: [a for a in sp._actions if a.required] for name, sp in subs.items()}
    for actions in required.values():
        for a in actions:
            a.required = False
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("ridgecraft: a command is required (see --help)")
    sp = subs[args.command]
    extra: dict = {}
    if getattr(args, "config", None):
        data = _load_config(args.config)
        known = {a.dest for a in sp._actions}
        defaults = {}
        for key, value in data.items():
            dest = key.replace("-", "_")
            if dest in known and dest not in ("config", "help"):
                defaults[dest] = value
            else:
                extra[key] = value
        if args.command != "bench" and extra:
            raise UsageError(f"{args.config}: unknown keys {sorted(extra)}")
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [a.option_strings[0] if a.option_strings else a.dest for a in required[args.command] if getattr(args, a.dest, None) is None]
    if missing:
        raise UsageError(f"ridgecraft {args.command}: the following arguments are required: {', '.join(missing)}")
    return args, extra


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("manifest",)}


def _manifest_path(args: argparse.Namespace, default: Path) -> Path:
    return Path(args.manifest) if getattr(args, "manifest", None) else default


# ---------------------------------------------------------------------------
# commands


def cmd_sample(args, extra) -> tuple[list[str], int]:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    if args.noise_sd < 0:
        raise UsageError("--noise-sd must be non-negative")
    kind = MANIFOLDS[args.manifold]
    spec = default_spec(kind) if args.scale is None else ManifoldSpec(kind, args.scale)
    cloud = sample_manifold(spec, args.count, args.seed)
    # noise gets its own stream so the clean sample is the same with or without it
    cloud = add_gaussian_noise(cloud, args.noise_sd, args.seed + 1)
    write_point_cloud_csv(cloud, args.out, header=args.header)
    return [str(args.out)], EXIT_OK


def cmd_descend(args, extra) -> tuple[list[str], int]:
    from .kde_asdf import KdeAsdf
    from .pca_asdf import build_packet, validate_packet
    from .ridge import DescentConfig, run_descent, write_traces_csv

    fit = read_point_cloud_csv(args.fit)
    mesh = read_point_cloud_csv(args.mesh)
    if fit.ambient_dim != mesh.ambient_dim:
        raise UsageError("fit and mesh have different dimensions")
    if not 1 <= args.d < fit.ambient_dim:
        raise UsageError(f"--d must lie in [1, {fit.ambient_dim - 1}]")
    if args.bandwidth <= 0:
        raise UsageError("--bandwidth must be positive")
    if args.asdf == "kde":
        asdf = KdeAsdf(fit, args.bandwidth, args.d)
    else:
        asdf = build_packet(fit, args.bandwidth, args.d)
        if args.reach is not None and args.volume is not None:
            report = validate_packet(asdf, args.reach, args.volume)
            for c in report.conditions:
                if not c.passed:
                    print(f"warning: packet condition {c.name} fails (margin {c.margin:.4g}; {c.detail})", file=sys.stderr)
        else:
            print("warning: packet not validated (pass --reach and --volume)", file=sys.stderr)
        if asdf.coverage < 1:
            print(f"warning: packet covers {asdf.coverage:.1%} of the fitting sample", file=sys.stderr)
    cfg = DescentConfig(
        args.d,
        step_size=args.step,
        max_iters=args.max_iters,
        tolerance=args.tolerance,
        backtracking=not args.no_backtracking,
    )
    traces = run_descent(asdf, mesh, cfg, threads=args.threads)
    write_traces_csv(traces, args.out)
    n_conv = sum(t.converged for t in traces)
    print(f"{n_conv}/{len(traces)} points converged")
    return [str(args.out)], EXIT_OK


def _parse_cells(spec: str | None) -> list[tuple[str, str]]:
    if spec is None:
        return [(m, a) for a in ("kde", "pca") for m in ("circle", "curve", "sphere")]
    if isinstance(spec, list):
        items = spec
    else:
        items = [s for s in spec.split(",") if s.strip()]
    cells = []
    for item in items:
        try:
            m, a = item.strip().lower().split(":")
        except ValueError:
            raise UsageError(f"bad cell {item!r}; expected manifold:asdf") from None
        if m not in MANIFOLDS or a not in ("kde", "pca"):
            raise UsageError(f"bad cell {item!r}")
        cells.append((m, a))
    return cells


_BENCH_OVERRIDES = {"n_fit", "n_mesh", "noise_sd", "n_reference", "trials", "max_iters", "step_size", "tolerance", "backtracking"}


def cmd_bench(args, extra) -> tuple[list[str], int]:
    from .metrics import preset_config, run_experiment, write_report_csv, write_report_json

    overrides = {k: v for k, v in extra.items() if k in _BENCH_OVERRIDES}
    bandwidths = extra.get("bandwidths", {})
    unknown = set(extra) - _BENCH_OVERRIDES - {"bandwidths"}
    if unknown:
        raise UsageError(f"unknown bench config keys {sorted(unknown)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    results: dict[tuple[str, str], float] = {}
    for m, a in _parse_cells(args.cells):
        cell_over = dict(overrides)
        if f"{m}:{a}" in bandwidths:
            cell_over["bandwidth"] = float(bandwidths[f"{m}:{a}"])
        cfg = preset_config(m, a, args.profile, seed=args.seed, **cell_over)
        report = run_experiment(cfg, threads=args.threads)
        stem = f"{m}_{a}"
        outputs.append(str(write_report_json(report, out_dir / f"report_{stem}.json")))
        outputs.append(str(write_report_csv(report, out_dir / f"rms_{stem}.csv")))
        results[(m, a)] = report.mean_rms
    lines = ["asdf,circle,curve,sphere"]
    for a in ("kde", "pca"):
        row = [repr(results[(m, a)]) if (m, a) in results else "" for m in ("circle", "curve", "sphere")]
        lines.append(",".join([a.upper()] + row))
    table = out_dir / "table.csv"
    from ._io import atomic_write_text

    atomic_write_text(table, "\n".join(lines) + "\n")
    outputs.append(str(table))
    print(f"{'':<5}{'circle':>12}{'curve':>12}{'sphere':>12}")
    for a in ("kde", "pca"):
        cells = [f"{results[(m, a)]:>12.4g}" if (m, a) in results else f"{'-':>12}" for m in ("circle", "curve", "sphere")]
        print(f"{a.upper():<5}" + "".join(cells))
    return outputs, EXIT_OK


def cmd_validate_packet(args, extra) -> tuple[list[str], int]:
    from .pca_asdf import build_packet, validate_packet

    fit = read_point_cloud_csv(args.fit)
    if not 1 <= args.d < fit.ambient_dim:
        raise UsageError(f"--d must lie in [1, {fit.ambient_dim - 1}]")
    if args.tau_bar <= 0 or args.reach <= 0 or args.volume <= 0:
        raise UsageError("--tau-bar, --reach and --volume must be positive")
    packet = build_packet(fit, args.tau_bar, args.d)
    report = validate_packet(packet, args.reach, args.volume, count_scale=args.count_scale)
    print(report.table())
    outputs = []
    if args.out:
        dump_json(args.out, report.to_dict())
        outputs.append(str(args.out))
    return outputs, EXIT_OK if report.passed else EXIT_VALIDATION


COMMANDS = {
    "sample": cmd_sample,
    "descend": cmd_descend,
    "bench": cmd_bench,
    "validate-packet": cmd_validate_packet,
}


def _default_manifest(args) -> Path:
    if args.command == "bench":
        return Path(args.out_dir) / "manifest.json"
    out = getattr(args, "out", None)
    if out:
        return Path(f"{out}.manifest.json")
    return Path(f"ridgecraft-{args.command}.manifest.json")


def run(argv: Sequence[str]) -> int:
    argv = list(argv)
    args, extra = parse_args(argv)
    if args.command == "replay":
        data = load_json(args.manifest)
        return run(data["argv"])
    t0 = time.perf_counter()
    outputs, code = COMMANDS[args.command](args, extra)
    config = _resolved(args)
    if extra:
        config["overrides"] = extra
    manifest = RunManifest(
        command=args.command,
        argv=argv,
        config=config,
        seed=getattr(args, "seed", None),
        outputs=outputs,
        duration_seconds=time.perf_counter() - t0,
    )
    manifest.write(_manifest_path(args, _default_manifest(args)))
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NetInfeasible as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RidgecraftError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
