"""``loadanon`` command-line entry point.

Exit statuses: 0 ok, 2 usage, 3 input/output, 4 domain, 5 config schema.
Every command writes a run manifest next to its primary output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import pandas as pd
from threadpoolctl import threadpool_limits

from . import __version__
from .backtest import config_from_dict, default_k_ladder, run_experiment
from .errors import (
    AllSeriesDropped, ConfigError, DuplicateReading, EmptyInput, LoadAnonError, MissingHeader,
    NoParseableRows, OffGrid,
)
from .ingest import (
    LCL_ID, LCL_TIME, LCL_VALUE, RNG_NAME, GapPolicy, SynthConfig, parse_lcl_csv, read_wide_csv,
    regularize, synth_panel, write_wide_csv,
)
from .mdav import anonymize, write_assignment_csv, write_centroids_csv
from .privacy import privacy_sweep

log = logging.getLogger("loadanon")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DOMAIN, EXIT_CONFIG = 0, 2, 3, 4, 5

# errors that mean "the input file is unreadable", as opposed to bad parameters
_READ_ERRORS = (MissingHeader, NoParseableRows, OffGrid, DuplicateReading, EmptyInput,
                pd.errors.ParserError, UnicodeDecodeError)

_SYNTH_FLAGS = {
    "daily_amplitude": "--daily-amplitude",
    "weekly_amplitude": "--weekly-amplitude",
    "noise_sd": "--noise-sd",
    "spike_prob": "--spike-prob",
    "spike_scale": "--spike-scale",
    "base_load": "--base-load",
    "amplitude_jitter": "--amplitude-jitter",
    "phase_jitter": "--phase-jitter",
}


class InputFailure(Exception):
    """An input file could not be read or parsed."""


class FlagError(LoadAnonError):
    """A flag value is well-formed but outside its domain."""


# ---------------------------------------------------------------- helpers


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _canonical_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return "sha256:" + hashlib.sha256(text.encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


class Run:
    """Collects what goes into a run manifest while a command executes."""

    def __init__(self, command: str, parameters: dict, seed=None):
        self.command = command
        self.parameters = parameters
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = _now()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = _sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = _sha256_file(path)

    def write_manifest(self, path) -> None:
        manifest = {
            "tool": "loadanon",
            "version": __version__,
            "command": self.command,
            "parameters": self.parameters,
            "config_hash": _canonical_hash({"command": self.command, **self.parameters}),
            "seed": self.seed,
            "rng": RNG_NAME,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timestamps": {"started": self.started, "finished": _now()},
        }
        _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_path(args, primary) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")


def _gap_policy(args) -> GapPolicy:
    return GapPolicy(args.gap_policy, args.max_gap)


def load_panel(path, fmt: str = "auto", id_col=LCL_ID, time_col=LCL_TIME, value_col=LCL_VALUE,
               policy: GapPolicy = GapPolicy()):
    """Read a wide panel or a long LCL extract; ``auto`` looks at the header."""
    try:
        if fmt == "auto":
            with open(path, newline="") as fh:
                header = fh.readline()
            fmt = "wide" if header.split(",", 1)[0].strip().strip('"') == "timestamp" else "lcl"
        if fmt == "wide":
            return read_wide_csv(path)
        return regularize(parse_lcl_csv(path, id_col, time_col, value_col), policy)
    except OSError as exc:
        raise InputFailure(f"cannot read {path}: {exc.strerror or exc}") from None
    except AllSeriesDropped:
        raise
    except _READ_ERRORS as exc:
        raise InputFailure(f"cannot parse {path}: {exc}") from None


def _read_input(args, run: Run):
    panel = load_panel(args.input, args.input_format, args.id_col, args.time_col, args.value_col,
                       _gap_policy(args))
    run.add_input(args.input)
    return panel


def _threads(args):
    return threadpool_limits(args.workers) if args.workers > 0 else nullcontext()


def _companion(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_suffix(suffix) if p.suffix and p.suffix != suffix else Path(f"{out}{suffix}")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    knobs = {name: getattr(args, name) for name in _SYNTH_FLAGS if getattr(args, name) is not None}
    if args.start is not None:
        knobs["start"] = args.start
    try:
        config = SynthConfig(n_households=args.households, days=args.days, seed=args.seed, **knobs)
    except LoadAnonError as exc:
        msg = str(exc).replace("n_households", "--households").replace("days", "--days")
        for name, flag in _SYNTH_FLAGS.items():
            msg = msg.replace(name, flag)
        raise FlagError(msg) from None
    run = Run("synth", asdict(config), seed=args.seed)
    panel = synth_panel(config)
    write_wide_csv(panel, args.out)
    run.add_output(args.out)
    run.write_manifest(_manifest_path(args, args.out))
    return EXIT_OK


def cmd_anonymize(args) -> int:
    if args.k < 1:
        raise FlagError(f"--k must be a positive integer, got {args.k}")
    run = Run("anonymize", {"k": args.k, "gap_policy": args.gap_policy, "max_gap": args.max_gap})
    panel = _read_input(args, run)
    with _threads(args):
        anon = anonymize(panel, args.k)
    write_assignment_csv(anon.assignment, args.out_assignments)
    write_centroids_csv(anon, args.out_centroids)
    run.add_output(args.out_assignments)
    run.add_output(args.out_centroids)
    run.write_manifest(_manifest_path(args, args.out_assignments))
    return EXIT_OK


def _metrics_csv(obj: dict) -> str:
    lines = ["k,sse,il,volatility_mean,volatility_sd"]
    for e in obj["levels"]:
        lines.append(",".join(repr(e[c]) for c in ("k", "sse", "il", "volatility_mean", "volatility_sd")))
    return "\n".join(lines) + "\n"


def cmd_metrics(args) -> int:
    if args.replicates < 1:
        raise FlagError(f"--replicates must be >= 1, got {args.replicates}")
    if any(k < 1 for k in args.k_ladder):
        raise FlagError(f"--k-ladder values must be >= 1, got {args.k_ladder}")
    if args.sample_size is not None and args.sample_size < 1:
        raise FlagError(f"--sample-size must be >= 1, got {args.sample_size}")
    params = {"k_ladder": args.k_ladder, "replicates": args.replicates, "seed": args.seed,
              "sample_size": args.sample_size, "gap_policy": args.gap_policy, "max_gap": args.max_gap}
    run = Run("metrics", params, seed=args.seed)
    panel = _read_input(args, run)
    with _threads(args):
        result = privacy_sweep(panel, args.k_ladder, args.replicates, args.seed, args.sample_size)
    obj = result.to_json_obj()
    csv_path = args.out_csv or _companion(args.out, ".csv")
    _write_text(args.out, json.dumps(obj, indent=2) + "\n")
    _write_text(csv_path, _metrics_csv(obj))
    run.add_output(args.out)
    run.add_output(csv_path)
    run.write_manifest(_manifest_path(args, args.out))
    return EXIT_OK


def _backtest_panel(config, args, run: Run):
    inp = config.input
    if "synthetic" in inp:
        knobs = dict(inp["synthetic"])
        for key in ("n_households", "days", "seed"):
            if key in knobs:
                knobs[key] = int(knobs[key])
        try:
            return synth_panel(SynthConfig(**knobs))
        except (LoadAnonError, TypeError) as exc:
            raise ConfigError(str(exc), ".input.synthetic") from None
    path = Path(inp["panel"])
    if not path.is_absolute():
        path = Path(args.config).parent / path
    panel = load_panel(path, inp.get("format", "auto"), args.id_col, args.time_col, args.value_col,
                       _gap_policy(args))
    run.add_input(path)
    return panel


def cmd_backtest(args) -> int:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputFailure(f"cannot read {args.config}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", ".") from None
    config = config_from_dict(raw)
    run = Run("backtest", raw, seed=config.seed)
    run.add_input(args.config)
    panel = _backtest_panel(config, args, run)
    report = run_experiment(config, panel, workers=args.workers)
    for failure in report.failures:
        log.warning("cell k=%s model=%s window=%s repeat=%s failed: %s", failure["k"],
                    failure["model"], failure["window"], failure["repeat"], failure["error"])
    csv_path = args.out_csv or _companion(args.out, ".csv")
    _write_text(args.out, report.to_json())
    _write_text(csv_path, report.to_csv())
    run.add_output(args.out)
    run.add_output(csv_path)
    run.write_manifest(_manifest_path(args, args.out))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _ladder(text: str) -> list[int]:
    if text.strip() == "default":
        return default_k_ladder()
    try:
        ladder = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'default' or comma-separated integers, got {text!r}")
    if not ladder:
        raise argparse.ArgumentTypeError("empty ladder")
    return ladder


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input parsing")
    g.add_argument("--input-format", choices=("auto", "wide", "lcl"), default="auto",
                   help="wide panel CSV, long LCL extract, or detect from the header (default: auto)")
    g.add_argument("--id-col", default=LCL_ID, help=f"LCL household id column (default: {LCL_ID!r})")
    g.add_argument("--time-col", default=LCL_TIME, help=f"LCL timestamp column (default: {LCL_TIME!r})")
    g.add_argument("--value-col", default=LCL_VALUE, help=f"LCL energy column (default: {LCL_VALUE!r})")
    g.add_argument("--gap-policy", choices=("drop-series", "fill-zero", "linear-interpolate"),
                   default="linear-interpolate", help="how missing readings are resolved (default: %(default)s)")
    g.add_argument("--max-gap", type=int, default=4,
                   help="longest interpolated gap in half-hours (default: %(default)s)")


def _add_common(p: argparse.ArgumentParser, workers_help: str) -> None:
    p.add_argument("--workers", type=int, default=1, help=workers_help)
    p.add_argument("--manifest", help="run manifest path (default: <primary output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loadanon",
        description="Microaggregate load-profile panels and measure privacy and forecast utility.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic household panel")
    p.add_argument("--households", type=int, required=True, help="number of households")
    p.add_argument("--days", type=int, required=True, help="length in days (48 half-hours each)")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--out", required=True, help="wide panel CSV to write")
    p.add_argument("--start", help="first timestamp, ISO-8601 UTC (default: 2013-01-01T00:00:00)")
    defaults = SynthConfig()
    for f in fields(SynthConfig):
        if f.name in _SYNTH_FLAGS:
            p.add_argument(_SYNTH_FLAGS[f.name], dest=f.name, type=float,
                           help=f"generator knob (default: {getattr(defaults, f.name)})")
    _add_common(p, "accepted for symmetry; generation is single-threaded")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anonymize", help="MDAV-microaggregate a panel at one k")
    p.add_argument("--input", required=True, help="panel CSV (wide or LCL long format)")
    p.add_argument("--k", type=int, required=True, help="minimum group size")
    p.add_argument("--out-assignments", required=True, help="series_id,group_index CSV to write")
    p.add_argument("--out-centroids", required=True, help="wide centroid panel CSV to write")
    _add_input_flags(p)
    _add_common(p, "BLAS thread cap (0 = library default)")
    p.set_defaults(func=cmd_anonymize)

    p = sub.add_parser("metrics", help="privacy and utility metrics over a k ladder, plus decay fit")
    p.add_argument("--input", required=True, help="panel CSV (wide or LCL long format)")
    p.add_argument("--k-ladder", type=_ladder, default=default_k_ladder(),
                   help="comma-separated k values or 'default' (default: %(default)s)")
    p.add_argument("--replicates", type=int, default=10, help="replicates per k (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="root seed for household sampling (default: 0)")
    p.add_argument("--sample-size", type=int,
                   help="households drawn per replicate (default: use every household)")
    p.add_argument("--out", required=True, help="JSON report to write")
    p.add_argument("--out-csv", help="companion CSV (default: --out with a .csv suffix)")
    _add_input_flags(p)
    _add_common(p, "BLAS thread cap (0 = library default)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("backtest", help="run a forecasting backtest described by a JSON config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="JSON report to write")
    p.add_argument("--out-csv", help="long-form CSV (default: --out with a .csv suffix)")
    _add_input_flags(p)
    _add_common(p, "worker processes for model fits (0 = one per CPU, default: 1)")
    p.set_defaults(func=cmd_backtest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="loadanon: %(levelname)s: %(message)s",
                        level=logging.INFO if args.verbose else logging.WARNING, force=True)
    if args.workers < 0:
        parser.error("--workers must be >= 0")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"loadanon: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputFailure as exc:
        print(f"loadanon: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"loadanon: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (LoadAnonError, ValueError) as exc:
        print(f"loadanon: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
