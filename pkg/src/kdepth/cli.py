"""Command-line entry point: ``kdepth {test,simulate,study,pipeline,gen-synthetic}``.

Exit codes: 0 success, 2 usage or input error, 1 internal error.  Config
files supply defaults; command-line flags override them.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import subprocess
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    Ensemble,
    load_ensemble,
    load_region_mask,
    subset_region,
    unit_grid,
    with_weighting,
    write_ensemble,
)
from .experiments import ConfigError, StudyConfig, default_threads, run_study, write_result
from .fieldsim import FieldSpec, MaternParams, sample_fields, sine_mean_field, sine_sd_field
from .pipeline import (
    PipelineConfigError,
    generate_synthetic_series,
    load_pipeline_config,
    run_pipeline,
    write_synthetic,
)
from .twosample import kd_test


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _commit() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


class RunManifest:
    """Replay record of one CLI run, written atomically next to its outputs."""

    def __init__(self, subcommand: str, path: Path | None):
        self.path = path
        self.data = {
            "subcommand": subcommand,
            "config": None,
            "seed": None,
            "version": __version__,
            "commit": _commit(),
            "started": _now(),
            "finished": None,
            "outputs": [],
            "error": None,
        }

    def write(self) -> None:
        if self.path is None:
            return
        self.data["finished"] = _now()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, default=str) + "\n")
        os.replace(tmp, self.path)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return data


def _load(path, fmt):
    try:
        return load_ensemble(path, fmt)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from None


# --- test ---------------------------------------------------------------------


def cmd_test(args) -> int:
    if args.region is not None and args.region_mask is None:
        raise InputError("--region requires --region-mask")
    if not 0.0 < args.alpha < 1.0:
        raise InputError(f"--alpha must lie in (0, 1), got {args.alpha}")
    fmt = "csv" if args.input_format == "csv" else None
    X = _load(args.x, fmt)
    Y = _load(args.y, fmt)
    if args.weights:
        X = Ensemble(with_weighting(X.grid, args.weights), X.members, X.label)
        Y = Ensemble(with_weighting(Y.grid, args.weights), Y.members, Y.label)
    if args.region_mask is not None:
        mask = load_region_mask(args.region_mask, X.grid)
        if args.region is not None:
            X = subset_region(X, mask, args.region)
            Y = subset_region(Y, mask, args.region)
    res = kd_test(X, Y, args.method, args.permutations, args.seed)
    out = res.as_dict()
    out.update(alpha=args.alpha, reject=bool(res.p_value < args.alpha), seed=args.seed,
               region=args.region)
    print(json.dumps(out))
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(out), lineterminator="\n")
        writer.writeheader()
        writer.writerow(out)
        path = Path(args.csv)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(buf.getvalue())
        os.replace(tmp, path)
    return 0


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args, manifest: RunManifest) -> int:
    if args.members < 2:
        raise InputError("--members must be >= 2")
    grid = unit_grid(*args.grid)
    matern = MaternParams(1.0, args.range, args.smoothness)
    mean, sd = args.mean, args.sigma
    if args.kappa is not None:
        if args.component == "mean":
            mean = args.mean + sine_mean_field(grid, args.kappa)
        else:
            sd = args.sigma * sine_sd_field(grid, args.kappa)
    spec = FieldSpec(grid, matern, mean, sd, args.family, args.df, args.seed)
    ens = sample_fields(spec, args.members, label=args.label)
    write_ensemble(ens, args.output, args.format)
    manifest.data.update(
        config={k: v for k, v in vars(args).items() if k != "func"}, seed=args.seed,
        outputs=[str(args.output)],
    )
    return 0


# --- study --------------------------------------------------------------------


def cmd_study(args, manifest: RunManifest) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.sims is not None:
        raw["sims_per_cell"] = args.sims
    cfg = StudyConfig.from_dict(raw)
    manifest.data.update(config=cfg.to_dict(), seed=cfg.seed)
    result = run_study(cfg, threads=args.threads)
    out = Path(args.output_dir) if args.output_dir else Path(args.config).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    path = write_result(result, out / f"{Path(args.config).stem}.csv")
    manifest.data["outputs"] = [str(path)]
    manifest.data["runtime"] = result.runtime
    print(path)
    print(manifest.path)
    return 0


# --- pipeline -----------------------------------------------------------------


def cmd_pipeline(args, manifest: RunManifest) -> int:
    raw = _read_json(args.config)
    for key in ("method", "permutations", "seed", "weights"):
        v = getattr(args, key)
        if v is not None:
            raw[key] = v
    cfg = load_pipeline_config(raw)
    manifest.data.update(config=cfg, seed=cfg["seed"])
    base = Path(args.config).resolve().parent
    written = run_pipeline(cfg, base, manifest.path.parent)
    manifest.data["outputs"] = [str(p) for p in written]
    for p in written:
        print(p)
    print(manifest.path)
    return 0


def _pipeline_output_dir(args) -> Path:
    if args.output_dir:
        return Path(args.output_dir)
    try:
        raw = _read_json(args.config)
    except InputError:
        raw = {}
    base = Path(args.config).resolve().parent
    out = raw.get("output_dir") or "results"
    return base / (out if isinstance(out, str) else "results")


# --- gen-synthetic --------------------------------------------------------------


def cmd_gen_synthetic(args, manifest: RunManifest) -> int:
    synth = generate_synthetic_series(
        years=args.years, members=args.members, nlat=args.nlat, nlon=args.nlon,
        n_proxies=args.proxies, start_year=args.start_year, seed=args.seed,
    )
    written = write_synthetic(synth, args.output_dir, args.format)
    manifest.data.update(
        config={k: v for k, v in vars(args).items() if k != "func"}, seed=args.seed,
        outputs=[str(p) for p in written],
    )
    print(Path(args.output_dir) / "pipeline.json")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdepth", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="KD test of two ensemble files; JSON on stdout")
    t.add_argument("x", help="reference ensemble X")
    t.add_argument("y", help="ensemble Y")
    t.add_argument("--method", choices=["asymptotic", "permutation"], default="asymptotic")
    t.add_argument("--permutations", type=int, default=500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--region-mask")
    t.add_argument("--region", type=int)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--weights", choices=["uniform", "coslat"])
    t.add_argument("--format", dest="input_format", choices=["binary", "csv"],
                   help="input format (default: inferred from the extension)")
    t.add_argument("--csv", help="also write the result as a one-row CSV")
    t.set_defaults(func=cmd_test, manifest=False)

    s = sub.add_parser("simulate", help="draw a Matérn (or t-process) ensemble")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--grid", type=int, nargs=2, default=[32, 32], metavar=("NX", "NY"))
    s.add_argument("--members", type=int, default=100)
    s.add_argument("--range", type=float, default=0.4)
    s.add_argument("--smoothness", type=float, default=1.0)
    s.add_argument("--mean", type=float, default=0.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--kappa", type=float, help="add a sine-product pattern of this amplitude")
    s.add_argument("--component", choices=["mean", "sd"], default="sd")
    s.add_argument("--family", choices=["gaussian", "student_t"], default="gaussian")
    s.add_argument("--df", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label", default="")
    s.add_argument("--format", choices=["binary", "csv"], default="binary")
    s.set_defaults(func=cmd_simulate, manifest=True)

    st = sub.add_parser("study", help="run a size/power/convergence study from a JSON config")
    st.add_argument("config")
    st.add_argument("--output-dir")
    st.add_argument("--seed", type=int, help="override the config seed")
    st.add_argument("--sims", type=int, help="override sims_per_cell")
    st.set_defaults(func=cmd_study, manifest=True)

    pl = sub.add_parser("pipeline", help="background-vs-analysis series run from a JSON config")
    pl.add_argument("config")
    pl.add_argument("--output-dir")
    pl.add_argument("--method", choices=["asymptotic", "permutation"])
    pl.add_argument("--permutations", type=int)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--weights", choices=["uniform", "coslat"])
    pl.set_defaults(func=cmd_pipeline, manifest=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic reconstruction series")
    g.add_argument("--output-dir", required=True)
    g.add_argument("--years", type=int, default=50)
    g.add_argument("--members", type=int, default=50)
    g.add_argument("--nlat", type=int, default=24)
    g.add_argument("--nlon", type=int, default=48)
    g.add_argument("--proxies", type=int, default=60)
    g.add_argument("--start-year", type=int, default=850)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--format", choices=["binary", "csv"], default="binary")
    g.set_defaults(func=cmd_gen_synthetic, manifest=True)

    for sp in (t, s, st, pl, g):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker process cap (default: $KDEPTH_THREADS or all cores)")
    return p


def _manifest_path(args) -> Path | None:
    if not args.manifest:
        return None
    if args.command == "simulate":
        return Path(str(args.output) + ".manifest.json")
    if args.command == "study":
        out = Path(args.output_dir) if args.output_dir else Path(args.config).resolve().parent
        return out / f"{Path(args.config).stem}.manifest.json"
    if args.command == "pipeline":
        return _pipeline_output_dir(args) / "manifest.json"
    return Path(args.output_dir) / "manifest.json"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    manifest = RunManifest(args.command, _manifest_path(args))
    try:
        code = args.func(args, manifest) if args.manifest else args.func(args)
    except (InputError, ConfigError, PipelineConfigError, ValueError, OSError) as exc:
        # ValueError covers every library validation failure (grid mismatch,
        # malformed files, contract floors); all are input errors here
        msg = str(exc) if not isinstance(exc, OSError) or not exc.filename else \
            f"{exc.filename}: {exc.strerror}"
        print(f"error: {msg}", file=sys.stderr)
        manifest.data["error"] = msg
        _safe_write(manifest)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        traceback.print_exc()
        manifest.data["error"] = f"internal error: {exc!r}"
        _safe_write(manifest)
        return 1
    manifest.write()
    return code


def _safe_write(manifest: RunManifest) -> None:
    try:
        manifest.write()
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
