"""``t2pinn`` command line.

Subcommands: simulate, fit, generate, diff, score, export.

Exit codes: 0 success, 2 invalid input or configuration, 3 unreadable or
malformed file, 4 numerical failure (no voxel could be fitted).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import CONFIG_DIR_ENV, ConfigError, load_run_config, parse_run_config, resolve_config_path
from .formats import (
    FormatError,
    export_png,
    read_csv_series,
    read_field,
    read_map,
    read_series,
    status_to_text,
    write_field,
    write_map,
    write_series,
)
from .pipeline import MapKind, ParameterMap, build_mask, diff_map, generate_frames, map_lsq, map_pinn
from .signal import NoiseSpec, PhantomLayout, default_layout, make_phantom

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class NumericalFailure(RuntimeError):
    pass


def parse_times(text: str) -> list[float]:
    """``"10,20,30"`` or ``"start:stop:num"`` (inclusive, evenly spaced)."""
    text = text.strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ValueError
            start, stop, num = float(parts[0]), float(parts[1]), int(parts[2])
            if num < 1:
                raise ValueError
            return [float(v) for v in np.linspace(start, stop, num)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"--times: cannot parse {text!r}; use a comma list or start:stop:num") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _named(prefix: Path, suffix: str) -> Path:
    return prefix.with_name(prefix.name + suffix)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True))


# --------------------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    if args.config:
        path = resolve_config_path(args.config)
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"phantom config {path}: invalid JSON ({exc})") from None
        layout = PhantomLayout.from_dict(d)
    else:
        layout = default_layout()
    phantom = make_phantom(layout)
    times = parse_times(args.times) if args.times else list(layout.echo_times)
    noise = NoiseSpec(args.noise, args.sigma, args.seed)
    series = phantom.series(times, noise)
    out = Path(args.out)
    write_series(_named(out, ".series"), series)
    fg = phantom.foreground
    write_map(_named(out, ".t2true.map"), ParameterMap(phantom.t2, fg, MapKind.T2))
    write_map(_named(out, ".m0true.map"), ParameterMap(phantom.m0, fg, MapKind.M0))
    _emit({
        "series": str(_named(out, ".series")),
        "frames": len(times),
        "dims": list(layout.dims),
        "regions": len(layout.regions),
        "noise": {"kind": noise.kind.value, "sigma": noise.sigma, "seed": noise.seed},
    })
    return EXIT_OK


# --------------------------------------------------------------------------- fit


def _load_input_series(path: Path):
    if path.suffix.lower() == ".csv":
        return read_csv_series(path)
    return read_series(path)


def cmd_fit(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        series_path = Path(manifest["series"])
        if not series_path.is_absolute():
            series_path = Path(args.manifest).resolve().parent / series_path
        if _sha256(series_path) != manifest["series_sha256"]:
            raise FormatError(f"{series_path}: contents differ from the manifest's recorded checksum")
        run = parse_run_config(manifest["config"])
        run.defaulted = manifest.get("defaults_applied", [])
        method = manifest["method"]
    else:
        if args.series is None or args.method is None:
            raise ConfigError("fit: give a series path and --method, or --manifest")
        series_path = Path(args.series)
        run = load_run_config(args.config)
        method = args.method
        if args.seed is not None:
            run.train = replace(run.train, seed=args.seed)
    threads = args.threads if args.threads is not None else run.threads

    series = _load_input_series(series_path)
    if series.times.size < 2:
        raise ConfigError(f"{series_path}: need at least 2 echoes, got {series.times.size}")
    mask = build_mask(series, run.mask.threshold_frac)
    if not mask.any():
        raise NumericalFailure("mask is empty; nothing to fit")

    t0 = time.perf_counter()
    if method == "lsq":
        result = map_lsq(series, mask, run.lsq, threads=threads)
    elif method == "pinn":
        result = map_pinn(series, mask, None, run.weights, run.train, threads=threads)
    else:
        raise ConfigError(f"--method must be lsq or pinn, got {method!r}")
    wall = time.perf_counter() - t0

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = {
        "t2": str(_named(out, ".t2.map")),
        "m0": str(_named(out, ".m0.map")),
        "residual": str(_named(out, ".residual.map")),
        "status": str(_named(out, ".status.txt")),
    }
    write_map(outputs["t2"], result.t2)
    write_map(outputs["m0"], result.m0)
    write_map(outputs["residual"], result.residual)
    Path(outputs["status"]).write_text(status_to_text(result.status))
    if result.field is not None:
        outputs["field"] = str(_named(out, ".field"))
        write_field(outputs["field"], result.field)

    summary = result.summary()
    manifest = {
        "version": 1,
        "package_version": __version__,
        "command": "fit",
        "method": method,
        "series": str(series_path.resolve()),
        "series_sha256": _sha256(series_path),
        "config": run.to_dict(),
        "defaults_applied": run.defaulted,
        "threads": threads,
        "wall_time_s": wall,
        "summary": summary,
        "outputs": outputs,
    }
    outputs["manifest"] = str(_named(out, ".manifest.json"))
    Path(outputs["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _emit({"summary": summary, "outputs": outputs})
    if summary["voxels_fitted"] == 0:
        raise NumericalFailure("no voxel produced a valid fit")
    return EXIT_OK


# --------------------------------------------------------------------------- generate / diff / score / export


def cmd_generate(args) -> int:
    field = read_field(args.field)
    times = parse_times(args.times)
    series = generate_frames(field, times)
    write_series(args.out, series)
    _emit({"out": args.out, "frames": len(times), "voxels": len(field)})
    return EXIT_OK


def _stats(values: np.ndarray) -> dict:
    v = values[np.isfinite(values)]
    if not v.size:
        return {"n": 0, "max_abs": None, "mean": None, "median": None}
    return {"n": int(v.size), "max_abs": float(np.max(np.abs(v))), "mean": float(v.mean()), "median": float(np.median(v))}


def cmd_diff(args) -> int:
    a, b = read_map(args.a), read_map(args.b)
    d = diff_map(a, b)
    if args.out:
        write_map(args.out, d)
    _emit({"diff": _stats(d.masked())})
    return EXIT_OK


def score_against_truth(est: ParameterMap, truth: ParameterMap) -> dict:
    """Per-region statistics, a region being the voxels sharing one true value."""
    if est.dims != truth.dims:
        raise ValueError(f"map dims differ: {est.dims} vs {truth.dims}")
    regions = []
    for value in np.unique(truth.masked()):
        region = truth.mask & (truth.values == value)
        hit = region & est.mask
        entry = {"truth": float(value), "voxels": int(region.sum()), "fitted": int(hit.sum())}
        if hit.any() and value != 0:
            rel = est.values[hit] / value - 1.0
            entry["median_rel_error"] = float(np.median(rel))
            entry["median_abs_rel_error"] = float(np.median(np.abs(rel)))
        regions.append(entry)
    d = diff_map(est, truth)
    return {"regions": regions, "max_abs_diff": _stats(d.masked())["max_abs"]}


def cmd_score(args) -> int:
    _emit(score_against_truth(read_map(args.map), read_map(args.truth)))
    return EXIT_OK


def cmd_export(args) -> int:
    window = None
    if args.window:
        lo, hi = (float(v) for v in args.window.split(","))
        window = (lo, hi)
    export_png(args.out, read_map(args.map), window)
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="t2pinn",
        description="T2 mapping by least squares or a physics-informed network.",
        epilog=f"Relative --config paths are also looked up in ${CONFIG_DIR_ENV}.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic phantom series and its true maps")
    s.add_argument("--config", help="phantom layout JSON (default: 14-tube 64x64)")
    s.add_argument("--times", help="echo times in ms: comma list or start:stop:num")
    s.add_argument("--noise", default="gaussian", choices=["none", "gaussian", "rician"])
    s.add_argument("--sigma", type=float, default=0.0, help="noise std as a fraction of m0")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit T2/M0 maps")
    f.add_argument("series", nargs="?", help="series file (.csv for CSV import)")
    f.add_argument("--method", choices=["lsq", "pinn"])
    f.add_argument("--config", help="run configuration JSON")
    f.add_argument("--seed", type=int, help="overrides train.seed")
    f.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    f.add_argument("--manifest", help="re-run exactly as recorded in a manifest")
    f.add_argument("--out", required=True, help="output prefix")
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("generate", help="evaluate a trained field at new echo times")
    g.add_argument("field")
    g.add_argument("--times", required=True, help="comma list or start:stop:num, ms")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("diff", help="difference of two maps")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diff)

    c = sub.add_parser("score", help="per-region error of a map against a truth map")
    c.add_argument("map")
    c.add_argument("truth")
    c.set_defaults(func=cmd_score)

    e = sub.add_parser("export", help="8-bit grayscale PNG of a map")
    e.add_argument("map")
    e.add_argument("--out", required=True)
    e.add_argument("--window", help="lo,hi mapped to 0..255 (default: 1st..99th percentile)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"t2pinn: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"t2pinn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"t2pinn: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
