"""Command-line interface: simulate | fit | cv | predict | variogram | sensitivity."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__, workflow
from .config import ConfigError, RunConfig, effective, file_sha256, load_config
from .grid import RasterError
from .inference import (
    DesignError,
    FactorizationError,
    FitError,
    FitFormatError,
    load_fit,
    save_fit,
)
from .mesh import MeshError, OutsideMeshError
from .pipeline import DataError
from .validation import (
    FoldError,
    empirical_variogram,
    residual_variogram,
    track_variogram,
)

log = logging.getLogger("geodose")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

FLOAT_FMT = "%.10g"


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------


class RunDir:
    """Output directory of one command with a manifest of inputs and outputs."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.path = Path(cfg.output_dir) / command
        self.path.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def csv(self, df: pd.DataFrame, name: str) -> Path:
        p = self.file(name)
        df.to_csv(p, index=False, float_format=FLOAT_FMT, lineterminator="\n")
        return p

    def text(self, body: str, name: str) -> Path:
        p = self.file(name)
        p.write_text(body)
        return p

    def finish(self, extra: dict | None = None) -> None:
        self.text(effective(self.cfg), "config.effective.ini")
        base = self.cfg.path.parent if self.cfg.path else Path(".")

        def rel(p):
            try:
                return str(Path(p).resolve().relative_to(base.resolve()))
            except ValueError:
                return str(p)

        manifest = {
            "command": self.command,
            "seed": self.cfg.seed,
            "versions": {"geodose": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__},
            "inputs": [{"path": rel(p), "sha256": file_sha256(p)} for p in self.cfg.input_files()],
            "outputs": [{"path": n, "sha256": file_sha256(self.path / n)} for n in sorted(set(self.outputs))],
        }
        if extra:
            manifest.update(extra)
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _ms(mean, sd, digits=3) -> str:
    return f"{mean:.{digits}f}({sd:.{digits}f})"


def fit_report(res, counts: dict) -> str:
    lines = [f"model: {res.spec.variant}", f"observations: {res.spec.n_obs}"]
    lines += [f"{k}: {v}" for k, v in counts.items()]
    lines += [f"hyperparameter configurations: {res.n_configs}"]
    if res.hessian_fallback:
        lines.append("warning: near-singular Hessian, fixed grid steps used")
    lines += ["", "hyperparameters", f"{'parameter':<16}{'mean':>12}{'sd':>12}"]
    for r in res.hyper_summary():
        lines.append(f"{r['parameter']:<16}{r['mean']:>12.4g}{r['sd']:>12.4g}")
    lines += ["", "coefficients", f"{'coefficient':<76}mean(sd)"]
    for r in res.coefficient_summary():
        lines.append(f"{r['coefficient']:<76}{_ms(r['mean'], r['sd'])}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .simulate import FixtureSettings, write_fixture

    s = FixtureSettings(seed=args.seed) if args.seed is not None else FixtureSettings()
    paths = write_fixture(args.out, s, args.variant)
    print(f"wrote fixture to {args.out} ({paths['config'].name})")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    rd = RunDir(cfg, "fit")
    res, data = workflow.run_fit(cfg)
    save_fit(res, rd.file("fit.npz"))
    rd.csv(pd.DataFrame(res.hyper_summary()), "hyperparameters.csv")
    rd.csv(pd.DataFrame(res.coefficient_summary()), "coefficients.csv")
    rd.text(fit_report(res, data.counts), "fit_report.txt")
    rd.finish({"counts": data.counts})
    print(fit_report(res, data.counts), end="")
    return EXIT_OK


def cmd_cv(cfg: RunConfig, args) -> int:
    rd = RunDir(cfg, "cv")
    reports = workflow.run_cv(cfg)
    per_fold = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    table = workflow.cv_table(reports)
    rd.csv(per_fold, "cv_folds.csv")
    rd.csv(table, "cv_table.csv")
    rd.finish({"partial": [f"{r.model}/{r.scheme}" for r in reports if r.partial]})
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4g}"))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    fit_path = Path(args.fit) if args.fit else Path(cfg.output_dir) / "fit" / "fit.npz"
    if not fit_path.is_file():
        raise ConfigError(f"fit file not found: {fit_path} (run 'fit' first or pass --fit)")
    res = load_fit(fit_path)
    rd = RunDir(cfg, "predict")
    gp = workflow.predict_grid(cfg, res)
    ok = gp.mask
    grid_df = pd.DataFrame(
        {"x": gp.points[ok, 0], "y": gp.points[ok, 1], "mean_log": gp.mean[ok], "sd_log": gp.sd[ok], "dose_nsvh": gp.dose[ok]}
    )
    rd.csv(grid_df, "grid.csv")
    rd.text(_geojson(grid_df, gp.info), "grid.geojson")
    rd.csv(workflow.dose_histogram(gp.dose[ok], cfg.histogram_bins), "histogram.csv")
    rd.finish({"prediction": {k: v for k, v in gp.info.items()}, "cells": int(ok.sum()), "fit": str(fit_path)})
    print(f"{int(ok.sum())} cells predicted; outputs in {rd.path}")
    return EXIT_OK


def _geojson(df: pd.DataFrame, info: dict) -> str:
    feats = [
        {
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [float(r.x), float(r.y)]},
            "properties": {
                "mean_log": float(FLOAT_FMT % r.mean_log),
                "sd_log": float(FLOAT_FMT % r.sd_log),
                "dose_nsvh": float(FLOAT_FMT % r.dose_nsvh),
            },
        }
        for r in df.itertuples(index=False)
    ]
    return json.dumps({"type": "FeatureCollection", "properties": info, "features": feats}, separators=(",", ":")) + "\n"


def cmd_variogram(cfg: RunConfig, args) -> int:
    rd = RunDir(cfg, "variogram")
    data = workflow.load_data(cfg, "spatial", k=1)
    pts, y = data.coords, data.y
    kw = dict(bin_width=cfg.vario_bin, max_lag=cfg.vario_max_lag, subsample=cfg.vario_subsample,
              seed=cfg.stage_seed("variogram"), sectors=cfg.vario_sectors)
    v = empirical_variogram(pts, y, **kw)
    rd.csv(v.to_frame(), "variogram.csv")
    rd.text("".join(f"{a:.10g} {b:.10g}\n" for a, b in zip(v.lag, v.gamma)), "variogram.txt")
    if cfg.use_covariates and cfg.covariate_paths:
        cov = workflow.load_data(cfg, "mixed", k=1)
        rv = residual_variogram(cov.coords, cov.y, cov.X, **kw)
        rd.csv(rv.to_frame(), "residual_variogram.csv")
    tv = track_variogram(data.records, cfg.track_max_lag)
    rd.csv(tv.to_frame(), "track_variogram.csv")
    rd.text("".join(f"{a:.10g} {b:.10g}\n" for a, b in zip(tv.lag, tv.gamma)), "track_variogram.txt")
    rd.finish()
    print(f"variograms written to {rd.path}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, args) -> int:
    rd = RunDir(cfg, "sensitivity")
    r2, hyper = workflow.run_sensitivity(cfg)
    rd.csv(r2, "sensitivity_r2.csv")
    hyper.index.name = "parameter"
    p = rd.file("sensitivity_hyper.csv")
    hyper.to_csv(p, float_format=FLOAT_FMT, lineterminator="\n")
    rd.finish()
    print(r2.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "predict": cmd_predict,
    "variogram": cmd_variogram,
    "sensitivity": cmd_sensitivity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"geodose {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic survey fixture with a run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default="mixed", choices=["linear", "spatial", "mixed", "extended"])
    p.add_argument("--seed", type=int, default=None)

    for name, help_ in (
        ("fit", "ingest, clean, thin, join covariates and fit the configured model"),
        ("cv", "random and/or spatial-block cross-validation"),
        ("predict", "posterior grid surfaces from a saved fit"),
        ("variogram", "spatial, residual and along-track variograms"),
        ("sensitivity", "refit with other thinning and mesh density and compare"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="run config (INI)")
        p.add_argument("--output-dir", help="override [run] output_dir")
        p.add_argument("--measurements", help="override [data] measurements")
        if name == "predict":
            p.add_argument("--fit", help="saved fit (default: <output_dir>/fit/fit.npz)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        overrides = {"output_dir": args.output_dir, "measurements": args.measurements}
        cfg = load_config(args.config, {k: v for k, v in overrides.items() if v})
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RasterError, FoldError, DesignError, OutsideMeshError, MeshError, FitFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, FactorizationError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
