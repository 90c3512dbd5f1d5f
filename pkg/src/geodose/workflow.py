"""End-to-end steps shared by the command line and scripted runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .config import FieldConfig, RunConfig
from .grid import GridSpec, build_grid
from .inference import (
    FieldSpec,
    FitError,
    FitSettings,
    ModelFit,
    ModelSpec,
    design_rows,
    fit,
    predict_cached,
    predict_points,
)
from .mesh import TriMesh, build_mesh
from .pipeline import PreparedData, join_covariates, prepare, read_covariates
from .validation import (
    BlockScheme,
    CvReport,
    RandomScheme,
    assign_folds,
    r_squared,
    score,
)

log = logging.getLogger(__name__)

WARM_STEP = 0.2


def mesh_for(domain, fc: FieldConfig, scale: float = 1.0, cache: dict | None = None) -> TriMesh:
    ms = fc.mesh.scaled(scale) if scale != 1.0 else fc.mesh
    key = (domain.wkt, ms, fc.extension())
    if cache is not None and key in cache:
        return cache[key]
    m = build_mesh(domain, ms.min_edge, ms.max_edge, ms.min_angle, fc.extension(), ms.coarsening)
    if cache is not None:
        cache[key] = m
    return m


def load_data(cfg: RunConfig, variant: str, k: int | None = None) -> PreparedData:
    intercept_only = variant == "spatial" or not cfg.use_covariates
    raster = None
    if not intercept_only:
        raster = read_covariates(cfg.covariate_paths, cfg.rainfall_scale)
    return prepare(cfg.measurements, cfg.exclusion, k or cfg.thin_k, raster, cfg.encoder, intercept_only)


def model_spec(cfg: RunConfig, data: PreparedData, variant: str, meshes) -> ModelSpec:
    fcs = cfg.fields_for(variant)
    fields = tuple(FieldSpec(m, fc.prior, f"u{j + 1}") for j, (m, fc) in enumerate(zip(meshes, fcs)))
    return ModelSpec(data.X, fields, cfg.noise, cfg.beta_precision, tuple(data.columns), variant)


def meshes_for(cfg: RunConfig, variant: str, scale: float = 1.0, cache=None):
    return tuple(mesh_for(cfg.domain, fc, scale, cache) for fc in cfg.fields_for(variant))


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


def cross_validate(
    data: PreparedData,
    variant: str,
    meshes,
    fields_cfg,
    scheme,
    settings: FitSettings,
    noise=None,
    beta_precision: float = 0.001,
    include_noise: bool = True,
) -> CvReport:
    """Refit on each training split and score on the held-out records.

    Folds after the first start the optimizer at the previous fold's mode.
    Design columns that are all zero in a training split are dropped for that
    split and held-out records using them are skipped.
    """
    from .priors import NoisePrior

    noise = noise or NoisePrior()
    folds = assign_folds(data.coords, scheme)
    name = "random" if isinstance(scheme, RandomScheme) else "block"
    report = CvReport(variant, name)
    warm = None
    coords, y, X = data.coords, data.y, data.X
    for f, (tr, va) in enumerate(folds.splits()):
        keep = np.any(X[tr] != 0, axis=0)
        usable = np.all(X[va][:, ~keep] == 0, axis=1)
        va = va[usable]
        fields = tuple(FieldSpec(m, fc.prior, f"u{j + 1}") for j, (m, fc) in enumerate(zip(meshes, fields_cfg)))
        cols = tuple(c for c, k in zip(data.columns, keep) if k)
        spec = ModelSpec(X[tr][:, keep], fields, noise, beta_precision, cols, variant)
        B_val, inside = design_rows(spec, coords[va], X[va][:, keep])
        if not inside.all():
            report.failures[f] = "validation records outside the mesh"
            continue
        st = settings if warm is None else replace(settings, initial=list(warm), initial_step=WARM_STEP)
        try:
            res = fit(spec, y[tr], coords[tr], st, targets=B_val)
        except (FitError, np.linalg.LinAlgError) as exc:
            log.error("fold %d of %s/%s failed: %s", f, variant, name, exc)
            report.failures[f] = str(exc)
            continue
        warm = res.mode
        m, s = predict_cached(res, include_noise=include_noise)
        report.add(f, score(m, s, y[va]))
    return report


def cv_table(reports) -> pd.DataFrame:
    """One row per model with aggregate scores per scheme, like a model-comparison table."""
    rows = {}
    for r in reports:
        a = r.aggregate()
        row = rows.setdefault(r.model, {"model": r.model})
        row.update({f"{r.scheme}_rmse": a.rmse, f"{r.scheme}_r2": a.r2, f"{r.scheme}_crps": a.crps})
        if r.partial:
            row[f"{r.scheme}_partial"] = True
    return pd.DataFrame(list(rows.values()))


def run_cv(cfg: RunConfig, mesh_cache=None) -> list[CvReport]:
    schemes = []
    if cfg.cv_scheme in ("random", "both"):
        schemes.append(RandomScheme(cfg.cv_train_fraction, cfg.stage_seed("cv-random")))
    if cfg.cv_scheme in ("block", "both"):
        schemes.append(BlockScheme(cfg.cv_block_side, cfg.cv_folds, cfg.stage_seed("cv-block")))
    reports = []
    for variant in cfg.cv_models:
        data = load_data(cfg, variant)
        meshes = meshes_for(cfg, variant, cache=mesh_cache)
        for sch in schemes:
            reports.append(
                cross_validate(
                    data, variant, meshes, cfg.fields_for(variant), sch, cfg.fit, cfg.noise,
                    cfg.beta_precision, cfg.cv_include_noise,
                )
            )
    return reports


# --------------------------------------------------------------------------
# fitting and prediction
# --------------------------------------------------------------------------


def run_fit(cfg: RunConfig, variant: str | None = None, k: int | None = None, mesh_scale: float = 1.0, mesh_cache=None):
    variant = variant or cfg.variant
    data = load_data(cfg, variant, k)
    meshes = meshes_for(cfg, variant, mesh_scale, mesh_cache)
    spec = model_spec(cfg, data, variant, meshes)
    return fit(spec, data.y, data.coords, cfg.fit), data


@dataclass
class GridPrediction:
    grid: GridSpec
    points: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    mask: np.ndarray
    dose: np.ndarray
    info: dict


def grid_covariates(cfg: RunConfig, fit_: ModelFit, points) -> tuple[np.ndarray, np.ndarray]:
    """Design rows for grid cells matching the fit's columns, and a validity mask."""
    cols = list(fit_.spec.covariate_names)
    if cols == ["intercept"]:
        return np.ones((len(points), 1)), np.ones(len(points), dtype=bool)
    raster = read_covariates(cfg.covariate_paths, cfg.rainfall_scale)
    Xfull, ok = join_covariates(points, raster, cfg.encoder)
    names = cfg.encoder.columns
    idx = [names.index(c) for c in cols]
    dropped = [j for j in range(len(names)) if j not in idx]
    if dropped:
        ok &= np.all(np.nan_to_num(Xfull[:, dropped]) == 0, axis=1)
    return Xfull[:, idx], ok


def predict_grid(
    cfg: RunConfig, fit_: ModelFit, cell: float | None = None, seed: int | None = None, variance: str | None = None
) -> GridPrediction:
    grid, pts, inside = build_grid(cfg.domain, cell or cfg.cell)
    X, ok = grid_covariates(cfg, fit_, pts)
    ok &= inside
    mean = np.full(len(pts), np.nan)
    sd = np.full(len(pts), np.nan)
    info = {}
    if ok.any():
        m, s, hull, info = predict_points(
            fit_, pts[ok], X[ok], variance=variance or cfg.variance, n_variance_samples=cfg.variance_samples,
            seed=cfg.stage_seed("predict") if seed is None else seed,
        )
        idx = np.nonzero(ok)[0]
        ok[idx[~hull]] = False
        mean[idx], sd[idx] = m, s
    if cfg.backtransform == "median":
        dose = np.exp(mean)
    else:
        dose = np.exp(mean + 0.5 * sd**2)
    info = dict(info, backtransform=cfg.backtransform)
    return GridPrediction(grid, pts, mean, sd, ok, dose, info)


def dose_histogram(dose, bins: int) -> pd.DataFrame:
    """Fraction of (equal-area) grid cells per dose-rate bin."""
    d = np.asarray(dose, dtype=float)
    d = d[np.isfinite(d)]
    counts, edges = np.histogram(d, bins=bins)
    mass = counts / max(counts.sum(), 1)
    return pd.DataFrame({"dose_lo": edges[:-1], "dose_hi": edges[1:], "cells": counts, "mass": mass})


# --------------------------------------------------------------------------
# sensitivity
# --------------------------------------------------------------------------


def run_sensitivity(cfg: RunConfig, cell: float | None = None, mesh_cache=None):
    """Refit with alternative thinning and mesh density; compare grid means to the base run.

    Returns (r2 table, hyperparameter table).
    """
    runs = [("base", cfg.thin_k, 1.0)]
    runs += [(f"thin{k}", k, 1.0) for k in cfg.sens_thin]
    runs += [(f"mesh{s:g}", cfg.thin_k, s) for s in cfg.sens_mesh_scale]
    means = {}
    hyper = {}
    failures = {}
    for label, k, scale in runs:
        try:
            res, _ = run_fit(cfg, k=k, mesh_scale=scale, mesh_cache=mesh_cache)
            gp = predict_grid(cfg, res, cell=cell, variance="none")
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            if label == "base":
                raise
            log.error("sensitivity run %s failed: %s", label, exc)
            failures[label] = str(exc)
            continue
        means[label] = (gp.mean, gp.mask)
        hyper[label] = {r["parameter"]: r["mean"] for r in res.hyper_summary()}
        hyper[label]["mesh_nodes"] = sum(f.mesh.n_nodes for f in res.spec.fields)
        hyper[label]["n_obs"] = res.spec.n_obs
    base_mean, base_mask = means["base"]
    rows = []
    for label, k, scale in runs:
        if label in failures:
            rows.append({"run": label, "thin_k": k, "mesh_scale": scale, "r2": np.nan, "status": "failed"})
            continue
        m, mask = means[label]
        both = mask & base_mask
        rows.append({"run": label, "thin_k": k, "mesh_scale": scale, "r2": r_squared(m[both], base_mean[both]), "status": "ok"})
    return pd.DataFrame(rows), pd.DataFrame(hyper)
