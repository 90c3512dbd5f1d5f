"""Run configuration: an INI file with one section per concern.

Relative paths resolve against the config file's directory.  ``effective()``
renders the config with every default filled in, which reproduces a run
exactly when fed back.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely import wkt
from shapely.errors import ShapelyError

from .inference import VARIANTS, FitSettings
from .pipeline import (
    LANDCOVER_LEVELS,
    LANDCOVER_REFERENCE,
    LITHOLOGY_LEVELS,
    TECTONIC_LEVELS,
    TECTONIC_REFERENCE,
    CovariateEncoder,
    ExclusionSpec,
)
from .priors import NoisePrior, PCPrior, default_field_prior, extended_field_priors


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MeshSettings:
    min_edge: float
    max_edge: float
    min_angle: float = 31.0
    extension: float | None = None
    coarsening: float = 2.0

    def scaled(self, factor: float) -> MeshSettings:
        return MeshSettings(self.min_edge * factor, self.max_edge * factor, self.min_angle, self.extension, self.coarsening)


@dataclass(frozen=True)
class FieldConfig:
    mesh: MeshSettings
    prior: PCPrior

    def extension(self) -> float:
        """Configured band width, else twice the prior-median range."""
        if self.mesh.extension is not None:
            return self.mesh.extension
        return 2.0 * self.prior.range_median()


DEFAULT_MESHES = {
    1: MeshSettings(3500.0, 5000.0, 31.0),
    2: MeshSettings(450.0, 650.0, 31.0),
}


@dataclass
class RunConfig:
    path: Path | None
    seed: int
    output_dir: Path
    threads: int
    crs: str
    measurements: Path
    thin_k: int
    use_covariates: bool
    covariate_paths: dict
    rainfall_scale: float
    encoder: CovariateEncoder
    exclusion: ExclusionSpec
    domain: object
    variant: str
    fields: tuple
    noise: NoisePrior
    beta_precision: float
    fit: FitSettings
    cv_scheme: str
    cv_folds: int
    cv_block_side: float
    cv_train_fraction: float
    cv_models: tuple
    cv_include_noise: bool
    cell: float
    backtransform: str
    variance: str
    variance_samples: int
    histogram_bins: int
    vario_bin: float
    vario_max_lag: float
    vario_subsample: int | None
    vario_sectors: int
    track_max_lag: int
    sens_thin: tuple
    sens_mesh_scale: tuple
    raw: dict = field(default_factory=dict)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def fields_for(self, variant: str) -> tuple:
        """Field configs used by a variant (the base config's when it matches)."""
        nf = {"linear": 0, "spatial": 1, "mixed": 1, "extended": 2}[variant]
        if nf == len(self.fields) and variant == self.variant:
            return self.fields
        if nf == 0:
            return ()
        base = {f"field{j + 1}": s for j, s in enumerate(self.raw.get("_fields", []))}
        if nf == 1:
            return (_field_from(base.get("field1", {}), 1, (default_field_prior(),)),)
        pri = extended_field_priors()
        return (
            _field_from(base.get("field1", {}), 1, pri),
            _field_from(base.get("field2", {}), 2, pri),
        )

    def input_files(self) -> list[Path]:
        files = [self.measurements] + [Path(p) for p in self.covariate_paths.values() if p]
        files += list(self.raw.get("_poly_files", []))
        if self.path is not None:
            files.insert(0, self.path)
        return files


def derive_seed(root: int, stage: str) -> int:
    """Independent per-stage seed derived from the root seed and a stage name."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _levels(text: str | None, default):
    if not text:
        return tuple(default)
    return tuple(s.strip() for s in text.split("|") if s.strip())


def _floats(text: str | None, default=()):
    if text is None or not text.strip():
        return tuple(default)
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _point_sources(text: str | None):
    if not text or not text.strip():
        return ()
    out = []
    for item in text.split(";"):
        if not item.strip():
            continue
        vals = item.split()
        if len(vals) != 3:
            raise ConfigError(f"point source must be 'x y radius', got {item.strip()!r}")
        out.append(tuple(float(v) for v in vals))
    return tuple(out)


def _poly_file(text: str, base: Path) -> Path | None:
    p = base / text.strip()
    return p if (len(text.strip()) < 256 and p.is_file()) else None


def _polygons(text: str, base: Path):
    """WKT polygon(s) inline or, if the value names a file, read from it."""
    p = _poly_file(text, base)
    src = p.read_text() if p is not None else text
    polys = []
    for line in src.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            g = wkt.loads(line)
        except (ShapelyError, ValueError) as exc:
            raise ConfigError(f"invalid WKT: {line[:60]}") from exc
        if g.geom_type == "Polygon":
            polys.append(g)
        elif g.geom_type == "MultiPolygon":
            polys.extend(g.geoms)
        else:
            raise ConfigError(f"expected polygon WKT, got {g.geom_type}")
    return polys


def _field_from(sec, j: int, priors) -> FieldConfig:
    d_mesh = DEFAULT_MESHES[j]
    d_prior = priors[j - 1]
    g = sec.get if hasattr(sec, "get") else (lambda k, fb=None: fb)

    def num(key, fb):
        v = g(key, None)
        return fb if v is None or str(v).strip() == "" else float(v)

    ext = g("extension", None)
    mesh = MeshSettings(
        num("min_edge", d_mesh.min_edge),
        num("max_edge", d_mesh.max_edge),
        num("min_angle", d_mesh.min_angle),
        None if ext is None or str(ext).strip() == "" else float(ext),
        num("coarsening", d_mesh.coarsening),
    )
    prior = PCPrior(
        num("range0", d_prior.range0),
        num("p_range_above", d_prior.p_range_above),
        num("sigma0", d_prior.sigma0),
        num("p_sigma_above", d_prior.p_sigma_above),
    )
    return FieldConfig(mesh, prior)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a run config; raises ConfigError before any data is read."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent
    try:
        return _build(cp, base, path, overrides or {})
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _sec(cp, name):
    return cp[name] if cp.has_section(name) else {}


def _get(sec, key, default=None):
    v = sec.get(key, None) if hasattr(sec, "get") else None
    if v is None or str(v).strip() == "":
        return default
    return str(v).strip()


def _bool(v, default):
    if v is None:
        return default
    s = str(v).strip().lower()
    if s in ("1", "yes", "true", "on"):
        return True
    if s in ("0", "no", "false", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _build(cp, base: Path, path: Path, overrides: dict) -> RunConfig:
    run, data, cov, exc, dom = (_sec(cp, s) for s in ("run", "data", "covariates", "exclusion", "domain"))
    model, cv, pred, vario, sens = (_sec(cp, s) for s in ("model", "cv", "predict", "variogram", "sensitivity"))

    seed = _get(run, "seed")
    if seed is None:
        raise ConfigError("[run] seed is mandatory")
    out = overrides.get("output_dir") or _get(run, "output_dir", "run")
    meas = overrides.get("measurements") or _get(data, "measurements")
    if meas is None:
        raise ConfigError("[data] measurements is required")
    meas = (base / meas) if not Path(meas).is_absolute() else Path(meas)
    if not meas.is_file():
        raise ConfigError(f"measurement file not found: {meas}")

    use_cov = _bool(_get(data, "covariates"), True)
    cov_paths = {}
    for k in ("lithology", "tectonic", "landcover", "rainfall"):
        v = _get(cov, k)
        if v is not None:
            p = base / v
            if not p.is_file():
                raise ConfigError(f"covariate raster not found: {p}")
            cov_paths[k] = p
    variant = _get(model, "variant", "mixed")
    if variant not in VARIANTS:
        raise ConfigError(f"[model] variant must be one of {VARIANTS}")
    if use_cov and variant != "spatial":
        missing = [k for k in ("lithology", "tectonic", "landcover") if k not in cov_paths]
        if missing:
            raise ConfigError(f"[covariates] missing raster paths: {missing}")
    encoder = CovariateEncoder(
        _levels(_get(cov, "lithology_levels"), LITHOLOGY_LEVELS),
        _levels(_get(cov, "tectonic_levels"), TECTONIC_LEVELS),
        _levels(_get(cov, "landcover_levels"), LANDCOVER_LEVELS),
        _get(cov, "tectonic_reference", TECTONIC_REFERENCE),
        _get(cov, "landcover_reference", LANDCOVER_REFERENCE),
        "rainfall" in cov_paths,
    )

    water = _polygons(_get(exc, "water"), base) if _get(exc, "water") else []
    exclusion = ExclusionSpec(_point_sources(_get(exc, "point_sources")), tuple(water))

    poly_txt = _get(dom, "polygon")
    if poly_txt is None:
        raise ConfigError("[domain] polygon is required")
    polys = _polygons(poly_txt, base)
    if len(polys) != 1:
        raise ConfigError("[domain] polygon must hold exactly one polygon")
    domain = polys[0]
    if not domain.is_valid or domain.area <= 0:
        raise ConfigError("[domain] polygon must be simple with positive area")

    n_fields = {"linear": 0, "spatial": 1, "mixed": 1, "extended": 2}[variant]
    priors = extended_field_priors() if n_fields == 2 else (default_field_prior(),)
    fsecs = []
    fields = []
    for j in range(1, 3):
        sec = _sec(cp, f"field{j}")
        fsecs.append(sec)
        if j <= n_fields:
            fields.append(_field_from(sec, j, priors))

    noise = NoisePrior(
        float(_get(model, "noise_shape", 1.0)),
        float(_get(model, "noise_scale", 5e-5)),
        _get(model, "noise_parametrization", "rate"),
    )
    prune = _get(model, "prune")
    fit = FitSettings(
        strategy=_get(model, "strategy", "grid"),
        grid_steps=int(_get(model, "grid_steps", 2)),
        step_scale=float(_get(model, "step_scale", 0.75)),
        prune=None if prune is None else float(prune),
        max_iter=int(_get(model, "max_iter", 3000)),
        n_threads=int(_get(run, "threads", 1)),
    )
    scheme = _get(cv, "scheme", "block")
    if scheme not in ("block", "random", "both"):
        raise ConfigError("[cv] scheme must be block, random or both")
    models = tuple(m.strip() for m in _get(cv, "models", variant).split(",") if m.strip())
    for m in models:
        if m not in VARIANTS:
            raise ConfigError(f"[cv] unknown model {m!r}")
    bt = _get(pred, "backtransform", "median")
    if bt not in ("median", "mean"):
        raise ConfigError("[predict] backtransform must be median or mean")
    var = _get(pred, "variance", "exact")
    if var not in ("exact", "sample"):
        raise ConfigError("[predict] variance must be exact or sample")
    sub = _get(vario, "subsample", 100000)
    cfg = RunConfig(
        path=path,
        seed=int(seed),
        output_dir=(base / out) if not Path(out).is_absolute() else Path(out),
        threads=int(_get(run, "threads", 1)),
        crs=_get(run, "crs", "unspecified"),
        measurements=meas,
        thin_k=int(_get(data, "thin_k", 15)),
        use_covariates=use_cov,
        covariate_paths=cov_paths,
        rainfall_scale=float(_get(cov, "rainfall_scale", 1.0)),
        encoder=encoder,
        exclusion=exclusion,
        domain=domain,
        variant=variant,
        fields=tuple(fields),
        noise=noise,
        beta_precision=float(_get(model, "beta_precision", 0.001)),
        fit=fit,
        cv_scheme=scheme,
        cv_folds=int(_get(cv, "folds", 4)),
        cv_block_side=float(_get(cv, "block_side", 15000.0)),
        cv_train_fraction=float(_get(cv, "train_fraction", 0.7)),
        cv_models=models,
        cv_include_noise=_bool(_get(cv, "include_noise"), True),
        cell=float(_get(pred, "cell", 1000.0)),
        backtransform=bt,
        variance=var,
        variance_samples=int(_get(pred, "variance_samples", 250)),
        histogram_bins=int(_get(pred, "histogram_bins", 40)),
        vario_bin=float(_get(vario, "bin_width", 1000.0)),
        vario_max_lag=float(_get(vario, "max_lag", 60000.0)),
        vario_subsample=None if str(sub).lower() == "none" else int(sub),
        vario_sectors=int(_get(vario, "sectors", 1)),
        track_max_lag=int(_get(vario, "track_max_lag", 40)),
        sens_thin=tuple(int(v) for v in _floats(_get(sens, "thin"), (10, 20))),
        sens_mesh_scale=_floats(_get(sens, "mesh_scale"), (0.7, 1.4)),
        raw={"_fields": fsecs, "_poly_files": [p for p in (_poly_file(t, base) for t in (_get(exc, "water") or "", poly_txt)) if p]},
    )
    if cfg.thin_k < 1:
        raise ConfigError("[data] thin_k must be >= 1")
    if cfg.cell <= 0:
        raise ConfigError("[predict] cell must be > 0")
    return cfg


def effective(cfg: RunConfig) -> str:
    """The config with all defaults resolved, as INI text."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    rel = cfg.path.parent if cfg.path else Path(".")

    def rp(p):
        try:
            return str(Path(p).resolve().relative_to(rel.resolve()))
        except ValueError:
            return str(p)

    cp["run"] = {"seed": str(cfg.seed), "output_dir": rp(cfg.output_dir), "threads": str(cfg.threads), "crs": cfg.crs}
    cp["data"] = {"measurements": rp(cfg.measurements), "thin_k": str(cfg.thin_k), "covariates": "yes" if cfg.use_covariates else "no"}
    cov = {k: rp(v) for k, v in cfg.covariate_paths.items()}
    cov.update(
        rainfall_scale=repr(cfg.rainfall_scale),
        lithology_levels=" | ".join(cfg.encoder.lithology),
        tectonic_levels=" | ".join(cfg.encoder.tectonic),
        landcover_levels=" | ".join(cfg.encoder.landcover),
        tectonic_reference=cfg.encoder.tectonic_reference,
        landcover_reference=cfg.encoder.landcover_reference,
    )
    cp["covariates"] = cov
    cp["exclusion"] = {
        "point_sources": "; ".join(f"{x!r} {y!r} {r!r}" for x, y, r in cfg.exclusion.point_sources),
        "water": "\n".join(p.wkt for p in cfg.exclusion.water),
    }
    cp["domain"] = {"polygon": cfg.domain.wkt}
    f = cfg.fit
    cp["model"] = {
        "variant": cfg.variant,
        "strategy": f.strategy,
        "grid_steps": str(f.grid_steps),
        "step_scale": repr(f.step_scale),
        "prune": "" if f.prune is None else repr(f.prune),
        "max_iter": str(f.max_iter),
        "noise_shape": repr(cfg.noise.shape),
        "noise_scale": repr(cfg.noise.scale),
        "noise_parametrization": cfg.noise.parametrization,
        "beta_precision": repr(cfg.beta_precision),
    }
    for j, fc in enumerate(cfg.fields, start=1):
        cp[f"field{j}"] = {
            "min_edge": repr(fc.mesh.min_edge),
            "max_edge": repr(fc.mesh.max_edge),
            "min_angle": repr(fc.mesh.min_angle),
            "extension": repr(fc.extension()),
            "coarsening": repr(fc.mesh.coarsening),
            "range0": repr(fc.prior.range0),
            "p_range_above": repr(fc.prior.p_range_above),
            "sigma0": repr(fc.prior.sigma0),
            "p_sigma_above": repr(fc.prior.p_sigma_above),
        }
    cp["cv"] = {
        "scheme": cfg.cv_scheme,
        "folds": str(cfg.cv_folds),
        "block_side": repr(cfg.cv_block_side),
        "train_fraction": repr(cfg.cv_train_fraction),
        "models": ", ".join(cfg.cv_models),
        "include_noise": "yes" if cfg.cv_include_noise else "no",
    }
    cp["predict"] = {
        "cell": repr(cfg.cell),
        "backtransform": cfg.backtransform,
        "variance": cfg.variance,
        "variance_samples": str(cfg.variance_samples),
        "histogram_bins": str(cfg.histogram_bins),
    }
    cp["variogram"] = {
        "bin_width": repr(cfg.vario_bin),
        "max_lag": repr(cfg.vario_max_lag),
        "subsample": "none" if cfg.vario_subsample is None else str(cfg.vario_subsample),
        "sectors": str(cfg.vario_sectors),
        "track_max_lag": str(cfg.track_max_lag),
    }
    cp["sensitivity"] = {
        "thin": ", ".join(str(k) for k in cfg.sens_thin),
        "mesh_scale": ", ".join(repr(v) for v in cfg.sens_mesh_scale),
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
