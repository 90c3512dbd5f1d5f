"""Synthetic data: Matern fields, flight tracks and serially correlated track noise."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import shapely
from scipy.linalg import cholesky
from scipy.spatial.distance import cdist
from shapely.geometry import Polygon

from .grid import AsciiGrid, write_ascii_grid
from .mesh import TriMesh, build_mesh, project_points
from .pipeline import LANDCOVER_LEVELS, write_measurements
from .sparse import SparseCholesky
from .spde import MaternParams, assemble_fem, build_precision, matern_cov

DENSE_LIMIT = 8000


def simulate_matern(points, params: MaternParams, n_samples: int = 1, seed=0, jitter: float = 1e-10) -> np.ndarray:
    """Exact draws of a Matern field at points via a dense Cholesky factor.

    Returns (n_samples, n_points); for one sample a flat vector.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) > DENSE_LIMIT:
        raise ValueError(f"dense simulation limited to {DENSE_LIMIT} points; use simulate_gmrf")
    K = matern_cov(cdist(pts, pts), params)
    K[np.diag_indices_from(K)] += jitter * params.sigma**2
    L = cholesky(K, lower=True)
    rng = np.random.default_rng(seed)
    draws = (L @ rng.standard_normal((len(pts), n_samples))).T
    return draws[0] if n_samples == 1 else draws


def simulate_gmrf(mesh: TriMesh, params: MaternParams, n_samples: int = 1, seed=0) -> np.ndarray:
    """Draws of the mesh-node weights of the SPDE field, (n_samples, n_nodes)."""
    Q = build_precision(assemble_fem(mesh), params)
    chol = SparseCholesky(Q)
    rng = np.random.default_rng(seed)
    draws = chol.sample(rng.standard_normal((mesh.n_nodes, n_samples))).T
    return draws[0] if n_samples == 1 else draws


def field_at(mesh: TriMesh, weights, points) -> np.ndarray:
    """Evaluate node weights at points by linear interpolation."""
    proj = project_points(mesh, points, clamp=True)
    return proj.matrix @ np.asarray(weights)


def ar1_track(n: int, corr_length: float, sd: float = 1.0, rng=None) -> np.ndarray:
    """Stationary AR(1) series with lag-k correlation exp(-k / corr_length)."""
    rng = rng if rng is not None else np.random.default_rng()
    phi = math.exp(-1.0 / corr_length)
    e = rng.standard_normal(n) * sd * math.sqrt(1.0 - phi * phi)
    out = np.empty(n)
    out[0] = rng.standard_normal() * sd
    for i in range(1, n):
        out[i] = phi * out[i - 1] + e[i]
    return out


@dataclass(frozen=True)
class FlightPlan:
    """Parallel survey lines over a rectangle, flown alternately east and west."""

    x0: float
    y0: float
    width: float
    height: float
    line_spacing: float
    sample_spacing: float
    lines_per_flight: int = 2


def flight_tracks(plan: FlightPlan, jitter: float = 0.0, seed=0) -> pd.DataFrame:
    """Measurement positions with flight_id and within-flight seq."""
    rng = np.random.default_rng(seed)
    ys = plan.y0 + plan.line_spacing / 2 + np.arange(int(plan.height // plan.line_spacing)) * plan.line_spacing
    xs = plan.x0 + np.arange(0.0, plan.width, plan.sample_spacing)
    frames = []
    for li, yl in enumerate(ys):
        x = xs if li % 2 == 0 else xs[::-1]
        y = np.full_like(x, yl)
        if jitter:
            y = y + rng.normal(0.0, jitter, size=len(x))
        frames.append(pd.DataFrame({"line": li, "x": x, "y": y}))
    df = pd.concat(frames, ignore_index=True)
    df["flight_id"] = [f"F{line // plan.lines_per_flight + 1:03d}" for line in df["line"]]
    df["seq"] = df.groupby("flight_id").cumcount() + 1
    return df[["flight_id", "seq", "x", "y"]]


def ar1_flights(n_flights: int, length: int, corr_length: float, sd: float = 1.0, seed=0) -> pd.DataFrame:
    """Flights whose values are independent AR(1) series along seq."""
    rng = np.random.default_rng(seed)
    frames = []
    for f in range(n_flights):
        frames.append(
            pd.DataFrame(
                {
                    "flight_id": f"F{f + 1:03d}",
                    "seq": np.arange(1, length + 1),
                    "value": ar1_track(length, corr_length, sd, rng),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def uniform_points(n: int, bounds, seed=0) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(xmin, xmax, n), rng.uniform(ymin, ymax, n)])


# --------------------------------------------------------------------------
# bundled fixture: rasters, flights, exclusions and a run config
# --------------------------------------------------------------------------

# generator coefficients (log nSv/h); lithology levels are intercepts
FIXTURE_LITHOLOGY = (3.74, 3.97, 4.01, 3.99, 3.97)
FIXTURE_TECTONIC = (
    0.0, -0.04, -0.03, 0.11, -0.07, -0.13, 0.08, -0.16, -0.04, 0.32,
    -0.06, -0.15, -0.06, -0.04, -0.11, 0.43, 0.26, -0.03, -0.046,
)
FIXTURE_LANDCOVER = (0.0, 0.035, -0.019, -0.038, -0.009, -0.13)
FIXTURE_RAINFALL = 5.1


@dataclass(frozen=True)
class FixtureSettings:
    x0: float = 2_600_000.0
    y0: float = 1_150_000.0
    width: float = 60_000.0
    height: float = 40_000.0
    raster_cell: float = 200.0
    line_spacing: float = 1000.0
    sample_spacing: float = 100.0
    lines_per_flight: int = 2
    long_range: MaternParams = MaternParams(26_640.0, 0.322)
    short_range: MaternParams = MaternParams(1_690.0, 0.181)
    track_corr: float = 15.0
    track_sd: float = 0.12
    white_sd: float = 0.10
    water_shift: float = -0.5
    source_shift: float = 0.8
    seed: int = 7


def _voronoi_codes(centers, n_levels, pts, rng):
    seeds = np.column_stack([rng.uniform(*centers[0], size=n_levels * 2), rng.uniform(*centers[1], size=n_levels * 2)])
    codes = np.arange(len(seeds)) % n_levels
    d = cdist(pts, seeds)
    return codes[np.argmin(d, axis=1)]


def fixture_domain(s: FixtureSettings):
    x0, y0, w, h = s.x0, s.y0, s.width, s.height
    return Polygon(
        [(x0, y0 + 0.1 * h), (x0 + 0.6 * w, y0), (x0 + w, y0 + 0.05 * h), (x0 + w, y0 + h),
         (x0 + 0.3 * w, y0 + h), (x0, y0 + 0.85 * h)]
    )


def fixture_exclusions(s: FixtureSettings):
    t = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    cx, cy = s.x0 + 0.65 * s.width, s.y0 + 0.55 * s.height
    lake = np.column_stack([cx + 7000 * np.cos(t) * (1 + 0.1 * np.sin(3 * t)), cy + 5000 * np.sin(t)])
    sources = (
        (s.x0 + 0.2 * s.width, s.y0 + 0.3 * s.height, 3000.0),
        (s.x0 + 0.45 * s.width, s.y0 + 0.75 * s.height, 3000.0),
        (s.x0 + 0.85 * s.width, s.y0 + 0.2 * s.height, 3000.0),
        (s.x0 + 0.3 * s.width, s.y0 + 0.6 * s.height, 3000.0),
    )
    return sources, lake


def write_fixture(outdir, s: FixtureSettings = FixtureSettings(), variant: str = "mixed") -> dict:
    """Write a synthetic survey with covariate rasters and a matching run config.

    Returns paths of the written files.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(s.seed)
    ny, nx = int(round(s.height / s.raster_cell)), int(round(s.width / s.raster_cell))
    xs = s.x0 + (np.arange(nx) + 0.5) * s.raster_cell
    ys = s.y0 + (np.arange(ny)[::-1] + 0.5) * s.raster_cell  # north row first
    gx, gy = np.meshgrid(xs, ys)
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    box = ((s.x0, s.x0 + s.width), (s.y0, s.y0 + s.height))

    litho = _voronoi_codes(box, 5, cells, rng).reshape(ny, nx)
    tecto = _voronoi_codes(box, 19, cells, rng).reshape(ny, nx)
    # land cover in 1 km patches
    patch = 1000.0
    pnx, pny = int(np.ceil(s.width / patch)), int(np.ceil(s.height / patch))
    probs = np.array([0.1, 0.35, 0.05, 0.3, 0.1, 0.1])
    pcodes = rng.choice(len(LANDCOVER_LEVELS), size=(pny, pnx), p=probs)
    pix = ((cells[:, 0] - s.x0) // patch).astype(int)
    piy = ((cells[:, 1] - s.y0) // patch).astype(int)
    landc = pcodes[piy, pix].reshape(ny, nx)
    rain_mm = (20.0 + 15.0 * np.sin(2 * np.pi * (gx - s.x0) / s.width) * np.cos(np.pi * (gy - s.y0) / s.height)).clip(0)

    paths = {}
    for name, vals, fmt in (
        ("lithology", litho, "%d"),
        ("tectonic", tecto, "%d"),
        ("landcover", landc, "%d"),
        ("rainfall", rain_mm, "%.4f"),
    ):
        p = out / f"{name}.asc"
        write_ascii_grid(AsciiGrid(vals.astype(float), s.x0, s.y0, s.raster_cell, -9999.0), p, fmt)
        paths[name] = p

    domain = fixture_domain(s)
    plan = FlightPlan(s.x0, s.y0, s.width, s.height, s.line_spacing, s.sample_spacing, s.lines_per_flight)
    tr = flight_tracks(plan, jitter=20.0, seed=s.seed)
    keep = shapely.contains_xy(domain, tr["x"].to_numpy(), tr["y"].to_numpy())
    tr = tr.loc[keep].reset_index(drop=True)
    tr["seq"] = tr.groupby("flight_id").cumcount() + 1
    pts = tr[["x", "y"]].to_numpy()

    # covariate effect
    col = np.clip(((pts[:, 0] - s.x0) // s.raster_cell).astype(int), 0, nx - 1)
    row = np.clip(ny - 1 - ((pts[:, 1] - s.y0) // s.raster_cell).astype(int), 0, ny - 1)
    eta = (
        np.asarray(FIXTURE_LITHOLOGY)[litho[row, col]]
        + np.asarray(FIXTURE_TECTONIC)[tecto[row, col]]
        + np.asarray(FIXTURE_LANDCOVER)[landc[row, col]]
        + FIXTURE_RAINFALL * rain_mm[row, col] / 1000.0
    )
    # fields on meshes fine enough for their ranges
    m1 = build_mesh(domain, 1800, 2200, extension=20_000)
    m2 = build_mesh(domain, 380, 420, extension=3_000)
    u1 = field_at(m1, simulate_gmrf(m1, s.long_range, seed=rng.integers(2**31)), pts)
    u2 = field_at(m2, simulate_gmrf(m2, s.short_range, seed=rng.integers(2**31)), pts)
    noise = np.empty(len(tr))
    for _, idx in sorted(tr.groupby("flight_id").indices.items()):
        noise[idx] = ar1_track(len(idx), s.track_corr, s.track_sd, rng)
    noise += rng.normal(0.0, s.white_sd, len(tr))

    sources, lake = fixture_exclusions(s)
    shift = np.zeros(len(tr))
    lake_poly = Polygon(lake)
    shift[shapely.contains_xy(lake_poly, pts[:, 0], pts[:, 1])] += s.water_shift
    for x, y, r in sources:
        d2 = (pts[:, 0] - x) ** 2 + (pts[:, 1] - y) ** 2
        shift += s.source_shift * np.exp(-d2 / (2 * (r / 2) ** 2))
    tr["dose_nsvh"] = np.exp(eta + u1 + u2 + noise + shift)
    paths["measurements"] = out / "measurements.csv"
    write_measurements(tr, paths["measurements"])

    paths["water"] = out / "water.wkt"
    paths["water"].write_text(lake_poly.wkt + "\n")
    paths["domain"] = out / "domain.wkt"
    paths["domain"].write_text(domain.wkt + "\n")
    paths["config"] = out / "config.ini"
    paths["config"].write_text(fixture_config(sources, variant))
    return paths


def fixture_config(sources, variant: str = "mixed") -> str:
    ps = "; ".join(f"{x:.1f} {y:.1f} {r:.1f}" for x, y, r in sources)
    field2 = ""
    if variant == "extended":
        field2 = (
            "\n[field2]\nmin_edge = 900\nmax_edge = 1100\nmin_angle = 31\nextension = 3000\n"
            "range0 = 2000\np_range_above = 0.02\nsigma0 = 10\np_sigma_above = 0.01\n"
        )
    p_range = "0.6" if variant == "extended" else "0.5"
    return f"""# synthetic survey fixture
[run]
seed = 20240611
output_dir = run
threads = 1
crs = EPSG:2056

[data]
measurements = measurements.csv
thin_k = 15
covariates = yes

[covariates]
lithology = lithology.asc
tectonic = tectonic.asc
landcover = landcover.asc
rainfall = rainfall.asc
# raster holds millimeters
rainfall_scale = 0.001

[exclusion]
point_sources = {ps}
water = water.wkt

[domain]
polygon = domain.wkt

[model]
variant = {variant}
strategy = grid
grid_steps = 1
noise_shape = 1
noise_scale = 5e-5
noise_parametrization = rate
beta_precision = 0.001

[field1]
min_edge = 3500
max_edge = 5000
min_angle = 31
extension = 30000
range0 = 15000
p_range_above = {p_range}
sigma0 = 10
p_sigma_above = 0.01
{field2}
[cv]
scheme = both
folds = 4
block_side = 15000
train_fraction = 0.7
models = {variant}
include_noise = yes

[predict]
cell = 1000
backtransform = median
variance = exact
histogram_bins = 40

[variogram]
bin_width = 1000
max_lag = 30000
subsample = 5000
sectors = 1
track_max_lag = 40

[sensitivity]
thin = 10, 20
mesh_scale = 0.7, 1.4
"""
