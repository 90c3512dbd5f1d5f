"""Measurement ingestion, cleaning, thinning and covariate encoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import Polygon

from .grid import AsciiGrid, read_ascii_grid

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("flight_id", "seq", "x", "y", "dose_nsvh")
OPTIONAL_COLUMNS = ("timestamp",)
MAX_REPORTED_ROWS = 20

LITHOLOGY_LEVELS = (
    "Glacier, Firn",
    "Lockergesteine",
    "Magmatische Gesteine",
    "Metamorphe Gesteine",
    "Sedimentgesteine",
)
TECTONIC_LEVELS = (
    "Allochthone Massive und infrapenninische Kristallindecken",
    "Ausseralpine Plattform",
    "Autochthon - Parauochthon, Infrahelvetische Decken",
    "Decken der unterostalpin-penninischen Grenzzone",
    "Faltenjura",
    "Helvetische Sedimentdecken s.str.",
    "Mittelpenninische Kristallindecken",
    "Mittelpenninische Sedimentdecken und -schuppen",
    "Molassebecken",
    "Oberostalpine Decken",
    "Oberpenninische Sedimentdecken",
    "Ophiolithfuerende oberpenninische Sedimentdecken und - schuppen",
    "Quartaer",
    "Sued- bis ultrahelvetische Sedimentdecken und -schuppen",
    "Suedalpin",
    "Tertiaere Intrusiva und Extrusiva",
    "Unterostalpine Decken",
    "Unterpenninische Kristallindecken",
    "Unterpenninische Sedimentdecken und -schuppen, Ophiolithe",
)
LANDCOVER_LEVELS = (
    "artificial",
    "grass vegetation",
    "bush vegetation",
    "tree vegetation",
    "without vegetation",
    "wetland",
)
TECTONIC_REFERENCE = TECTONIC_LEVELS[0]
LANDCOVER_REFERENCE = "artificial"


class DataError(ValueError):
    """Bad input data; ``stage`` names the pipeline step, ``rows`` the offending file rows."""

    def __init__(self, message, stage: str = "ingest", rows=()):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.rows = list(rows)


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------


def _rows_msg(rows) -> str:
    rows = list(rows)
    shown = ", ".join(str(r) for r in rows[:MAX_REPORTED_ROWS])
    more = f" (+{len(rows) - MAX_REPORTED_ROWS} more)" if len(rows) > MAX_REPORTED_ROWS else ""
    return shown + more


def ingest(path) -> pd.DataFrame:
    """Read a measurement CSV into a validated frame.

    Columns: flight_id (str), seq (int), x, y (m), dose_nsvh (> 0), log_dose,
    optional timestamp, and ``row``, the 1-based data row number in the file
    (header excluded) used in error reports.
    """
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}; expected header {','.join(REQUIRED_COLUMNS)}")
    df = pd.DataFrame({"row": np.arange(1, len(raw) + 1)})
    df["flight_id"] = raw["flight_id"].str.strip()
    bad = df["flight_id"] == ""
    df["seq"] = pd.to_numeric(raw["seq"], errors="coerce")
    bad |= df["seq"].isna() | (df["seq"] != np.floor(df["seq"]))
    for c in ("x", "y", "dose_nsvh"):
        df[c] = pd.to_numeric(raw[c], errors="coerce")
        bad |= ~np.isfinite(df[c].to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        rows = df.loc[bad, "row"].tolist()
        raise DataError(f"{path}: {len(rows)} malformed rows: {_rows_msg(rows)}", rows=rows)
    nonpos = df["dose_nsvh"] <= 0
    if nonpos.any():
        rows = df.loc[nonpos, "row"].tolist()
        raise DataError(f"{path}: nonpositive dose rate in rows {_rows_msg(rows)}", rows=rows)
    df["seq"] = df["seq"].astype(np.int64)
    dup = df.duplicated(["flight_id", "seq"], keep=False)
    if dup.any():
        rows = df.loc[dup, "row"].tolist()
        raise DataError(f"{path}: duplicate (flight_id, seq) in rows {_rows_msg(rows)}", rows=rows)
    if "timestamp" in raw.columns:
        df["timestamp"] = raw["timestamp"]
    df["log_dose"] = np.log(df["dose_nsvh"].to_numpy())
    return df


def write_measurements(df: pd.DataFrame, path) -> None:
    cols = list(REQUIRED_COLUMNS) + [c for c in OPTIONAL_COLUMNS if c in df.columns]
    df[cols].to_csv(path, index=False, float_format="%.6f")


# --------------------------------------------------------------------------
# cleaning and thinning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExclusionSpec:
    """Circular exclusion zones around point sources and water polygons."""

    point_sources: tuple = ()
    water: tuple = ()

    def __post_init__(self):
        ps = tuple(tuple(float(v) for v in p) for p in self.point_sources)
        for p in ps:
            if len(p) != 3 or p[2] <= 0:
                raise ValueError(f"point source needs (x, y, radius > 0), got {p}")
        polys = []
        for w in self.water:
            poly = w if isinstance(w, Polygon) else Polygon(np.asarray(w, float))
            if not poly.is_valid or poly.area <= 0:
                raise ValueError("water polygons must be simple with positive area")
            polys.append(poly)
        object.__setattr__(self, "point_sources", ps)
        object.__setattr__(self, "water", tuple(polys))


def clean(records: pd.DataFrame, exclusion: ExclusionSpec) -> tuple[pd.DataFrame, dict]:
    """Drop records inside exclusion circles or water polygons.

    Returns the kept records and counts per reason; a record hit by both is
    counted under ``point_source``.
    """
    xy = records[["x", "y"]].to_numpy(dtype=float)
    near = np.zeros(len(records), dtype=bool)
    for x, y, r in exclusion.point_sources:
        near |= (xy[:, 0] - x) ** 2 + (xy[:, 1] - y) ** 2 <= r * r
    wet = np.zeros(len(records), dtype=bool)
    for poly in exclusion.water:
        wet |= shapely.intersects_xy(poly, xy[:, 0], xy[:, 1])
    counts = {
        "input": len(records),
        "point_source": int(near.sum()),
        "water": int((wet & ~near).sum()),
    }
    kept = records.loc[~(near | wet)].reset_index(drop=True)
    counts["kept"] = len(kept)
    return kept, counts


def thin(records: pd.DataFrame, k: int) -> pd.DataFrame:
    """Keep every k-th record per flight (positions 0, k, 2k, ... in seq order)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = records.sort_values(["flight_id", "seq"], kind="mergesort")
    pos = ordered.groupby("flight_id", sort=False).cumcount().to_numpy()
    return ordered.loc[pos % k == 0].reset_index(drop=True)


def expected_thinned(records: pd.DataFrame, k: int) -> int:
    """Sum over flights of ceil(n_f / k)."""
    return int(sum(math.ceil(n / k) for n in records.groupby("flight_id").size()))


# --------------------------------------------------------------------------
# covariates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateEncoder:
    """One-hot design with lithology as per-level intercepts.

    Categorical rasters hold integer codes indexing the level tuples; the
    tectonic and land-cover blocks drop their reference level; rainfall is
    appended in meters.
    """

    lithology: tuple = LITHOLOGY_LEVELS
    tectonic: tuple = TECTONIC_LEVELS
    landcover: tuple = LANDCOVER_LEVELS
    tectonic_reference: str = TECTONIC_REFERENCE
    landcover_reference: str = LANDCOVER_REFERENCE
    rainfall: bool = True

    def __post_init__(self):
        for name in ("lithology", "tectonic", "landcover"):
            levels = tuple(getattr(self, name))
            if len(set(levels)) != len(levels) or not levels:
                raise ValueError(f"{name} levels must be unique and nonempty")
            object.__setattr__(self, name, levels)
        if self.tectonic_reference not in self.tectonic:
            raise ValueError(f"unknown tectonic reference {self.tectonic_reference!r}")
        if self.landcover_reference not in self.landcover:
            raise ValueError(f"unknown land-cover reference {self.landcover_reference!r}")

    def _blocks(self):
        return [
            ("lithology", self.lithology, None),
            ("tectonic", self.tectonic, self.tectonic_reference),
            ("landcover", self.landcover, self.landcover_reference),
        ]

    @property
    def columns(self) -> list[str]:
        cols = []
        for name, levels, ref in self._blocks():
            cols += [f"{name}:{lv}" for lv in levels if lv != ref]
        if self.rainfall:
            cols.append("rainfall")
        return cols

    @property
    def width(self) -> int:
        return len(self.columns)

    def encode(self, lithology, tectonic, landcover, rainfall=None) -> np.ndarray:
        """Design rows from integer level codes (and rainfall in meters)."""
        codes = {"lithology": lithology, "tectonic": tectonic, "landcover": landcover}
        n = len(np.asarray(lithology))
        parts = []
        for name, levels, ref in self._blocks():
            c = np.asarray(codes[name])
            if c.shape != (n,):
                raise ValueError(f"{name} codes must have length {n}")
            ci = c.astype(np.int64)
            if np.any(ci != c) or np.any((ci < 0) | (ci >= len(levels))):
                raise ValueError(f"{name} codes outside 0..{len(levels) - 1}")
            keep = [j for j, lv in enumerate(levels) if lv != ref]
            parts.append((ci[:, None] == np.array(keep)[None, :]).astype(float))
        if self.rainfall:
            r = np.zeros(n) if rainfall is None else np.asarray(rainfall, dtype=float)
            if np.any(r < 0):
                raise ValueError("rainfall must be >= 0")
            parts.append(r.reshape(n, 1))
        return np.hstack(parts)

    def decode(self, X) -> pd.DataFrame:
        """Category labels (and rainfall) recovered from design rows."""
        X = np.asarray(X, dtype=float)
        out = {}
        col = 0
        for name, levels, ref in self._blocks():
            keep = [lv for lv in levels if lv != ref]
            blk = X[:, col : col + len(keep)]
            col += len(keep)
            labels = np.empty(len(X), dtype=object)
            hot = blk.sum(axis=1)
            if np.any((hot != 0) & (hot != 1)) or np.any((blk != 0) & (blk != 1)):
                raise ValueError(f"{name} block is not one-hot")
            idx = blk.argmax(axis=1)
            for i in range(len(X)):
                labels[i] = keep[idx[i]] if hot[i] == 1 else ref
            if ref is None and np.any(hot == 0):
                raise ValueError("lithology block has rows without a level")
            out[name] = labels
        if self.rainfall:
            out["rainfall"] = X[:, col]
        return pd.DataFrame(out)


@dataclass(frozen=True, eq=False)
class CovariateRaster:
    """Co-registered covariate rasters; categorical ones hold level codes."""

    lithology: AsciiGrid
    tectonic: AsciiGrid
    landcover: AsciiGrid
    rainfall: AsciiGrid | None = None
    rainfall_scale: float = 1.0

    def sample(self, points) -> tuple[dict, np.ndarray]:
        values = {}
        ok = np.ones(len(np.asarray(points).reshape(-1, 2)), dtype=bool)
        for name in ("lithology", "tectonic", "landcover", "rainfall"):
            g = getattr(self, name)
            if g is None:
                continue
            v, valid = g.sample(points)
            values[name] = v
            ok &= valid
        if "rainfall" in values:
            values["rainfall"] = values["rainfall"] * self.rainfall_scale
        return values, ok


def read_covariates(paths: dict, rainfall_scale: float = 1.0) -> CovariateRaster:
    grids = {k: read_ascii_grid(p) for k, p in paths.items() if p}
    missing = [k for k in ("lithology", "tectonic", "landcover") if k not in grids]
    if missing:
        raise DataError(f"missing covariate rasters: {missing}", stage="covariates")
    return CovariateRaster(
        grids["lithology"], grids["tectonic"], grids["landcover"], grids.get("rainfall"), rainfall_scale
    )


def join_covariates(points, raster: CovariateRaster, encoder: CovariateEncoder) -> tuple[np.ndarray, np.ndarray]:
    """Design rows at points and a validity mask.

    Points outside the raster extent or in no-data cells are flagged invalid
    and get NaN rows.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    values, ok = raster.sample(pts)
    X = np.full((len(pts), encoder.width), np.nan)
    if ok.any():
        rain = values.get("rainfall")
        X[ok] = encoder.encode(
            values["lithology"][ok],
            values["tectonic"][ok],
            values["landcover"][ok],
            None if rain is None else rain[ok],
        )
    return X, ok


def drop_empty_columns(X: np.ndarray, names) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Remove all-zero design columns; returns (X, names, kept column mask)."""
    keep = np.any(X != 0, axis=0)
    if not keep.all():
        log.warning("dropping covariate columns absent from the data: %s", [n for n, k in zip(names, keep) if not k])
    return X[:, keep], [n for n, k in zip(names, keep) if k], keep


@dataclass
class PreparedData:
    """Output of the ingest -> clean -> thin -> join sequence."""

    records: pd.DataFrame
    X: np.ndarray
    columns: list
    counts: dict = field(default_factory=dict)
    column_mask: np.ndarray | None = None

    @property
    def coords(self) -> np.ndarray:
        return self.records[["x", "y"]].to_numpy(dtype=float)

    @property
    def y(self) -> np.ndarray:
        return self.records["log_dose"].to_numpy(dtype=float)


def prepare(
    path,
    exclusion: ExclusionSpec,
    k: int,
    raster: CovariateRaster | None,
    encoder: CovariateEncoder | None,
    intercept_only: bool = False,
    drop_outside: bool = True,
) -> PreparedData:
    """Run ingestion, cleaning, thinning and covariate joining in that order."""
    records = ingest(path)
    counts = {"ingested": len(records)}
    records, ccounts = clean(records, exclusion)
    counts.update({f"excluded_{k_}": v for k_, v in ccounts.items() if k_ in ("point_source", "water")})
    counts["cleaned"] = len(records)
    records = thin(records, k)
    counts["thinned"] = len(records)
    if intercept_only or raster is None:
        X = np.ones((len(records), 1))
        return PreparedData(records, X, ["intercept"], counts)
    X, ok = join_covariates(records[["x", "y"]].to_numpy(), raster, encoder)
    if not ok.all():
        bad = records.loc[~ok, "row"].tolist()
        if not drop_outside:
            raise DataError(f"records outside covariate rasters, rows {_rows_msg(bad)}", stage="join", rows=bad)
        log.warning("dropping %d records without covariates", len(bad))
        records = records.loc[ok].reset_index(drop=True)
        X = X[ok]
    counts["joined"] = len(records)
    X, cols, mask = drop_empty_columns(X, encoder.columns)
    return PreparedData(records, X, cols, counts, mask)
