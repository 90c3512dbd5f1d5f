"""Regular grids: prediction grid specs and ESRI ASCII rasters."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid; ``origin`` is the lower-left corner of cell (0, 0).

    Cells are enumerated row-major from the bottom row: index = iy * nx + ix.
    """

    x0: float
    y0: float
    cell: float
    nx: int
    ny: int

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def centers(self) -> np.ndarray:
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(flat cell index, inside-extent mask) for arbitrary points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        ix = np.floor((pts[:, 0] - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((pts[:, 1] - self.y0) / self.cell).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        idx = np.where(ok, iy * self.nx + ix, -1)
        return idx, ok


def build_grid(domain_polygon, cell: float) -> tuple[GridSpec, np.ndarray, np.ndarray]:
    """Grid covering the polygon's bounding box.

    Returns the GridSpec, all cell centers, and a mask that is True for cells whose
    centers lie inside the polygon.
    """
    if cell <= 0:
        raise ValueError("cell size must be > 0")
    poly = domain_polygon if isinstance(domain_polygon, Polygon) else Polygon(np.asarray(domain_polygon, float))
    xmin, ymin, xmax, ymax = poly.bounds
    nx = max(1, int(np.ceil((xmax - xmin) / cell - 1e-9)))
    ny = max(1, int(np.ceil((ymax - ymin) / cell - 1e-9)))
    spec = GridSpec(float(xmin), float(ymin), float(cell), nx, ny)
    c = spec.centers()
    inside = shapely.contains_xy(poly, c[:, 0], c[:, 1])
    return spec, c, inside


@dataclass(frozen=True, eq=False)
class AsciiGrid:
    """ESRI ASCII raster; ``values[0]`` is the northernmost row as in the file."""

    values: np.ndarray
    xll: float
    yll: float
    cellsize: float
    nodata: float | None = None

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    def sample(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Value of the containing cell per point, and a validity mask.

        Points outside the extent or in no-data cells are invalid.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        col = np.floor((pts[:, 0] - self.xll) / self.cellsize).astype(np.int64)
        row_from_bottom = np.floor((pts[:, 1] - self.yll) / self.cellsize).astype(np.int64)
        ok = (col >= 0) & (col < self.ncols) & (row_from_bottom >= 0) & (row_from_bottom < self.nrows)
        row = self.nrows - 1 - row_from_bottom
        out = np.full(len(pts), np.nan)
        out[ok] = self.values[row[ok], col[ok]]
        if self.nodata is not None:
            ok &= out != self.nodata
        ok &= np.isfinite(out)
        out[~ok] = np.nan
        return out, ok


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def read_ascii_grid(path) -> AsciiGrid:
    text = Path(path).read_text().split("\n")
    header = {}
    i = 0
    while i < len(text):
        parts = text[i].split()
        if len(parts) == 2 and parts[0].lower() in (*_HEADER_KEYS, "nodata_value", "xllcenter", "yllcenter"):
            header[parts[0].lower()] = float(parts[1])
            i += 1
        else:
            break
    missing = [k for k in ("ncols", "nrows", "cellsize") if k not in header]
    if missing:
        raise RasterError(f"{path}: missing header keys {missing}")
    cs = header["cellsize"]
    if "xllcorner" in header:
        xll, yll = header["xllcorner"], header["yllcorner"]
    elif "xllcenter" in header:
        xll, yll = header["xllcenter"] - cs / 2, header["yllcenter"] - cs / 2
    else:
        raise RasterError(f"{path}: missing lower-left corner")
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    vals = np.array(" ".join(text[i:]).split(), dtype=float)
    if vals.size != nrows * ncols:
        raise RasterError(f"{path}: expected {nrows * ncols} values, found {vals.size}")
    return AsciiGrid(vals.reshape(nrows, ncols), xll, yll, cs, header.get("nodata_value"))


def write_ascii_grid(grid: AsciiGrid, path, fmt: str = "%.10g") -> None:
    lines = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {float(grid.xll)!r}",
        f"yllcorner {float(grid.yll)!r}",
        f"cellsize {float(grid.cellsize)!r}",
    ]
    if grid.nodata is not None:
        lines.append(f"NODATA_value {grid.nodata:g}")
    body = [" ".join(fmt % v for v in row) for row in grid.values]
    Path(path).write_text("\n".join(lines + body) + "\n")
