import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import box

from geodose.grid import AsciiGrid
from geodose.pipeline import (
    LANDCOVER_LEVELS,
    LITHOLOGY_LEVELS,
    TECTONIC_LEVELS,
    CovariateEncoder,
    CovariateRaster,
    DataError,
    ExclusionSpec,
    clean,
    expected_thinned,
    ingest,
    join_covariates,
    prepare,
    thin,
    write_measurements,
)

HEADER = "flight_id,seq,x,y,dose_nsvh\n"


def _csv(tmp_path, body, header=HEADER):
    p = tmp_path / "m.csv"
    p.write_text(header + body)
    return p


def _records(sizes, seed=0):
    r = np.random.default_rng(seed)
    rows = []
    for f, n in enumerate(sizes):
        seq = r.permutation(n) + 1
        for s in seq:
            rows.append((f"F{f:03d}", int(s), float(r.uniform(0, 1e4)), float(r.uniform(0, 1e4)), 50.0))
    df = pd.DataFrame(rows, columns=["flight_id", "seq", "x", "y", "dose_nsvh"])
    df["log_dose"] = np.log(df["dose_nsvh"])
    df["row"] = np.arange(1, len(df) + 1)
    return df


def test_ingest_log_value(tmp_path):
    df = ingest(_csv(tmp_path, "F001,1,600000,200000,50.94\n"))
    assert df.loc[0, "log_dose"] == pytest.approx(math.log(50.94))
    assert df.loc[0, "log_dose"] == pytest.approx(3.931, abs=5e-4)
    assert df.loc[0, "row"] == 1


def test_ingest_rejects_zero_dose(tmp_path):
    with pytest.raises(DataError, match="nonpositive") as err:
        ingest(_csv(tmp_path, "F001,1,0,0,50\nF001,2,0,0,0\n"))
    assert err.value.rows == [2]
    assert err.value.stage == "ingest"


def test_ingest_reports_malformed_rows(tmp_path):
    body = "F001,1,0,0,50\nF001,x,0,0,50\nF001,3,nan,0,50\nF001,4,0,0,\n"
    with pytest.raises(DataError, match="malformed") as err:
        ingest(_csv(tmp_path, body))
    assert err.value.rows == [2, 3, 4]


def test_ingest_duplicate_sequence(tmp_path):
    with pytest.raises(DataError, match="duplicate") as err:
        ingest(_csv(tmp_path, "F001,1,0,0,50\nF002,1,0,0,50\nF001,1,5,5,51\n"))
    assert err.value.rows == [1, 3]


def test_ingest_missing_column(tmp_path):
    with pytest.raises(DataError, match="missing columns"):
        ingest(_csv(tmp_path, "F001,1,0,0\n", header="flight_id,seq,x,y\n"))


def test_ingest_preserves_count_and_round_trips(tmp_path):
    df = _records([30, 17, 1])
    p = tmp_path / "rt.csv"
    write_measurements(df, p)
    back = ingest(p)
    assert len(back) == len(df)
    np.testing.assert_allclose(back["x"], df["x"], atol=1e-6)


def test_clean_point_source_and_identity():
    df = _records([50])
    df.loc[0, ["x", "y"]] = [5000.0, 5000.0]
    kept, counts = clean(df, ExclusionSpec(point_sources=[(5000.0, 5000.0, 1.0)]))
    assert counts["point_source"] >= 1 and 5000.0 not in kept["x"].tolist()
    same, c0 = clean(df, ExclusionSpec())
    pd.testing.assert_frame_equal(same, df.reset_index(drop=True))
    assert c0 == {"input": 50, "point_source": 0, "water": 0, "kept": 50}


def test_clean_water_counts_disjoint():
    df = _records([400], seed=3)
    ex = ExclusionSpec(point_sources=[(2000.0, 2000.0, 1500.0)], water=[box(1000, 1000, 4000, 4000)])
    kept, c = clean(df, ex)
    xy = df[["x", "y"]].to_numpy()
    near = np.hypot(xy[:, 0] - 2000, xy[:, 1] - 2000) <= 1500
    wet = (xy[:, 0] >= 1000) & (xy[:, 0] <= 4000) & (xy[:, 1] >= 1000) & (xy[:, 1] <= 4000)
    assert c["point_source"] == near.sum()
    assert c["water"] == (wet & ~near).sum()
    assert c["kept"] == len(kept) == (~(near | wet)).sum()
    assert c["input"] == c["kept"] + c["point_source"] + c["water"]


def test_thin_identity_and_order():
    df = _records([5, 3])
    out = thin(df, 1)
    assert len(out) == 8
    assert out.groupby("flight_id")["seq"].apply(lambda s: s.is_monotonic_increasing).all()


def test_thin_keeps_every_kth_in_sequence_order():
    df = _records([31])
    out = thin(df, 15)
    assert out["seq"].tolist() == [1, 16, 31]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 80), min_size=1, max_size=12), st.integers(1, 25))
def test_thin_count_matches_ceiling(sizes, k):
    df = _records(sizes)
    out = thin(df, k)
    assert len(out) == sum(math.ceil(n / k) for n in sizes) == expected_thinned(df, k)


def test_thin_rejects_bad_k():
    with pytest.raises(ValueError):
        thin(_records([3]), 0)


def test_encoder_width_and_levels():
    enc = CovariateEncoder()
    assert (len(LITHOLOGY_LEVELS), len(TECTONIC_LEVELS), len(LANDCOVER_LEVELS)) == (5, 19, 6)
    assert enc.width == 5 + 18 + 5 + 1 == 29
    assert "tectonic:Molassebecken" in enc.columns
    assert "landcover:artificial" not in enc.columns


def test_molasse_cell_sets_its_column():
    enc = CovariateEncoder()
    code = TECTONIC_LEVELS.index("Molassebecken")
    X = enc.encode([0], [code], [0], [1.2])
    assert X[0, enc.columns.index("tectonic:Molassebecken")] == 1.0
    tect = [j for j, c in enumerate(enc.columns) if c.startswith("tectonic:")]
    assert X[0, tect].sum() == 1.0


def test_zero_rainfall_column():
    enc = CovariateEncoder()
    X = enc.encode([0, 1], [0, 2], [0, 3], [0.0, 0.0])
    assert np.all(X[:, -1] == 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 4), st.integers(0, 18), st.integers(0, 5), st.floats(0, 5, allow_nan=False)),
        min_size=1,
        max_size=30,
    )
)
def test_encoder_round_trip(rows):
    enc = CovariateEncoder()
    li, te, la, ra = map(np.array, zip(*rows))
    X = enc.encode(li, te, la, ra)
    back = enc.decode(X)
    assert back["lithology"].tolist() == [LITHOLOGY_LEVELS[i] for i in li]
    assert back["tectonic"].tolist() == [TECTONIC_LEVELS[i] for i in te]
    assert back["landcover"].tolist() == [LANDCOVER_LEVELS[i] for i in la]
    np.testing.assert_array_equal(back["rainfall"], ra)
    # each categorical block is one-hot or all zero (reference)
    assert np.all(X[:, :5].sum(axis=1) == 1)


def test_encoder_rejects_bad_codes():
    with pytest.raises(ValueError):
        CovariateEncoder().encode([5], [0], [0], [0.0])
    with pytest.raises(ValueError):
        CovariateEncoder(tectonic_reference="nowhere")


def _raster(value_grid, nodata=-9999.0):
    return AsciiGrid(np.asarray(value_grid, float), 0.0, 0.0, 1000.0, nodata)


def test_join_flags_outside_and_nodata():
    lith = _raster([[0, 1], [2, -9999]])
    tect = _raster([[0, 1], [2, 3]])
    land = _raster([[0, 1], [2, 3]])
    rain = _raster([[1000, 1500], [2000, 500]])
    cr = CovariateRaster(lith, tect, land, rain, rainfall_scale=0.001)
    pts = np.array([[500, 1500], [1500, 500], [5000, 5000]])
    X, ok = join_covariates(pts, cr, CovariateEncoder())
    assert ok.tolist() == [True, False, False]
    assert np.isnan(X[1]).all()
    assert X[0, -1] == pytest.approx(1.0)


def test_prepare_counts(tmp_path):
    df = _records([40, 25, 9], seed=5)
    p = tmp_path / "m.csv"
    write_measurements(df, p)
    data = prepare(p, ExclusionSpec(point_sources=[(5000, 5000, 2000)]), 15, None, None, intercept_only=True)
    c = data.counts
    assert c["ingested"] == 74
    assert c["cleaned"] == 74 - c["excluded_point_source"]
    assert data.X.shape == (c["thinned"], 1)
    assert data.columns == ["intercept"]
