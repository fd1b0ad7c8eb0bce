import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kilnscope.errors import DuplicateId, MissingColumn, MissingCoordinates, NonNumericCell, SinglePoint
from kilnscope.geo import GeoPoint, GeoTransform, bearing, haversine_distance
from kilnscope.graph import (PoiNode, build_graph, dumps_graph, fit_feature_stats,
                             impute_features, knn_edges, load_pois, read_graph, sample_features,
                             standardize_features, write_graph)
from kilnscope.raster import RasterGrid

from oracles import knn_brute


def _write(tmp_path, text, name="pois.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _node(i, lon, lat, feats=(0.0,), label=None):
    return PoiNode(i, GeoPoint(lon, lat), np.array(feats, dtype=float), label)


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, "id,lon,lat,pop,label\n1,74.0,31.0,5,1\n2,74.1,31.0,6,0\n3,74.2,31.1,7,\n")
    nodes, names = load_pois(p)
    assert [n.id for n in nodes] == [1, 2, 3]
    assert names == ["pop"]
    assert [n.label for n in nodes] == [1, 0, None]
    assert nodes[2].features.tolist() == [7.0]


def test_load_errors(tmp_path):
    with pytest.raises(DuplicateId):
        load_pois(_write(tmp_path, "id,lon,lat\n1,74,31\n1,75,31\n"))
    with pytest.raises(MissingColumn):
        load_pois(_write(tmp_path, "id,lon\n1,74\n"))
    with pytest.raises(NonNumericCell) as exc:
        load_pois(_write(tmp_path, "id,lon,lat,f\n1,74,31,2\n2,75,31,abc\n"))
    assert (exc.value.row, exc.value.column, exc.value.value) == (3, "f", "abc")
    with pytest.raises(MissingCoordinates) as exc:
        load_pois(_write(tmp_path, "id,lon,lat\n1,74,31\n2,,31\n3,75,\n"))
    assert exc.value.rows == [3, 4]


def test_blank_feature_cell_is_flagged_then_imputed(tmp_path):
    p = _write(tmp_path, "id,lon,lat,f\n1,74.00,31.0,2\n2,74.01,31.0,\n3,74.02,31.0,6\n")
    nodes, _ = load_pois(p)
    assert nodes[1].missing.tolist() == [True]
    g = impute_features(knn_edges(nodes, 2))
    # node 2's two neighbours carry 2 and 6
    assert g.nodes[1].features.tolist() == [4.0]
    assert not np.isnan(g.features()).any()


def test_knn_clips_k():
    g = knn_edges([_node(0, 74.0, 31.0), _node(1, 74.1, 31.0)], 8)
    assert g.src.tolist() == [0, 1] and g.dst.tolist() == [1, 0]


def test_knn_collinear_points():
    nodes = [_node(i, 74.0 + 0.01 * i, 31.0) for i in range(4)]
    g = knn_edges(nodes, 2)
    nbrs = {i: sorted(g.dst[g.src == i].tolist()) for i in range(4)}
    assert nbrs[1] == [0, 2] and nbrs[2] == [1, 3]


def test_knn_tie_goes_to_lower_id():
    nodes = [_node(5, 74.0, 31.0), _node(9, 74.01, 31.0), _node(3, 73.99, 31.0)]
    g = knn_edges(nodes, 1)
    assert g.nodes[g.dst[0]].id == 3


def test_knn_single_point():
    with pytest.raises(SinglePoint):
        knn_edges([_node(0, 74, 31)], 8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 25), st.integers(1, 9))
def test_knn_matches_brute_force(seed, n, k):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(1000)[:n]
    nodes = [_node(int(ids[i]), float(74 + rng.uniform(0, 0.1)), float(31 + rng.uniform(0, 0.1))) for i in range(n)]
    g = knn_edges(nodes, k)
    ref = knn_brute([(p.id, p.location) for p in nodes], min(k, n - 1), haversine_distance)
    for i in range(n):
        assert g.dst[g.src == i].tolist() == ref[i]
    for s, d, dist, b in zip(g.src, g.dst, g.distance, g.bearing):
        assert dist == haversine_distance(nodes[s].location, nodes[d].location)
        assert b == bearing(nodes[s].location, nodes[d].location)


def _raster(values, nodata=-9999.0):
    return RasterGrid(np.asarray(values, dtype=float), GeoTransform(74.0, 31.0, 0.01, -0.01), nodata)


def test_sample_direct_read():
    r = _raster(np.full((5, 5), 7.5))
    assert sample_features(_node(0, 74.02, 30.98), [r]).tolist() == [7.5]


def test_sample_buffered_mean():
    v = np.full((5, 5), -9999.0)
    v[1, 2], v[3, 2] = 2.0, 4.0
    assert sample_features(_node(0, 74.02, 30.98), [_raster(v)], buffer_px=1).tolist() == [3.0]


def test_sample_global_mean_fallback():
    v = np.full((9, 9), -9999.0)
    v[0, 0], v[8, 8] = 1.0, 5.0
    assert sample_features(_node(0, 74.04, 30.96), [_raster(v)], buffer_px=1).tolist() == [3.0]


def test_sample_all_nodata_warns(caplog):
    with caplog.at_level(logging.WARNING):
        out = sample_features(_node(0, 74.02, 30.98), [_raster(np.full((5, 5), -9999.0))])
    assert out.tolist() == [0.0]
    assert "NoData" in caplog.text


def test_standardize_cases():
    g = knn_edges([_node(0, 74, 31, (1.0, 4.0)), _node(1, 74.1, 31, (3.0, 4.0))], 1)
    out, stats = standardize_features(g)
    np.testing.assert_array_equal(out.features(), [[-1.0, 0.0], [1.0, 0.0]])
    again, _ = standardize_features(g, stats=stats)
    assert np.array_equal(again.features(), out.features())
    assert fit_feature_stats(g.features()).std.tolist() == [1.0, 0.0]


def test_graph_json_roundtrip(tmp_path):
    nodes = [_node(i, 74 + 0.01 * i, 31 + 0.003 * i, (i, math.nan), i % 2) for i in range(5)]
    g = knn_edges(nodes, 2, ["a", "b"])
    write_graph(g, tmp_path / "g.json")
    back = read_graph(tmp_path / "g.json")
    assert dumps_graph(back) == dumps_graph(g)
    assert np.isnan(back.nodes[0].features[1])
    assert back.labels().tolist() == [0, 1, 0, 1, 0]


def test_build_graph_with_raster(tmp_path):
    p = _write(tmp_path, "id,lon,lat,f\n1,74.00,31.00,1\n2,74.02,30.98,\n3,74.04,30.96,3\n")
    r = _raster(np.arange(25, dtype=float).reshape(5, 5))
    g = build_graph(p, [r], k=2, raster_names=["ndvi"])
    assert g.feature_names == ["f", "ndvi_b0"]
    assert g.features()[:, 1].tolist() == [0.0, 12.0, 24.0]
    assert g.features()[1, 0] == 2.0
