import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dignn.errors import InconsistentDimensions, IndexOutOfRange, NonPositiveWeight, ParseError
from dignn.graph import (
    block_diagonal,
    build_graph,
    decompose,
    degrees,
    from_dense,
    is_bipartite,
    is_connected,
    read_edge_list,
    write_edge_list,
)

TRIANGLE_PENDANT = [(0, 1), (1, 2), (0, 2), (0, 3)]


def arcs(g):
    return list(zip(g.arc_sources.tolist(), g.neighbor_ids.tolist(), g.edge_weights.tolist()))


def test_k2_symmetrized():
    assert arcs(build_graph(2, [(0, 1)])) == [(0, 1, 1.0), (1, 0, 1.0)]


def test_duplicate_edges_sum():
    g = build_graph(3, [(0, 1), (1, 0)])
    assert g.num_edges == 1
    assert arcs(g) == [(0, 1, 2.0), (1, 0, 2.0)]


def test_self_loop_dropped():
    g = build_graph(3, [(0, 0), (0, 1)])
    assert g.num_edges == 1
    assert 0 not in g.neighbors(0)


def test_build_errors():
    with pytest.raises(IndexOutOfRange):
        build_graph(2, [(0, 2)])
    with pytest.raises(NonPositiveWeight):
        build_graph(2, [(0, 1, 0.0)])
    with pytest.raises(NonPositiveWeight):
        build_graph(2, [(0, 1, -1.0)])


def test_arrays_are_read_only():
    g = build_graph(2, [(0, 1)])
    with pytest.raises(ValueError):
        g.edge_weights[0] = 5.0


@pytest.mark.parametrize("n, edges, expected", [
    (2, [(0, 1)], [1, 1]),
    (3, [(0, 1), (1, 2)], [1, 2, 1]),
    (4, TRIANGLE_PENDANT, [3, 2, 2, 1]),
])
def test_degrees(n, edges, expected):
    assert degrees(build_graph(n, edges)).tolist() == expected


def test_connectivity_and_bipartiteness():
    assert is_connected(build_graph(2, [(0, 1)]))
    assert not is_connected(build_graph(2, []))
    assert is_connected(build_graph(4, TRIANGLE_PENDANT))
    assert is_bipartite(build_graph(3, [(0, 1), (1, 2)]))
    assert not is_bipartite(build_graph(3, [(0, 1), (1, 2), (0, 2)]))
    assert is_bipartite(build_graph(4, []))


def test_block_diagonal_index():
    g, idx = block_diagonal([build_graph(2, [(0, 1)]), build_graph(3, [(0, 1), (1, 2)])])
    assert g.num_nodes == 5 and g.num_edges == 3
    assert idx.tolist() == [0, 0, 1, 1, 1]
    assert not is_connected(g)


def test_edge_list_round_trip_keeps_isolated_nodes(tmp_path):
    g = build_graph(5, [(0, 1, 0.5), (1, 2, 2.25)])
    path = tmp_path / "edges.txt"
    write_edge_list(g, path)
    assert read_edge_list(path) == g


def test_edge_list_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1\n1 two\n")
    with pytest.raises(ParseError) as err:
        read_edge_list(path)
    assert err.value.line == 2


def test_edge_list_header_mismatch(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("# num_nodes 4\n0 1\n")
    with pytest.raises(InconsistentDimensions):
        read_edge_list(path, num_nodes=3)


edge_lists = st.integers(1, 12).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1),
                       st.floats(0.1, 10.0)), max_size=40)))


@settings(max_examples=100, deadline=None)
@given(edge_lists)
def test_graph_invariants(case):
    n, edges = case
    g = build_graph(n, edges)
    a = g.dense_adjacency()
    assert np.array_equal(a, a.T)
    assert not np.any(np.diag(a))
    assert np.all(g.edge_weights > 0)
    assert np.all(np.diff(g.row_offsets) >= 0) and g.row_offsets[-1] == g.num_arcs
    # rows sorted, so no duplicates
    for i in range(n):
        nb = g.neighbors(i)
        assert np.all(np.diff(nb) > 0)
    assert np.array_equal(g.arc_sources[g.reverse_arcs], g.neighbor_ids)
    assert from_dense(np.triu(a)) == g
    _, upper = decompose(g)
    assert len(upper) == g.num_edges
