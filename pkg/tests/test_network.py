import pytest

from pipeflow.gas import PipeParameters
from pipeflow.network import (
    Edge,
    NetworkTopology,
    TopologyError,
    classify,
    format_topology,
    incidence,
    loop_network,
    parse_topology,
    single_pipe,
    y_network,
)


def make_edge(name, start, end, length=1.0):
    return Edge(name, start, end, PipeParameters(length=length))


class TestIncidence:
    def test_signs(self):
        e = make_edge("e", "v1", "v2")
        assert incidence("v2", e) == 1
        assert incidence("v1", e) == -1

    def test_non_incident(self):
        e = make_edge("e", "v1", "v2")
        assert incidence("v3", e) == 0

    def test_signs_cancel_per_edge(self):
        topo = y_network()
        for e in topo.edges:
            assert incidence(e.start, e) + incidence(e.end, e) == 0


class TestClassify:
    def test_single_edge(self):
        topo = single_pipe()
        cls = classify(topo)
        assert cls.interior == frozenset()
        assert cls.boundary == {"inlet", "outlet"}

    def test_y_junction(self):
        cls = classify(y_network())
        assert cls.interior == {"junction"}
        assert len(cls.boundary) == 3

    def test_path_middle_vertex_interior(self):
        edges = [make_edge("a", "v0", "v1"), make_edge("b", "v1", "v2")]
        cls = classify(NetworkTopology(edges))
        assert cls.interior == {"v1"}
        assert cls.boundary == {"v0", "v2"}

    def test_partition(self):
        topo = loop_network(n_edges=3)
        cls = classify(topo)
        assert cls.interior | cls.boundary == set(topo.vertices)
        assert not (cls.interior & cls.boundary)


class TestValidation:
    def test_self_loop_rejected(self):
        with pytest.raises(TopologyError):
            make_edge("e", "v", "v")

    def test_isolated_vertex_rejected(self):
        with pytest.raises(TopologyError, match="isolated"):
            NetworkTopology([make_edge("e", "a", "b")], vertices=["a", "b", "c"])

    def test_disconnected_rejected(self):
        edges = [make_edge("e1", "a", "b"), make_edge("e2", "c", "d")]
        with pytest.raises(TopologyError, match="not connected"):
            NetworkTopology(edges)

    def test_duplicate_edge_names_rejected(self):
        edges = [make_edge("e", "a", "b"), make_edge("e", "b", "c")]
        with pytest.raises(TopologyError, match="unique"):
            NetworkTopology(edges)

    def test_mixed_epsilon_rejected(self):
        edges = [
            Edge("e1", "a", "b", PipeParameters(length=1.0, epsilon=0.1)),
            Edge("e2", "b", "c", PipeParameters(length=1.0, epsilon=0.2)),
        ]
        with pytest.raises(TopologyError, match="epsilon"):
            NetworkTopology(edges)


def test_handshake():
    for topo in (single_pipe(), y_network(), loop_network(n_edges=4)):
        assert sum(topo.degree(v) for v in topo.vertices) == 2 * len(topo.edges)


def test_round_trip():
    edges = [
        Edge("main", "in", "mid", PipeParameters(
            length=2.0, area=((0.0, 1.0), (1.0, 2.0), (2.0, 1.5)),
            friction=0.7, elevation=((0.0, 0.0), (2.0, 0.4)), gravity=9.81)),
        Edge("tail", "mid", "out", PipeParameters(length=1.5, area=1.2)),
    ]
    topo = NetworkTopology(edges)
    text = format_topology(topo, boundary_defaults={"in": 1.25})
    topo2, boundary = parse_topology(text)
    assert boundary == {"in": 1.25}
    assert topo2.vertices == topo.vertices
    for e1, e2 in zip(topo.edges, topo2.edges):
        assert e1.name == e2.name
        assert (e1.start, e1.end) == (e2.start, e2.end)
        assert e1.params.length == e2.params.length
        assert e1.params.area == e2.params.area
        assert e1.params.friction == e2.params.friction
        assert e1.params.elevation == e2.params.elevation
        assert e1.params.gravity == e2.params.gravity
    assert format_topology(topo2, boundary_defaults=boundary) == text


def test_parse_errors_carry_line_numbers():
    with pytest.raises(TopologyError, match="line 1"):
        parse_topology("stray content before any section\n[vertices]\nv\n")
    text = "[edge pipe]\nfrom = a\nto = b\n"  # missing length
    with pytest.raises(TopologyError, match="length"):
        parse_topology(text)


def test_with_helpers():
    topo = single_pipe(epsilon=0.5)
    assert topo.with_epsilon(0.1).epsilon == 0.1
    shifted = topo.with_friction_offset(0.25)
    assert shifted.edges[0].params.friction == pytest.approx(1.25)
