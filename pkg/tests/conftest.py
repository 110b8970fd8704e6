"""Shared fixtures: small networks used across the test modules."""

import pytest

from pdode.net import Link, Network, TimeGrid


def make_network(links, od_pairs):
    nodes = sorted({l.from_node for l in links} | {l.to_node for l in links})
    return Network(nodes=nodes, links=links, od_pairs=od_pairs)


@pytest.fixture
def single_link_net():
    """Origin -> destination through one road link (plus nothing else)."""
    links = [Link(id=1, from_node=1, to_node=2, length=0.5, free_flow_speed=30.0, capacity=2000.0)]
    return make_network(links, [(1, 2)])


@pytest.fixture
def diamond_net():
    """Two parallel two-link routes between nodes 1 and 4.

    Route A (links 1, 2) is faster than route B (links 3, 4).
    """
    links = [
        Link(id=1, from_node=1, to_node=2, length=0.5, free_flow_speed=36.0, capacity=2000.0),
        Link(id=2, from_node=2, to_node=4, length=0.5, free_flow_speed=36.0, capacity=2000.0),
        Link(id=3, from_node=1, to_node=3, length=0.5, free_flow_speed=30.0, capacity=2000.0),
        Link(id=4, from_node=3, to_node=4, length=0.5, free_flow_speed=30.0, capacity=2000.0),
    ]
    return make_network(links, [(1, 4)])


@pytest.fixture
def symmetric_diamond_net():
    """Two parallel routes with identical free-flow times and capacities."""
    links = [
        Link(id=1, from_node=1, to_node=2, length=0.5, free_flow_speed=30.0, capacity=1500.0),
        Link(id=2, from_node=2, to_node=4, length=0.5, free_flow_speed=30.0, capacity=1500.0),
        Link(id=3, from_node=1, to_node=3, length=0.5, free_flow_speed=30.0, capacity=1500.0),
        Link(id=4, from_node=3, to_node=4, length=0.5, free_flow_speed=30.0, capacity=1500.0),
    ]
    return make_network(links, [(1, 4)])


@pytest.fixture
def grid_100s():
    return TimeGrid(num_intervals=3, interval_length=100.0)


def toy_gradient_instance():
    """2-OD, 4-path, 6-link instance used by the gradient fidelity checks."""
    links = [
        Link(id=1, from_node=1, to_node=2, length=0.5, free_flow_speed=18.0, capacity=1200.0),
        Link(id=2, from_node=1, to_node=3, length=0.5, free_flow_speed=18.0, capacity=1200.0),
        Link(id=3, from_node=2, to_node=4, length=0.5, free_flow_speed=18.0, capacity=900.0),
        Link(id=4, from_node=3, to_node=4, length=0.5, free_flow_speed=18.0, capacity=1200.0),
        Link(id=5, from_node=2, to_node=3, length=0.5, free_flow_speed=18.0, capacity=1200.0),
        Link(id=6, from_node=3, to_node=2, length=0.5, free_flow_speed=18.0, capacity=1200.0),
    ]
    net = make_network(links, [(1, 4), (2, 4)])
    grid = TimeGrid(num_intervals=3, interval_length=100.0)
    return net, grid
