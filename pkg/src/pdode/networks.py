"""Programmatic builders for the bundled study networks."""

from __future__ import annotations

import numpy as np

from .net import Link, Network


def build_small13(seed: int = 2024) -> Network:
    """13-node grid test network: 27 links, 3 OD pairs.

    Four zone nodes (1, 5, 9, 10) hang off a 3x3 grid of road nodes via
    zero-delay connectors; all trips end at zone 9.  Road links are 0.5
    miles, 2000 veh/h, with free-flow speeds drawn once from U(20, 45)
    mph using ``seed`` (the bundled network file freezes one draw).
    """
    rng = np.random.default_rng(seed)
    # Grid rows: (2, 3, 4), (6, 7, 8), (11, 12, 13); zones 1, 5, 10 are
    # origins, zone 9 the destination below node 13.
    nodes = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13]
    grid_edges = [
        (2, 3), (3, 4),
        (6, 7), (7, 8),
        (11, 12), (12, 13),
        (2, 6), (6, 11),
        (3, 7), (7, 12),
        (4, 8), (8, 13),
    ]
    directed = []
    for u, v in grid_edges:
        directed.append((u, v))
        directed.append((v, u))
    # One direction dropped to land on 27 links; 13->12 points away from
    # the only destination, so no reasonable route needs it.
    directed.remove((13, 12))
    links = []
    next_id = 1
    for u, v in directed:
        links.append(
            Link(
                id=next_id,
                from_node=u,
                to_node=v,
                length=0.5,
                free_flow_speed=float(np.round(rng.uniform(20.0, 45.0), 1)),
                capacity=2000.0,
                is_connector=False,
            )
        )
        next_id += 1
    for u, v in [(1, 2), (5, 4), (10, 11), (13, 9)]:
        links.append(
            Link(
                id=next_id,
                from_node=u,
                to_node=v,
                length=0.1,
                free_flow_speed=60.0,
                capacity=10000.0,
                is_connector=True,
            )
        )
        next_id += 1
    od_pairs = [(1, 9), (5, 9), (10, 9)]
    return Network(nodes=nodes, links=links, od_pairs=od_pairs)


def build_bottleneck(
    capacity_vph: float = 2000.0,
    downstream_capacity_vph: float | None = None,
    link_length: float = 0.25,
    speed_mph: float = 30.0,
) -> Network:
    """Single-corridor net with one capacity-bounded link.

    Origin connector, the bottleneck link, a downstream detector link,
    and a destination connector.  The detector link's arrival flow is
    the bottleneck's capacity-bounded outflow.
    """
    if downstream_capacity_vph is None:
        downstream_capacity_vph = 10.0 * capacity_vph
    nodes = [1, 2, 3, 4, 5]
    links = [
        Link(id=1, from_node=1, to_node=2, length=0.1, free_flow_speed=60.0,
             capacity=10000.0, is_connector=True),
        Link(id=2, from_node=2, to_node=3, length=link_length,
             free_flow_speed=speed_mph, capacity=capacity_vph),
        Link(id=3, from_node=3, to_node=4, length=link_length,
             free_flow_speed=speed_mph, capacity=downstream_capacity_vph),
        Link(id=4, from_node=4, to_node=5, length=0.1, free_flow_speed=60.0,
             capacity=10000.0, is_connector=True),
    ]
    return Network(nodes=nodes, links=links, od_pairs=[(1, 5)])
