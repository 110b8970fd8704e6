"""Road network description, time discretization, and path enumeration.

The flat vector layouts used throughout the package are interval-major:
the entry for entity ``e`` (an OD pair, path, or link) in interval ``h``
sits at position ``(h - 1) * num_entities + index(e)``, where ``h`` is the
1-based interval label and ``index(e)`` is the 0-based position of the
entity in the network's ordered entity list.  :func:`flat_index` is the
single place where the 1-based interval convention meets 0-based storage.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from pathlib import Path


class NetworkFormatError(ValueError):
    """Raised when a network or paths file cannot be parsed."""


class NetworkValidationError(ValueError):
    """Raised when parsed network data violates an invariant."""


class PathEnumerationError(ValueError):
    """Raised when an OD pair has no route."""


@dataclass(frozen=True)
class TimeGrid:
    """Discretization of the study period into equal intervals."""

    num_intervals: int
    interval_length: float  # seconds

    def __post_init__(self):
        if self.num_intervals < 1:
            raise NetworkValidationError("num_intervals must be >= 1")
        if not self.interval_length > 0:
            raise NetworkValidationError("interval_length must be positive")

    @property
    def horizon(self) -> float:
        """Total modeled departure period in seconds."""
        return self.num_intervals * self.interval_length


@dataclass(frozen=True)
class Link:
    """Directed road segment.  OD connectors bypass queueing entirely."""

    id: int
    from_node: int
    to_node: int
    length: float  # miles
    free_flow_speed: float  # miles/hour
    capacity: float  # vehicles/hour
    is_connector: bool = False

    def __post_init__(self):
        if not self.length > 0:
            raise NetworkValidationError(f"link {self.id}: length must be positive")
        if not self.free_flow_speed > 0:
            raise NetworkValidationError(f"link {self.id}: free_flow_speed must be positive")
        if not self.capacity > 0:
            raise NetworkValidationError(f"link {self.id}: capacity must be positive")

    @property
    def free_flow_time(self) -> float:
        """Traversal time in seconds at free flow; zero for connectors."""
        if self.is_connector:
            return 0.0
        return self.length / self.free_flow_speed * 3600.0


class Network:
    """Static network: nodes, ordered links, ordered OD pairs, index maps.

    Immutable after construction; safe to share across workers.
    """

    def __init__(self, nodes, links, od_pairs):
        self.nodes: tuple[int, ...] = tuple(nodes)
        self.links: tuple[Link, ...] = tuple(links)
        self.od_pairs: tuple[tuple[int, int], ...] = tuple(
            (int(r), int(s)) for r, s in od_pairs
        )
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise NetworkValidationError("duplicate node ids")
        self._link_index: dict[int, int] = {}
        for i, link in enumerate(self.links):
            if link.id in self._link_index:
                raise NetworkValidationError(f"duplicate link id {link.id}")
            if link.from_node not in node_set:
                raise NetworkValidationError(
                    f"link {link.id} references missing node {link.from_node}"
                )
            if link.to_node not in node_set:
                raise NetworkValidationError(
                    f"link {link.id} references missing node {link.to_node}"
                )
            self._link_index[link.id] = i
        self._od_index: dict[tuple[int, int], int] = {}
        for i, od in enumerate(self.od_pairs):
            if od in self._od_index:
                raise NetworkValidationError(f"duplicate OD pair {od}")
            if od[0] not in node_set or od[1] not in node_set:
                raise NetworkValidationError(f"OD pair {od} references missing node")
            self._od_index[od] = i
        # Outgoing links sorted by id so traversals are deterministic.
        out: dict[int, list[Link]] = {n: [] for n in self.nodes}
        for link in self.links:
            out[link.from_node].append(link)
        self._out_links = {n: tuple(sorted(ls, key=lambda l: l.id)) for n, ls in out.items()}

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def num_od_pairs(self) -> int:
        return len(self.od_pairs)

    def link_index(self, link_id: int) -> int:
        """0-based position of a link id in the ordered link list."""
        try:
            return self._link_index[link_id]
        except KeyError:
            raise KeyError(f"unknown link id {link_id}") from None

    def link_by_id(self, link_id: int) -> Link:
        return self.links[self.link_index(link_id)]

    def od_index(self, od: tuple[int, int]) -> int:
        """0-based position of an (origin, destination) pair."""
        try:
            return self._od_index[od]
        except KeyError:
            raise KeyError(f"unknown OD pair {od}") from None

    def out_links(self, node: int) -> tuple[Link, ...]:
        return self._out_links[node]


@dataclass(frozen=True)
class PathTable:
    """Enumerated routes, each a loop-free link-id sequence tagged with its OD.

    Paths are ordered by OD index, then by the enumeration order (free-flow
    time, ties broken by lexicographic link-id sequence), so the global path
    index is stable across runs.
    """

    od_of: tuple[int, ...]  # OD index per path
    link_ids: tuple[tuple[int, ...], ...]  # link-id sequence per path

    def __post_init__(self):
        if len(self.od_of) != len(self.link_ids):
            raise NetworkValidationError("od_of and link_ids length mismatch")

    @property
    def num_paths(self) -> int:
        return len(self.link_ids)

    def paths_for_od(self, od_index: int) -> list[int]:
        return [k for k, od in enumerate(self.od_of) if od == od_index]

    def validate(self, net: Network) -> None:
        """Check node contiguity, loop-freeness, and OD coverage."""
        seen_ods = set()
        for k, (od_idx, seq) in enumerate(zip(self.od_of, self.link_ids)):
            if not seq:
                raise NetworkValidationError(f"path {k} is empty")
            r, s = net.od_pairs[od_idx]
            node = r
            visited = {node}
            for lid in seq:
                link = net.link_by_id(lid)
                if link.from_node != node:
                    raise NetworkValidationError(f"path {k} is not node-contiguous at link {lid}")
                node = link.to_node
                if node in visited:
                    raise NetworkValidationError(f"path {k} revisits node {node}")
                visited.add(node)
            if node != s:
                raise NetworkValidationError(f"path {k} does not end at destination {s}")
            seen_ods.add(od_idx)
        missing = set(range(len(net.od_pairs))) - seen_ods
        if missing:
            raise NetworkValidationError(f"OD pairs without any path: {sorted(missing)}")


def path_free_flow_times(net: Network, paths: PathTable) -> list[float]:
    """Free-flow traversal time in seconds for each path."""
    return [
        sum(net.link_by_id(lid).free_flow_time for lid in seq)
        for seq in paths.link_ids
    ]


def enumerate_paths(net: Network, max_paths_per_od: int = 10) -> PathTable:
    """Enumerate up to ``max_paths_per_od`` shortest loop-free paths per OD.

    Paths are ranked by free-flow travel time; ties are broken by the
    lexicographic order of their link-id sequences, so the result is
    deterministic.  Raises :class:`PathEnumerationError` if some OD pair
    has no route at all.
    """
    if max_paths_per_od < 1:
        raise ValueError("max_paths_per_od must be >= 1")
    od_of: list[int] = []
    link_ids: list[tuple[int, ...]] = []
    for od_idx, (r, s) in enumerate(net.od_pairs):
        found: list[tuple[int, ...]] = []
        # Best-first search over loop-free partial paths; the heap order
        # (cost, link-id sequence) realizes the documented tie-breaking.
        heap: list[tuple[float, tuple[int, ...], int, frozenset[int]]] = [
            (0.0, (), r, frozenset((r,)))
        ]
        while heap and len(found) < max_paths_per_od:
            cost, seq, node, visited = heapq.heappop(heap)
            if node == s:
                if seq:
                    found.append(seq)
                continue
            for link in net.out_links(node):
                if link.to_node in visited:
                    continue
                heapq.heappush(
                    heap,
                    (
                        cost + link.free_flow_time,
                        seq + (link.id,),
                        link.to_node,
                        visited | {link.to_node},
                    ),
                )
        if not found:
            raise PathEnumerationError(f"no path for OD pair {(r, s)}")
        od_of.extend([od_idx] * len(found))
        link_ids.extend(found)
    table = PathTable(od_of=tuple(od_of), link_ids=tuple(link_ids))
    table.validate(net)
    return table


def flat_index(
    net: Network,
    entity: str,
    entity_index: int,
    interval: int,
    grid: TimeGrid,
    paths: PathTable | None = None,
) -> int:
    """Flat vector position of ``(entity, interval)``.

    ``entity_index`` is 0-based; ``interval`` is the 1-based interval label
    ``h`` in ``1..N``.  Returns the 0-based position
    ``(h - 1) * num_entities + entity_index``.
    """
    if entity == "od":
        count = net.num_od_pairs
    elif entity == "link":
        count = net.num_links
    elif entity == "path":
        if paths is None:
            raise ValueError("flat_index(entity='path') requires the paths table")
        count = paths.num_paths
    else:
        raise ValueError(f"unknown entity kind {entity!r}")
    if not 0 <= entity_index < count:
        raise IndexError(f"{entity} index {entity_index} out of range [0, {count})")
    if not 1 <= interval <= grid.num_intervals:
        raise IndexError(
            f"interval {interval} out of range [1, {grid.num_intervals}]"
        )
    return (interval - 1) * count + entity_index


def _parse_rows(rows, section, path):
    """Validate header and convert rows of one section to dicts."""
    headers = {
        "nodes": ["id"],
        "links": ["id", "from", "to", "length_miles", "vff_mph", "cap_vph", "connector_flag"],
        "od_pairs": ["origin", "destination"],
    }[section]
    if not rows:
        raise NetworkFormatError(f"{path}: section [{section}] is empty")
    got = [c.strip() for c in rows[0]]
    if got != headers:
        raise NetworkFormatError(
            f"{path}: section [{section}] expects header {headers}, got {got}"
        )
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(headers):
            raise NetworkFormatError(
                f"{path}: [{section}] row {lineno} has {len(row)} fields, expected {len(headers)}"
            )
        out.append(dict(zip(headers, (cell.strip() for cell in row))))
    return out


def _read_sections(network_file: Path) -> dict[str, list[dict]]:
    """Read the three sections from a single file or a three-file directory."""
    sections: dict[str, list] = {}
    if network_file.is_dir():
        for section in ("nodes", "links", "od_pairs"):
            part = network_file / f"{section}.csv"
            if not part.exists():
                raise NetworkFormatError(f"{network_file}: missing {part.name}")
            with open(part, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            sections[section] = _parse_rows(rows, section, part)
        return sections
    with open(network_file, newline="", encoding="utf-8") as fh:
        current = None
        buffers: dict[str, list] = {}
        for row in csv.reader(fh):
            if not row or not any(cell.strip() for cell in row):
                continue
            head = row[0].strip()
            if head.startswith("[") and head.endswith("]"):
                current = head[1:-1]
                if current not in ("nodes", "links", "od_pairs"):
                    raise NetworkFormatError(f"{network_file}: unknown section {head}")
                buffers[current] = []
                continue
            if current is None:
                raise NetworkFormatError(f"{network_file}: data before any [section] marker")
            buffers[current].append(row)
    for section in ("nodes", "links", "od_pairs"):
        if section not in buffers:
            raise NetworkFormatError(f"{network_file}: missing section [{section}]")
        sections[section] = _parse_rows(buffers[section], section, network_file)
    return sections


def _to_int(value: str, what: str, path) -> int:
    try:
        return int(value)
    except ValueError:
        raise NetworkFormatError(f"{path}: {what} is not an integer: {value!r}") from None


def _to_float(value: str, what: str, path) -> float:
    try:
        return float(value)
    except ValueError:
        raise NetworkFormatError(f"{path}: {what} is not a number: {value!r}") from None


def load_network(network_file) -> Network:
    """Load and validate a network from a sectioned CSV file or directory.

    Raises :class:`NetworkFormatError` on malformed input and
    :class:`NetworkValidationError` on invariant violations such as
    dangling node references or nonpositive link attributes.
    """
    path = Path(network_file)
    if not path.exists():
        raise NetworkFormatError(f"network file not found: {path}")
    sections = _read_sections(path)
    nodes = [_to_int(row["id"], "node id", path) for row in sections["nodes"]]
    links = []
    for row in sections["links"]:
        links.append(
            Link(
                id=_to_int(row["id"], "link id", path),
                from_node=_to_int(row["from"], "link from-node", path),
                to_node=_to_int(row["to"], "link to-node", path),
                length=_to_float(row["length_miles"], "link length", path),
                free_flow_speed=_to_float(row["vff_mph"], "link speed", path),
                capacity=_to_float(row["cap_vph"], "link capacity", path),
                is_connector=_to_int(row["connector_flag"], "connector flag", path) != 0,
            )
        )
    od_pairs = [
        (_to_int(row["origin"], "OD origin", path), _to_int(row["destination"], "OD destination", path))
        for row in sections["od_pairs"]
    ]
    if not od_pairs:
        raise NetworkValidationError(f"{path}: no OD pairs")
    return Network(nodes=nodes, links=links, od_pairs=od_pairs)


def load_paths(net: Network, paths_file) -> PathTable:
    """Load a fixed path table: one path per line, OD index then link ids."""
    path = Path(paths_file)
    if not path.exists():
        raise NetworkFormatError(f"paths file not found: {path}")
    od_of: list[int] = []
    link_ids: list[tuple[int, ...]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            fields = [cell.strip() for cell in row]
            od_idx = _to_int(fields[0], f"line {lineno} OD index", path)
            if not 0 <= od_idx < net.num_od_pairs:
                raise NetworkValidationError(f"{path}: line {lineno}: OD index {od_idx} out of range")
            if len(fields) < 2:
                raise NetworkFormatError(f"{path}: line {lineno}: path has no links")
            od_of.append(od_idx)
            link_ids.append(tuple(_to_int(f, f"line {lineno} link id", path) for f in fields[1:]))
    table = PathTable(od_of=tuple(od_of), link_ids=tuple(link_ids))
    table.validate(net)
    return table


def write_network_csv(net: Network, out_file) -> None:
    """Write a network back to the single-file sectioned CSV format."""
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["[nodes]"])
        w.writerow(["id"])
        for n in net.nodes:
            w.writerow([n])
        w.writerow(["[links]"])
        w.writerow(["id", "from", "to", "length_miles", "vff_mph", "cap_vph", "connector_flag"])
        for link in net.links:
            w.writerow(
                [
                    link.id,
                    link.from_node,
                    link.to_node,
                    f"{link.length:.6g}",
                    f"{link.free_flow_speed:.6g}",
                    f"{link.capacity:.6g}",
                    int(link.is_connector),
                ]
            )
        w.writerow(["[od_pairs]"])
        w.writerow(["origin", "destination"])
        for r, s in net.od_pairs:
            w.writerow([r, s])
