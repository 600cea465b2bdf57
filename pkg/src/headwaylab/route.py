"""Route model: terminus identification, direction segments, route completion.

Termini are the two edges where vehicles spend the most time per unit edge
length (configurable fallback: the two degree-1 extremes of a path graph).
Each direction is the modal edge sequence among terminus-to-terminus passages,
stitched through the graph where the sampling interval skips edges.  A point
then maps to a route-completion fraction in [0, 1): cumulative offset of its
snapped edge plus the along-edge projection, divided by the full loop length.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .graphs import RouteGraph


class RouteError(ValueError):
    pass


class InsufficientCoverageError(RouteError):
    pass


@dataclass
class DirectedEdge:
    edge_id: int
    forward: bool  # traversal from node a to node b as stored in the graph
    start_offset: float  # cumulative distance from the loop start
    length: float


@dataclass
class RouteModel:
    graph: RouteGraph
    termini: tuple[int, int]  # terminus edge ids; directions[0] starts at termini[0]
    directions: tuple[list[DirectedEdge], list[DirectedEdge]]
    loop_length: float
    rejection_radius: float

    def direction_span(self, d: int) -> tuple[float, float]:
        seq = self.directions[d]
        start = seq[0].start_offset
        end = seq[-1].start_offset + seq[-1].length
        return start / self.loop_length, end / self.loop_length

    def direction_length(self, d: int) -> float:
        return sum(e.length for e in self.directions[d])


class EdgeIndex:
    """Nearest-edge lookup via a KD-tree over densified edge samples."""

    def __init__(self, graph: RouteGraph, sample_step: float):
        self.graph = graph
        pts = []
        owners = []
        for eid, (a, b, ln) in graph.edges.items():
            pa, pb = graph.nodes[a], graph.nodes[b]
            n = max(1, int(math.ceil(ln / sample_step)))
            for k in range(n + 1):
                t = k / n
                pts.append((pa[0] + (pb[0] - pa[0]) * t, pa[1] + (pb[1] - pa[1]) * t))
                owners.append(eid)
        self.tree = cKDTree(np.asarray(pts))
        self.owners = np.asarray(owners)

    def _project(self, eid: int, x: float, y: float) -> tuple[float, float]:
        a, b, ln = self.graph.edges[eid]
        pa, pb = self.graph.nodes[a], self.graph.nodes[b]
        dx, dy = pb[0] - pa[0], pb[1] - pa[1]
        t = 0.0 if ln == 0 else ((x - pa[0]) * dx + (y - pa[1]) * dy) / (ln * ln)
        t = min(1.0, max(0.0, t))
        px, py = pa[0] + dx * t, pa[1] + dy * t
        return t * ln, math.hypot(x - px, y - py)

    def snap(self, x: float, y: float, k: int = 6, restrict: set[int] | None = None):
        """Return (edge_id, along_distance, distance) of the best projection
        among the edges owning the k nearest samples."""
        _, idx = self.tree.query((x, y), k=k)
        idx = np.atleast_1d(idx)
        best = None
        for eid in dict.fromkeys(self.owners[idx]):
            if restrict is not None and eid not in restrict:
                continue
            along, dist = self._project(int(eid), x, y)
            if best is None or dist < best[2]:
                best = (int(eid), along, dist)
        return best


def _graph_distances(graph: RouteGraph, sources: set[int]) -> dict[int, float]:
    dist = {n: 0.0 for n in sources}
    heap = [(0.0, n) for n in sources]
    adj = graph.adjacency()
    while heap:
        d, n = heapq.heappop(heap)
        if d > dist.get(n, math.inf):
            continue
        for m, eid in adj[n]:
            nd = d + graph.edges[eid][2]
            if nd < dist.get(m, math.inf):
                dist[m] = nd
                heapq.heappush(heap, (nd, m))
    return dist


def _shortest_node_path(graph: RouteGraph, src: int, dst: int) -> list[int] | None:
    if src == dst:
        return [src]
    adj = graph.adjacency()
    dist = {src: 0.0}
    prev: dict[int, tuple[int, int]] = {}
    heap = [(0.0, src)]
    while heap:
        d, n = heapq.heappop(heap)
        if n == dst:
            break
        if d > dist.get(n, math.inf):
            continue
        for m, eid in adj[n]:
            nd = d + graph.edges[eid][2]
            if nd < dist.get(m, math.inf):
                dist[m] = nd
                prev[m] = (n, eid)
                heapq.heappush(heap, (nd, m))
    if dst not in dist:
        return None
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]][0])
    return path[::-1]


def _edges_of_node_path(graph: RouteGraph, nodes: list[int]) -> list[tuple[int, bool]]:
    adj = graph.adjacency()
    out = []
    for a, b in zip(nodes, nodes[1:]):
        eid = min((e for m, e in adj[a] if m == b), key=lambda e: graph.edges[e][2], default=None)
        if eid is None:
            raise RouteError("broken node path")
        out.append((eid, graph.edges[eid][0] == a))
    return out


def _orient_chain(graph: RouteGraph, edge_ids: list[int]) -> list[tuple[int, bool]]:
    """Assign traversal orientations so consecutive edges share a node."""
    if not edge_ids:
        return []
    if len(edge_ids) == 1:
        return [(edge_ids[0], True)]
    out = []
    a0, b0, _ = graph.edges[edge_ids[0]]
    a1, b1, _ = graph.edges[edge_ids[1]]
    if b0 in (a1, b1):
        cur, fwd = b0, True
    elif a0 in (a1, b1):
        cur, fwd = a0, False
    else:
        raise RouteError("direction edges do not chain")
    out.append((edge_ids[0], fwd))
    for eid in edge_ids[1:]:
        a, b, _ = graph.edges[eid]
        if a == cur:
            out.append((eid, True))
            cur = b
        elif b == cur:
            out.append((eid, False))
            cur = a
        else:
            raise RouteError("direction edges do not chain")
    return out


def _stitch(graph: RouteGraph, edge_seq: list[int], start_node: int) -> list[tuple[int, bool]]:
    """Expand a coarse observed edge sequence into a contiguous directed path,
    filling gaps between consecutive observed edges by shortest paths."""
    result: list[tuple[int, bool]] = []
    cur = start_node
    for eid in edge_seq:
        a, b, _ = graph.edges[eid]
        # reach whichever endpoint is closer (by graph distance), then traverse
        best = None
        for enter, leave in ((a, b), (b, a)):
            nodes = _shortest_node_path(graph, cur, enter)
            if nodes is None:
                continue
            cost = sum(graph.edges[e][2] for e, _ in _edges_of_node_path(graph, nodes))
            if best is None or cost < best[0]:
                best = (cost, nodes, enter, leave)
        if best is None:
            raise RouteError(f"edge {eid} unreachable while stitching route")
        _, nodes, enter, leave = best
        hops = _edges_of_node_path(graph, nodes)
        for e, fwd in hops:
            if result and result[-1][0] == e:
                result.pop()  # immediate backtrack: drop the out-and-back pair
            else:
                result.append((e, fwd))
        if not result or result[-1][0] != eid:
            result.append((eid, graph.edges[eid][0] == enter))
        cur = leave
    return result


def derive_route_model(graph: RouteGraph, ts, rejection_radius: float,
                       terminus_mode: str = "dwell") -> RouteModel:
    """Identify termini and the two direction segments from snapped traces.

    terminus_mode "dwell" scores every edge by total snapped dwell time per
    unit length and picks the top two; "extremes" picks the two edges incident
    to degree-1 nodes of a path-shaped graph.
    """
    if len(graph.edges) < 2:
        raise RouteError("graph needs at least 2 edges")
    index = EdgeIndex(graph, sample_step=max(rejection_radius / 2, 1e-9))

    # snap all records; accumulate dwell time per edge
    dwell = defaultdict(float)
    snapped: dict[str, list[tuple[int, int, float]]] = {}  # vid -> [(t, edge, along)]
    for vid in ts.vehicles():
        recs = ts.traces[vid]
        rows = []
        for i, rec in enumerate(recs):
            hit = index.snap(rec.x, rec.y)
            if hit is None or hit[2] > rejection_radius:
                continue
            eid, along, _ = hit
            if i + 1 < len(recs):
                dt = min(recs[i + 1].t - rec.t, 300.0)
                dwell[eid] += dt
            rows.append((rec.t, eid, along))
        snapped[vid] = rows

    if terminus_mode == "extremes":
        degree = Counter()
        for a, b, _ in graph.edges.values():
            degree[a] += 1
            degree[b] += 1
        ends = [eid for eid, (a, b, _) in graph.edges.items() if degree[a] == 1 or degree[b] == 1]
        if len(ends) != 2:
            raise RouteError("extremes mode requires a path graph with exactly two ends")
        term_a, term_b = sorted(ends)
    else:
        scores = {eid: dwell.get(eid, 0.0) / graph.edges[eid][2] for eid in graph.edges}
        ranked = sorted(scores, key=lambda e: (-scores[e], e))
        first = ranked[0]
        # a terminus dwell can spread over several short edges, so the runner-up
        # by score may sit at the same end; require clear graph separation
        min_sep = 0.25 * graph.total_length()
        dist_from_first = _graph_distances(graph, set(graph.edges[first][:2]))
        second = None
        for eid in ranked[1:]:
            a, b, _ = graph.edges[eid]
            sep = min(dist_from_first.get(a, math.inf), dist_from_first.get(b, math.inf))
            if sep >= min_sep:
                second = eid
                break
        if second is None:
            second = ranked[1]
        term_a, term_b = sorted((first, second))

    # cut each vehicle's edge stream into terminus-to-terminus passages
    passages: dict[tuple[int, int], Counter] = {(term_a, term_b): Counter(), (term_b, term_a): Counter()}
    for vid, rows in snapped.items():
        cur_from = None
        seq: list[int] = []
        for _, eid, _ in rows:
            if eid in (term_a, term_b):
                if cur_from is not None and eid != cur_from and seq:
                    passages[(cur_from, eid)][tuple(seq)] += 1
                cur_from = eid
                seq = []
            elif cur_from is not None:
                if not seq or seq[-1] != eid:
                    seq.append(eid)
    if not passages[(term_a, term_b)] or not passages[(term_b, term_a)]:
        raise InsufficientCoverageError("need at least one complete passage in each direction")

    def modal(counter: Counter) -> list[int]:
        best = max(counter.items(), key=lambda kv: (kv[1], -len(kv[0])))
        return list(best[0])

    def direction(from_e: int, to_e: int) -> list[tuple[int, bool]]:
        coarse = modal(passages[(from_e, to_e)])
        a_from, b_from, _ = graph.edges[from_e]
        # start traversal at the far end of the from-terminus edge
        seq = _stitch(graph, [from_e] + coarse + [to_e], a_from)
        if not seq or seq[0][0] != from_e:
            seq = _stitch(graph, [from_e] + coarse + [to_e], b_from)
        # re-derive orientations by chaining shared nodes (the stitcher's
        # backtrack pruning can leave stale flags)
        return _orient_chain(graph, [e for e, _ in seq])

    dir1 = direction(term_a, term_b)
    dir2 = direction(term_b, term_a)

    directed: list[list[DirectedEdge]] = []
    offset = 0.0
    for seq in (dir1, dir2):
        lst = []
        for eid, fwd in seq:
            ln = graph.edges[eid][2]
            lst.append(DirectedEdge(eid, fwd, offset, ln))
            offset += ln
        directed.append(lst)
    loop_length = offset
    if loop_length <= 0:
        raise RouteError("degenerate route of zero length")
    return RouteModel(graph, (term_a, term_b), (directed[0], directed[1]),
                      loop_length, rejection_radius)


class UnmatchedMeasurement(RouteError):
    pass


def route_completion(rm: RouteModel, point: tuple[float, float], last_terminus: int,
                     index: EdgeIndex | None = None) -> float:
    """Fraction in [0, 1) of the full loop at the given point, travelling in
    the direction that starts at last_terminus."""
    d = 0 if last_terminus == rm.termini[0] else 1
    seq = rm.directions[d]
    candidates = {e.edge_id for e in seq}
    index = index or EdgeIndex(rm.graph, sample_step=max(rm.rejection_radius / 2, 1e-9))
    hit = index.snap(point[0], point[1], restrict=candidates)
    if hit is None or hit[2] > rm.rejection_radius:
        raise UnmatchedMeasurement(f"point beyond rejection radius {rm.rejection_radius}")
    eid, along, _ = hit
    for de in seq:
        if de.edge_id == eid:
            within = along if de.forward else de.length - along
            frac = (de.start_offset + within) / rm.loop_length
            return min(frac, math.nextafter(1.0, 0.0))
    raise UnmatchedMeasurement("snapped edge outside direction sequence")


def write_route_model(rm: RouteModel, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"termini {rm.termini[0]} {rm.termini[1]}\n")
        fh.write(f"loop_length {rm.loop_length!r}\n")
        fh.write(f"rejection_radius {rm.rejection_radius!r}\n")
        for d, seq in enumerate(rm.directions):
            for de in seq:
                fh.write(f"segment {d} {de.edge_id} {int(de.forward)} {de.start_offset!r} {de.length!r}\n")


def read_route_model(path: str, graph: RouteGraph) -> RouteModel:
    termini = None
    loop_length = None
    radius = None
    dirs: dict[int, list[DirectedEdge]] = {0: [], 1: []}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "termini":
                termini = (int(parts[1]), int(parts[2]))
            elif parts[0] == "loop_length":
                loop_length = float(parts[1])
            elif parts[0] == "rejection_radius":
                radius = float(parts[1])
            elif parts[0] == "segment":
                dirs[int(parts[1])].append(
                    DirectedEdge(int(parts[2]), bool(int(parts[3])), float(parts[4]), float(parts[5])))
    if termini is None or loop_length is None or radius is None:
        raise RouteError("incomplete route model file")
    offsets = [de.start_offset for de in dirs[0] + dirs[1]]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise RouteError("cumulative offsets must strictly increase")
    return RouteModel(graph, termini, (dirs[0], dirs[1]), loop_length, radius)
