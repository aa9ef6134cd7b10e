# pylint: disable=logging-fstring-interpolation
"""Exact inner-product k-nearest-neighbor graphs over query and index images."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from .exceptions import FormatError, ParseError, ValidationError
from .parallel import chunked, run_parallel
from .store import DescriptorSet, DescriptorSets
from .utils import to_path

LOGGER = logging.getLogger(__name__)

GRAPH_HEADER = ("source", "target", "weight")
# Sources per matrix multiply. Fixed so the graph does not depend on the thread count.
BLOCK_SIZE = 256

Edge = tuple[str, float]


def sort_edges(edges: Iterable[Edge]) -> list[Edge]:
    """ Order edges by weight descending, then target id ascending. """
    return sorted(edges, key=lambda edge: (-edge[1], edge[0]))


@dataclass
class KnnGraph:
    """Weighted similarity graph. edges[v] lists (target, weight) sorted by
    weight descending then target id ascending. roles tags every vertex as
    query or index."""

    k: int
    edges: dict[str, list[Edge]] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"Invalid {self.k=}")
        for vertex in self.roles:
            self.edges.setdefault(vertex, [])

    def neighbors(self, vertex: str) -> list[Edge]:
        return self.edges.get(vertex, [])

    def has_vertex(self, vertex: str) -> bool:
        return vertex in self.edges or vertex in self.roles

    def role(self, vertex: str) -> Optional[str]:
        return self.roles.get(vertex)

    @property
    def vertices(self) -> list[str]:
        return sorted(set(self.edges) | set(self.roles))

    @property
    def edge_count(self) -> int:
        return sum(len(targets) for targets in self.edges.values())


def blend(a: DescriptorSet, b: DescriptorSet) -> DescriptorSet:
    """Concatenate two descriptor spaces per id and renormalize.
    The output keeps the id order and role of a.
    Args:
        a (DescriptorSet): First model's descriptors.
        b (DescriptorSet): Second model's descriptors, same ids as a.
    Returns:
        blended (DescriptorSet): Unit-norm descriptors of dim a.dim + b.dim.
    """
    only_a = set(a.ids) - set(b.ids)
    only_b = set(b.ids) - set(a.ids)
    if only_a or only_b:
        example = sorted(only_a | only_b)[:5]
        raise ValidationError(
            f"Blend inputs cover different ids: {len(only_a)} only in first, "
            f"{len(only_b)} only in second, e.g. {example}"
        )
    rows_b = [b.index_of(image_id) for image_id in a.ids]
    joined = np.hstack([a.vectors.astype(np.float64), b.vectors[rows_b].astype(np.float64)])
    if len(a.ids):
        norms = np.linalg.norm(joined, axis=1)
        if np.any(norms == 0.0):
            raise ValidationError("Blended descriptor has zero norm")
        joined = joined / norms[:, None]
    return DescriptorSet(a.ids, joined.astype(np.float32), a.role)


def top_k_block(
    sources: np.ndarray,
    source_self: np.ndarray,
    targets: np.ndarray,
    k: int,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Top-k target rows for a block of source rows.
    source_self[i] is the target row of source i itself, or -1."""
    sims = sources @ targets.T
    n_targets = targets.shape[0]
    take = min(k + 1, n_targets)
    if take < n_targets:
        cut = np.argpartition(-sims, take - 1, axis=1)[:, :take]
        floors = np.take_along_axis(sims, cut, axis=1).min(axis=1)
    else:
        floors = np.full(sims.shape[0], -np.inf)
    results = []
    for row in range(sims.shape[0]):
        # every target tied with the cut-off stays in, ties are then broken by row (= id) order
        candidates = np.flatnonzero(sims[row] >= floors[row])
        if source_self[row] >= 0:
            candidates = candidates[candidates != source_self[row]]
        weights = sims[row, candidates]
        order = np.lexsort((candidates, -weights))[:k]
        results.append((candidates[order], weights[order]))
    return results


def knn_build(
    targets: DescriptorSet,
    sources: DescriptorSet,
    k: int,
    threads: Optional[int] = None,
) -> KnnGraph:
    """Exact top-k inner-product neighbors of every source among targets.
    A source is never its own neighbor (matched by id). Ties go to the
    smaller target id.
    Args:
        targets (DescriptorSet): Vertices that can be neighbors.
        sources (DescriptorSet): Vertices that get a neighbor list.
        k (int): Neighbors per source.
        threads (int): Workers. Default: get_threads().
    Returns:
        graph (KnnGraph): Directed graph with one edge list per source.
    """
    if k < 1:
        raise ValidationError(f"Invalid {k=}")
    if targets.dim != sources.dim:
        raise ValidationError(f"Dimension mismatch: targets {targets.dim}, sources {sources.dim}")
    LOGGER.info(f"Running knn_build with {k=} for {len(sources)} sources and {len(targets)} targets")
    targets = targets.sorted_by_id()
    sources = sources.sorted_by_id()
    target_matrix = targets.vectors.astype(np.float64)
    source_matrix = sources.vectors.astype(np.float64)
    source_self = np.array(
        [targets.index_of(s) if s in targets else -1 for s in sources.ids], dtype=np.int64
    )
    edges: dict[str, list[Edge]] = {}
    if len(targets) == 0:
        edges = {source: [] for source in sources.ids}
    else:
        blocks = chunked(range(len(sources)), BLOCK_SIZE)
        jobs = [
            (source_matrix[block.start : block.stop], source_self[block.start : block.stop], target_matrix, k)
            for block in blocks
        ]
        for block, found in zip(blocks, run_parallel(top_k_block, jobs, threads)):
            for offset, (rows, weights) in enumerate(found):
                edges[sources.ids[block.start + offset]] = [
                    (targets.ids[row], float(weight)) for row, weight in zip(rows, weights)
                ]
    roles = {image_id: targets.role for image_id in targets.ids}
    roles.update({image_id: sources.role for image_id in sources.ids})
    roles = {vertex: role for vertex, role in roles.items() if role in ("query", "index")}
    graph = KnnGraph(k, edges, roles)
    LOGGER.info(f"Finished knn_build with {graph.edge_count} edges")
    return graph


def build_pipeline_graph(descriptors: DescriptorSets, k: int, threads: Optional[int] = None) -> KnnGraph:
    """ Query->index and index->index neighbor lists: targets are the index images. """
    sources = DescriptorSet(
        descriptors.query.ids + descriptors.index.ids,
        np.vstack([descriptors.query.vectors, descriptors.index.vectors]),
        "index",
    )
    graph = knn_build(descriptors.index, sources, k, threads)
    graph.roles = descriptors.roles()
    return graph


def symmetrize(graph: KnnGraph) -> KnnGraph:
    """ Add every reverse edge; parallel edges keep the larger weight. """
    merged: dict[str, dict[str, float]] = {vertex: {} for vertex in graph.edges}
    for source, targets in graph.edges.items():
        for target, weight in targets:
            for u, v in ((source, target), (target, source)):
                row = merged.setdefault(u, {})
                if weight > row.get(v, -np.inf):
                    row[v] = weight
    edges = {vertex: sort_edges(row.items()) for vertex, row in merged.items()}
    return KnnGraph(graph.k, edges, dict(graph.roles))


def knn_rankings(graph: KnnGraph, queries: Iterable[str], p: int = 100) -> dict[str, list[str]]:
    """ Similarity-sorted index neighbors of every query, truncated to p. """
    rankings = {}
    for query in queries:
        ranked = [target for target, _ in graph.neighbors(query) if graph.role(target) == "index"]
        rankings[query] = ranked[:p]
    return rankings


def save_graph(graph: KnnGraph, path: Union[str, Path]) -> None:
    """ Write the `source,target,weight` CSV, sources in id order, weights with 6 decimals. """
    sources, targets, weights = [], [], []
    for source in sorted(graph.edges):
        for target, weight in graph.edges[source]:
            sources.append(source)
            targets.append(target)
            weights.append(weight)
    frame = pd.DataFrame({"source": sources, "target": targets, "weight": weights})
    frame.to_csv(to_path(path), index=False, float_format="%.6f", lineterminator="\n")


def load_graph(path: Union[str, Path], roles: Optional[Mapping[str, str]] = None) -> KnnGraph:
    """Read a graph CSV. Vertices listed in roles but without edges are kept.
    k is the largest out-degree found."""
    path = to_path(path)
    try:
        frame = pd.read_csv(path, dtype={"source": str, "target": str}, keep_default_na=False)
    except pd.errors.EmptyDataError as err:
        raise FormatError(f"{path}: empty file, expected header {','.join(GRAPH_HEADER)}") from err
    except pd.errors.ParserError as err:
        raise ParseError(f"{path}: {err}") from err
    if tuple(frame.columns) != GRAPH_HEADER:
        raise FormatError(f"{path}: expected header {','.join(GRAPH_HEADER)}")
    weights = pd.to_numeric(frame["weight"], errors="coerce")
    if weights.isna().any():
        row = int(np.flatnonzero(weights.isna().to_numpy())[0])
        raise ParseError(f"{path}: weight is not a number", row + 2)
    edges: dict[str, list[Edge]] = {}
    for source, target, weight in zip(frame["source"], frame["target"], weights):
        edges.setdefault(source, []).append((target, float(weight)))
    # save_graph rounds to 6 decimals, which can tie weights that differed in memory;
    # re-sort so ties are broken by target id, the order of a freshly built graph
    edges = {source: sort_edges(targets) for source, targets in edges.items()}
    k = max((len(targets) for targets in edges.values()), default=1)
    return KnnGraph(max(k, 1), edges, dict(roles or {}))

