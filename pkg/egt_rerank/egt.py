# pylint: disable=logging-fstring-interpolation
"""Explore/exploit graph traversal (EGT) over trusted paths, and its
semi-supervised extension that routes paths through labeled training images.

The traversal starts with the query as the only trusted vertex. Explore:
neighbors of trusted vertices enter a max-priority queue keyed by the best
edge weight from the trusted set. Exploit: the top vertex is popped; if its
key reaches the threshold t it becomes trusted, is retrieved and explored,
otherwise it is only retrieved.
"""
import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field
from itertools import chain
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .exceptions import TraversalError, ValidationError
from .knn import Edge, KnnGraph, top_k_block
from .parallel import chunked, get_threads, run_parallel
from .store import DescriptorSet, DescriptorSets, LabelTable

LOGGER = logging.getLogger(__name__)

# Above every inner product of unit vectors.
MAX_WEIGHT = 2.0
HUB_PREFIX = "#label:"
# Keys lie in [-1, MAX_WEIGHT], so key / RANK_KEY_SCALE never bridges one epoch.
RANK_KEY_SCALE = 2.0 * (MAX_WEIGHT + 1.0)
VOTE_DEPTH = 3
TRAVERSAL_CHUNK = 32


def hub_id(label: int) -> str:
    return f"{HUB_PREFIX}{label}"


def is_hub(vertex: str) -> bool:
    return vertex.startswith(HUB_PREFIX)


def vertex_order(vertex: str) -> tuple[bool, str]:
    """ Image ids before label hubs, then code point order. """
    return (is_hub(vertex), vertex)


class GraphView(Protocol):
    def neighbors(self, vertex: str) -> Iterable[Edge]:
        ...

    def has_vertex(self, vertex: str) -> bool:
        ...


@dataclass(frozen=True)
class EgtParams:
    t: float
    p: int = 100
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.p < 1:
            raise TraversalError(f"Result budget must be positive, got {self.p=}")
        if self.max_steps is not None and self.max_steps < 1:
            raise TraversalError(f"Invalid {self.max_steps=}")

    def resolve_max_steps(self, k: int) -> int:
        """ max_steps, or 10 * p * k when unset. """
        if self.max_steps is not None:
            return self.max_steps
        return 10 * self.p * max(int(k), 1)


@dataclass(frozen=True)
class RankedItem:
    id: str
    score: float


@dataclass
class RankedList:
    query: str
    items: list[RankedItem] = field(default_factory=list)
    truncated: bool = False

    @property
    def ids(self) -> list[str]:
        return [item.id for item in self.items]

    def __len__(self) -> int:
        return len(self.items)


def rank_score(epoch: int, key: float) -> float:
    """ Strictly decreasing over traversal epochs; the key orders nothing across epochs. """
    return -float(epoch) + key / RANK_KEY_SCALE


def egt_traverse(
    graph: GraphView,
    query: str,
    params: EgtParams,
    retrievable: Callable[[str], bool],
    k: Optional[int] = None,
) -> RankedList:
    """Retrieve up to p vertices for query along trusted paths.
    Args:
        graph (GraphView): Symmetrized weighted graph.
        query (str): Start vertex.
        params (EgtParams): Threshold t, budget p, step cap.
        retrievable (callable): True for vertices that may be returned.
        k (int): Neighbors per vertex, for the default step cap. Default: graph.k.
    Returns:
        ranked (RankedList): Retrieved vertices in pop order.
    """
    if params.p < 1:
        raise TraversalError(f"Result budget must be positive, got {params.p=}")
    if not graph.has_vertex(query):
        raise TraversalError(f"Query {query!r} is not a vertex of the graph")
    max_steps = params.resolve_max_steps(k if k is not None else getattr(graph, "k", 1))

    trusted = {query}
    popped: set[str] = set()
    keys: dict[str, float] = {}
    heap: list[tuple[float, bool, str]] = []

    def explore(vertex: str) -> None:
        for neighbor, weight in graph.neighbors(vertex):
            if neighbor in trusted or neighbor in popped:
                continue
            if weight > keys.get(neighbor, -np.inf):
                keys[neighbor] = weight
                heapq.heappush(heap, (-weight, is_hub(neighbor), neighbor))

    explore(query)
    ranked = RankedList(query)
    pops = 0
    while heap and len(ranked.items) < params.p:
        neg_key, _, vertex = heapq.heappop(heap)
        if vertex in popped or -neg_key != keys[vertex]:
            continue
        if pops >= max_steps:
            ranked.truncated = True
            LOGGER.warning(
                f"EGT for {query!r} stopped at {max_steps=} with {len(ranked.items)} results"
            )
            break
        pops += 1
        popped.add(vertex)
        key = keys[vertex]
        if retrievable(vertex):
            ranked.items.append(RankedItem(vertex, rank_score(pops, key)))
        if key >= params.t:
            trusted.add(vertex)
            explore(vertex)
    return ranked


@dataclass
class LabelGraph:
    """One hub per label, joined to each training image of that label by a
    MAX_WEIGHT spoke. spokes holds both directions."""

    members: dict[int, list[str]] = field(default_factory=dict)
    spokes: dict[str, list[Edge]] = field(default_factory=dict)

    @property
    def hubs(self) -> list[str]:
        return [hub_id(label) for label in self.members]

    def __len__(self) -> int:
        return len(self.members)


def build_label_graph(labels: LabelTable) -> LabelGraph:
    """ Star sub-graph per label over the labeled training images. """
    members = {label: sorted(ids) for label, ids in labels.members().items()}
    spokes: dict[str, list[Edge]] = {}
    for label, ids in members.items():
        hub = hub_id(label)
        spokes[hub] = [(image_id, MAX_WEIGHT) for image_id in ids]
        for image_id in ids:
            spokes[image_id] = [(hub, MAX_WEIGHT)]
    LOGGER.debug(f"Built label graph with {len(members)} hubs over {len(labels)} images")
    return LabelGraph(members, spokes)


def _vote(top: Sequence[str], labels: LabelTable) -> Optional[tuple[int, str]]:
    """Label held by at least 2 of the top train images, with the best ranked
    image of that label as anchor. No majority gives None."""
    votes = Counter(labels[image_id] for image_id in top)
    winners = [label for label, count in votes.items() if count >= 2]
    if not winners:
        return None
    label = winners[0]
    anchor = next(image_id for image_id in top if labels[image_id] == label)
    return label, anchor


def _check_train(train: DescriptorSet, labels: LabelTable) -> None:
    if len(train) == 0:
        raise ValidationError("Label assignment needs a non-empty train set")
    unlabeled = [image_id for image_id in train.ids if image_id not in labels]
    if unlabeled:
        raise ValidationError(f"{len(unlabeled)} train images have no label, e.g. {unlabeled[:5]}")


def assign_label(
    image: str, descriptor: np.ndarray, train: DescriptorSet, labels: LabelTable
) -> Optional[tuple[int, str]]:
    """Majority vote over the labels of the top-3 most similar train images.
    Args:
        image (str): Id of the image to label, for logging.
        descriptor (np.ndarray): Its global descriptor.
        train (DescriptorSet): Labeled training descriptors.
        labels (LabelTable): Train labels.
    Returns:
        assignment (tuple): (label, anchor train id), or None on a tie.
    """
    _check_train(train, labels)
    train = train.sorted_by_id()
    [(rows, _)] = top_k_block(
        descriptor.astype(np.float64)[None, :],
        np.array([-1]),
        train.vectors.astype(np.float64),
        VOTE_DEPTH,
    )
    assignment = _vote([train.ids[row] for row in rows], labels)
    LOGGER.debug(f"Label assignment for {image!r}: {assignment}")
    return assignment


def _assign_block(
    ids: Sequence[str], vectors: np.ndarray, train: DescriptorSet, labels: LabelTable
) -> dict[str, Optional[tuple[int, str]]]:
    found = top_k_block(
        vectors.astype(np.float64),
        np.full(len(ids), -1),
        train.vectors.astype(np.float64),
        VOTE_DEPTH,
    )
    return {
        image_id: _vote([train.ids[row] for row in rows], labels)
        for image_id, (rows, _) in zip(ids, found)
    }


def assign_labels(
    descriptors: DescriptorSet,
    train: DescriptorSet,
    labels: LabelTable,
    threads: Optional[int] = None,
) -> dict[str, Optional[tuple[int, str]]]:
    """ assign_label for every image of descriptors, one matrix multiply per block. """
    _check_train(train, labels)
    train = train.sorted_by_id()
    blocks = chunked(range(len(descriptors)), 256)
    jobs = [
        (descriptors.ids[block.start : block.stop], descriptors.vectors[block.start : block.stop], train, labels)
        for block in blocks
    ]
    assignments: dict[str, Optional[tuple[int, str]]] = {}
    for found in run_parallel(_assign_block, jobs, threads):
        assignments.update(found)
    return assignments


@dataclass
class AugmentedGraph:
    """A symmetrized KNN graph joined to the label graph by MAX_WEIGHT anchor
    edges. Only index images are retrievable; train images and hubs are
    traversed but never returned."""

    base: KnnGraph
    label_graph: LabelGraph
    anchors: dict[str, list[Edge]] = field(default_factory=dict)
    assignments: dict[str, tuple[int, str]] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.base.k

    def neighbors(self, vertex: str) -> Iterable[Edge]:
        return chain(
            self.base.neighbors(vertex),
            self.anchors.get(vertex, ()),
            self.label_graph.spokes.get(vertex, ()),
        )

    def has_vertex(self, vertex: str) -> bool:
        return (
            self.base.has_vertex(vertex)
            or vertex in self.anchors
            or vertex in self.label_graph.spokes
        )

    def retrievable(self, vertex: str) -> bool:
        return self.base.role(vertex) == "index"


def augment(
    graph: KnnGraph,
    label_graph: LabelGraph,
    train: DescriptorSet,
    labels: LabelTable,
    descriptors: DescriptorSets,
    threads: Optional[int] = None,
) -> AugmentedGraph:
    """Anchor every query and index image that wins a label vote to the most
    similar train image of that label.
    Args:
        graph (KnnGraph): Symmetrized KNN graph.
        label_graph (LabelGraph): Label hubs and spokes.
        train (DescriptorSet): Train descriptors in the space of descriptors.
        labels (LabelTable): Train labels.
        descriptors (DescriptorSets): Query and index descriptors.
    """
    if train.dim != descriptors.index.dim:
        raise ValidationError(f"Train dim {train.dim} does not match index dim {descriptors.index.dim}")
    anchors: dict[str, list[Edge]] = {}
    assignments: dict[str, tuple[int, str]] = {}
    for side in (descriptors.query, descriptors.index):
        if len(side) == 0:
            continue
        for image_id, assignment in assign_labels(side, train, labels, threads).items():
            if assignment is None:
                continue
            _, anchor = assignment
            assignments[image_id] = assignment
            anchors.setdefault(image_id, []).append((anchor, MAX_WEIGHT))
            anchors.setdefault(anchor, []).append((image_id, MAX_WEIGHT))
    LOGGER.info(
        f"Anchored {len(assignments)} of {len(descriptors.query) + len(descriptors.index)} "
        f"images to {len(label_graph)} label sub-graphs"
    )
    return AugmentedGraph(graph, label_graph, anchors, assignments)


def semisup_egt(augmented: AugmentedGraph, query: str, params: EgtParams) -> RankedList:
    """ EGT on the augmented graph, retrieving index images only. """
    ranked = egt_traverse(augmented, query, params, augmented.retrievable)
    leaked = [item.id for item in ranked.items if not augmented.retrievable(item.id)]
    if leaked:
        raise TraversalError(f"Non-index vertices retrieved for {query!r}: {leaked[:5]}")
    return ranked


def _traverse_chunk(
    graph: GraphView,
    queries: Sequence[str],
    params: EgtParams,
    retrievable: Optional[Callable[[str], bool]],
) -> list[RankedList]:
    if retrievable is None:
        return [semisup_egt(graph, query, params) for query in queries]
    return [egt_traverse(graph, query, params, retrievable) for query in queries]


def rerank_all(
    graph: GraphView,
    queries: Sequence[str],
    params: EgtParams,
    retrievable: Optional[Callable[[str], bool]] = None,
    threads: Optional[int] = None,
) -> dict[str, RankedList]:
    """Independent traversals for every query, results keyed by query id.
    Without retrievable, graph must be an AugmentedGraph and semisup_egt runs."""
    threads = get_threads() if threads is None else threads
    LOGGER.info(f"Running EGT for {len(queries)} queries with {params=}")
    jobs = [(graph, chunk, params, retrievable) for chunk in chunked(list(queries), TRAVERSAL_CHUNK)]
    rankings: dict[str, RankedList] = {}
    for found in run_parallel(_traverse_chunk, jobs, threads):
        for ranked in found:
            rankings[ranked.query] = ranked
    truncated = sum(ranked.truncated for ranked in rankings.values())
    if truncated:
        LOGGER.warning(f"{truncated} traversals hit max_steps")
    return rankings
