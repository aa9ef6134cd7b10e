# pylint: disable=logging-fstring-interpolation
"""Query expansion over spatially verified neighbors (QE-SV), on the query
side and, optionally, on the database side."""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .knn import KnnGraph, build_pipeline_graph
from .parallel import chunked, get_threads, run_parallel
from .store import DescriptorSet, DescriptorSets, LocalFeatureSet
from .sv import RansacParams, sv_rerank

LOGGER = logging.getLogger(__name__)

# Images per worker job.
EXPAND_CHUNK = 64


@dataclass(frozen=True)
class QeParams:
    sv_depth: int = 10
    expand_count: int = 2
    alpha: float = 0.0
    database_side: bool = True

    def __post_init__(self) -> None:
        if self.sv_depth < 0 or self.expand_count < 0:
            raise ValidationError(f"Invalid {self.sv_depth=} / {self.expand_count=}")
        if self.expand_count > self.sv_depth:
            raise ValidationError(
                f"expand_count ({self.expand_count}) must not exceed sv_depth ({self.sv_depth})"
            )
        if self.alpha < 0:
            raise ValidationError(f"Invalid {self.alpha=}, must be non-negative")


def expand_descriptor(
    query: np.ndarray, neighbors: Sequence[tuple[np.ndarray, float]], alpha: float = 0.0
) -> np.ndarray:
    """normalize(q + sum_i w_i d_i) with w_i = max(sim_i, 0) ** alpha.
    alpha = 0 is the plain average. No neighbors returns q unchanged.
    Args:
        query (np.ndarray): Unit-norm descriptor to expand.
        neighbors (sequence): (descriptor, similarity) pairs.
        alpha (float): Weight exponent, non-negative.
    """
    if not neighbors:
        return query
    total = query.astype(np.float64).copy()
    for descriptor, similarity in neighbors:
        if descriptor.shape != query.shape:
            raise ValidationError(
                f"Cannot expand descriptor of shape {query.shape} with one of shape {descriptor.shape}"
            )
        weight = np.power(max(float(similarity), 0.0), alpha)
        total += weight * descriptor.astype(np.float64)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return query
    return (total / norm).astype(np.float32)


def select_reliable(
    image: str,
    graph: KnnGraph,
    features: LocalFeatureSet,
    qe: QeParams,
    ransac: RansacParams,
) -> list[tuple[str, float]]:
    """The expand_count verified candidates with most inliers among the
    top sv_depth index neighbors of image, with their graph similarity."""
    if qe.expand_count == 0:
        return []
    top = [
        (target, weight)
        for target, weight in graph.neighbors(image)
        if target != image and graph.role(target) == "index"
    ][: qe.sv_depth]
    weights = dict(top)
    reranked = sv_rerank(image, [target for target, _ in top], features, ransac)
    verified = [target for target, count in reranked if count >= ransac.min_inliers]
    return [(target, weights[target]) for target in verified[: qe.expand_count]]


def expand_images(
    images: Sequence[str],
    descriptors: DescriptorSet,
    originals: DescriptorSet,
    graph: KnnGraph,
    features: LocalFeatureSet,
    qe: QeParams,
    ransac: RansacParams,
) -> tuple[np.ndarray, int]:
    """Expanded descriptors of images (rows of descriptors), always from the
    original, unexpanded index descriptors.
    Returns:
        vectors (np.ndarray): One expanded row per image.
        expanded (int): Number of images with at least one verified neighbor.
    """
    vectors = np.empty((len(images), descriptors.dim), dtype=np.float32)
    expanded = 0
    for row, image in enumerate(images):
        reliable = select_reliable(image, graph, features, qe, ransac)
        neighbors = [(originals[target], weight) for target, weight in reliable]
        vectors[row] = expand_descriptor(descriptors[image], neighbors, qe.alpha)
        expanded += bool(neighbors)
    return vectors, expanded


def _expand_side(
    side: DescriptorSet,
    originals: DescriptorSet,
    graph: KnnGraph,
    features: LocalFeatureSet,
    qe: QeParams,
    ransac: RansacParams,
    threads: int,
) -> DescriptorSet:
    missing = [image for image in side.ids if not graph.has_vertex(image)]
    if missing:
        raise ValidationError(f"{len(missing)} {side.role} images are not in the graph, e.g. {missing[:5]}")
    unverifiable = sum(image not in features for image in side.ids)
    if unverifiable:
        LOGGER.warning(f"{unverifiable} of {len(side)} {side.role} images have no local features")
    chunks = chunked(side.ids, EXPAND_CHUNK)
    jobs = [(chunk, side, originals, graph, features, qe, ransac) for chunk in chunks]
    results = run_parallel(expand_images, jobs, threads)
    if not results:
        return side
    vectors = np.vstack([vectors for vectors, _ in results])
    expanded = sum(count for _, count in results)
    LOGGER.info(f"Expanded {expanded} of {len(side)} {side.role} descriptors")
    return side.with_vectors(vectors)


def qe_sv_pass(
    graph: KnnGraph,
    descriptors: DescriptorSets,
    features: LocalFeatureSet,
    qe: QeParams,
    ransac: RansacParams,
    k: int,
    threads: Optional[int] = None,
) -> tuple[DescriptorSets, KnnGraph]:
    """One pass of spatially verified query expansion, then a rebuilt KNN graph.
    Args:
        graph (KnnGraph): Graph built from descriptors, with index neighbor
            lists for every query (and every index image for database side).
        descriptors (DescriptorSets): Query and index descriptors.
        features (LocalFeatureSet): Local features for verification.
        qe (QeParams): Expansion parameters.
        ransac (RansacParams): Verification parameters.
        k (int): Neighbors per source of the rebuilt graph.
        threads (int): Workers. Default: get_threads().
    Returns:
        expanded (DescriptorSets): Expanded query and index descriptors.
        graph (KnnGraph): knn graph rebuilt on the expanded descriptors.
    """
    threads = get_threads() if threads is None else threads
    LOGGER.info(f"Running qe_sv_pass with {qe=} and {len(features)} images with local features")
    query = _expand_side(descriptors.query, descriptors.index, graph, features, qe, ransac, threads)
    index = descriptors.index
    if qe.database_side:
        index = _expand_side(descriptors.index, descriptors.index, graph, features, qe, ransac, threads)
    expanded = DescriptorSets(query, index, descriptors.train)
    return expanded, build_pipeline_graph(expanded, k, threads)
