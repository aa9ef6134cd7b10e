import numpy as np
import pytest

import egt_rerank
from egt_rerank.knn import KnnGraph, sort_edges
from egt_rerank.store import DescriptorSet, Keypoints, LocalFeatureSet


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    vectors = rng.standard_normal((n, dim))
    return (vectors / np.linalg.norm(vectors, axis=1, keepdims=True)).astype(np.float32)


def make_set(prefix: str, n: int, dim: int, role: str = "index", seed: int = 0) -> DescriptorSet:
    rng = np.random.default_rng(seed)
    return DescriptorSet([f"{prefix}{i:03d}" for i in range(n)], unit_rows(rng, n, dim), role)


def undirected_graph(weights: dict, roles: dict, k: int = 10) -> KnnGraph:
    """ KnnGraph with both directions of every {(u, v): w} edge. """
    edges = {vertex: [] for vertex in roles}
    for (u, v), weight in weights.items():
        edges[u].append((v, weight))
        edges[v].append((u, weight))
    return KnnGraph(k, {vertex: sort_edges(row) for vertex, row in edges.items()}, dict(roles))


def affine_keypoints(xy: np.ndarray, desc: np.ndarray, transform: np.ndarray) -> Keypoints:
    moved = xy @ transform[:, :2].T + transform[:, 2]
    return Keypoints(moved, desc)


@pytest.fixture(autouse=True)
def single_thread():
    """ Tests run with one worker unless they set another count. """
    previous = egt_rerank.THREADS
    egt_rerank.set_threads(1)
    yield
    egt_rerank.THREADS = previous


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def query_index():
    return make_set("q", 6, 16, "query", seed=1), make_set("i", 40, 16, "index", seed=2)


@pytest.fixture
def shared_template(rng):
    """Local features of three images: two views of one planar scene and an
    unrelated image."""
    n, dim = 30, 16
    xy = rng.uniform((0, 0), (640, 480), size=(n, 2))
    desc = unit_rows(rng, n, dim)
    first = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    second = np.array([[0.9, -0.2, 15.0], [0.15, 1.1, -10.0]])
    features = LocalFeatureSet(
        dim,
        {
            "img_a": affine_keypoints(xy, desc, first),
            "img_b": affine_keypoints(xy, desc, second),
            "img_c": Keypoints(rng.uniform((0, 0), (640, 480), size=(n, 2)), unit_rows(rng, n, dim)),
        },
    )
    return features, second
