import numpy as np
import pytest

from conftest import undirected_graph, unit_rows
from egt_rerank.exceptions import ValidationError
from egt_rerank.knn import build_pipeline_graph, symmetrize
from egt_rerank.qe import QeParams, expand_descriptor, qe_sv_pass, select_reliable
from egt_rerank.store import DescriptorSet, DescriptorSets, Keypoints, LocalFeatureSet
from egt_rerank.sv import RansacParams
from egt_rerank.synthetic import SynthParams, gen_synthetic


def test_plain_average_with_alpha_zero():
    query = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    neighbors = [(np.array([0.0, 1.0, 0.0], dtype=np.float32), 0.2), (np.array([0.0, 0.0, 1.0], dtype=np.float32), 0.9)]
    expanded = expand_descriptor(query, neighbors)
    np.testing.assert_allclose(expanded, np.ones(3) / np.sqrt(3), atol=1e-6)


def test_alpha_weights_by_similarity():
    query = np.array([1.0, 0.0], dtype=np.float32)
    neighbors = [(np.array([0.0, 1.0], dtype=np.float32), 0.5)]
    expanded = expand_descriptor(query, neighbors, alpha=2.0)
    np.testing.assert_allclose(expanded, np.array([1.0, 0.25]) / np.hypot(1.0, 0.25), atol=1e-6)


def test_no_neighbors_returns_query_unchanged():
    query = np.array([0.6, 0.8], dtype=np.float32)
    assert expand_descriptor(query, []) is query


@pytest.mark.parametrize("kwargs", [{"expand_count": 3, "sv_depth": 2}, {"alpha": -1.0}, {"sv_depth": -1}])
def test_invalid_params(kwargs):
    with pytest.raises(ValidationError):
        QeParams(**kwargs)


def scene_features(rng, scenes: dict[str, int], n=25, dim=8) -> LocalFeatureSet:
    """ Images mapped to the same scene number share keypoints up to a random shift. """
    templates = {}
    entries = {}
    for image, scene in scenes.items():
        if scene not in templates:
            templates[scene] = (rng.uniform(0, 400, (n, 2)), unit_rows(rng, n, dim))
        xy, desc = templates[scene]
        entries[image] = Keypoints(xy + rng.uniform(-20, 20, 2), desc)
    return LocalFeatureSet(dim, entries)


def test_select_reliable_keeps_verified_index_neighbors(rng):
    roles = {"q": "query", "a": "index", "b": "index", "c": "index", "q2": "query"}
    graph = undirected_graph(
        {("q", "c"): 0.9, ("q", "a"): 0.8, ("q", "b"): 0.7, ("q", "q2"): 0.95}, roles
    )
    features = scene_features(rng, {"q": 1, "a": 1, "b": 1, "c": 2, "q2": 1})
    reliable = select_reliable("q", graph, features, QeParams(sv_depth=3, expand_count=2), RansacParams(seed=0))
    assert reliable == [("a", 0.8), ("b", 0.7)]


def test_select_reliable_respects_depth(rng):
    roles = {"q": "query", "a": "index", "b": "index", "c": "index"}
    graph = undirected_graph({("q", "c"): 0.9, ("q", "a"): 0.8, ("q", "b"): 0.7}, roles)
    features = scene_features(rng, {"q": 1, "a": 2, "b": 1, "c": 3})
    assert select_reliable("q", graph, features, QeParams(sv_depth=2, expand_count=2), RansacParams()) == []


def pipeline_inputs(rng):
    dim = 8
    query = DescriptorSet(["q0", "q1"], unit_rows(rng, 2, dim), "query")
    index = DescriptorSet([f"i{n}" for n in range(6)], unit_rows(rng, 6, dim), "index")
    descriptors = DescriptorSets(query, index)
    features = scene_features(rng, {image: 1 for image in query.ids + index.ids})
    return descriptors, features, build_pipeline_graph(descriptors, 4)


def test_qe_sv_pass_expands_both_sides(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    expanded, new_graph = qe_sv_pass(graph, descriptors, features, QeParams(), RansacParams(seed=1), k=4)
    assert expanded.query.ids == descriptors.query.ids
    assert not np.array_equal(expanded.query.vectors, descriptors.query.vectors)
    assert not np.array_equal(expanded.index.vectors, descriptors.index.vectors)
    np.testing.assert_allclose(np.linalg.norm(expanded.index.vectors, axis=1), 1.0, atol=1e-6)
    assert new_graph.k == 4
    assert set(new_graph.roles) == set(graph.roles)


def test_query_side_only(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    qe = QeParams(database_side=False)
    expanded, _ = qe_sv_pass(graph, descriptors, features, qe, RansacParams(seed=1), k=4)
    assert expanded.index == descriptors.index


def test_database_side_uses_original_descriptors(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    ransac = RansacParams(seed=1)
    qe = QeParams(expand_count=1)
    expanded, _ = qe_sv_pass(graph, descriptors, features, qe, ransac, k=4)
    image = descriptors.index.ids[0]
    [(neighbor, weight)] = select_reliable(image, graph, features, qe, ransac)
    expected = expand_descriptor(descriptors.index[image], [(descriptors.index[neighbor], weight)])
    np.testing.assert_array_equal(expanded.index[image], expected)


def test_images_without_features_are_kept(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    features = LocalFeatureSet(features.dim, {})
    expanded, _ = qe_sv_pass(graph, descriptors, features, QeParams(), RansacParams(), k=4)
    assert expanded.query == descriptors.query
    assert expanded.index == descriptors.index


def test_missing_graph_vertex_is_an_error(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    del graph.edges["q0"]
    del graph.roles["q0"]
    with pytest.raises(ValidationError):
        qe_sv_pass(graph, descriptors, features, QeParams(), RansacParams(), k=4)


def test_zero_expand_count_is_the_identity(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    qe = QeParams(sv_depth=3, expand_count=0)
    expanded, _ = qe_sv_pass(graph, descriptors, features, qe, RansacParams(seed=1), k=4)
    assert expanded.query == descriptors.query
    assert expanded.index == descriptors.index


def test_without_features_the_graph_is_rebuilt_unchanged(rng):
    descriptors, features, graph = pipeline_inputs(rng)
    _, new_graph = qe_sv_pass(graph, descriptors, LocalFeatureSet(features.dim, {}), QeParams(), RansacParams(), k=4)
    original = build_pipeline_graph(descriptors, 4)
    assert new_graph.edges == original.edges
    assert new_graph.roles == original.roles


def test_expansion_pulls_noisy_queries_towards_their_landmark():
    dataset = gen_synthetic(SynthParams(clusters=4, queries=3, index=12, train=2, dim=32, keypoints=30, local_dim=8))
    descriptors, features, _, truth = dataset
    graph = symmetrize(build_pipeline_graph(descriptors, 10))
    qe = QeParams(sv_depth=4, expand_count=2, database_side=False)
    expanded, _ = qe_sv_pass(graph, descriptors, features, qe, RansacParams(seed=3), k=10)

    def mean_relevant_similarity(queries):
        means = []
        for query, relevant in truth.entries.items():
            rows = np.array([descriptors.index[image] for image in sorted(relevant)])
            means.append(float(np.mean(rows @ queries[query])))
        return np.mean(means)

    assert mean_relevant_similarity(expanded.query) > mean_relevant_similarity(descriptors.query) + 0.05
