# pylint: disable=logging-fstring-interpolation
"""Seeded synthetic landmark data for desk-scale runs of the pipeline.

Every cluster is one landmark with a unit-norm center c and a displaced
sub-center at bridge_angle degrees from c. Most images scatter around c;
bridge images sit along the arc from c to the sub-center, so the far ones
share little similarity with the queries while every step along the arc is
small. Training images follow the same split, with their bridge share placed
on the far part of the arc. Queries scatter with query_sigma, wider than the
sigma of index and training images, so averaging a query with verified index
neighbors pulls it back towards c. All images of a landmark carry an affine
copy of a common keypoint template plus random outlier keypoints.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .exceptions import ValidationError
from .knn import blend
from .store import (
    DescriptorSet,
    DescriptorSets,
    GroundTruth,
    Keypoints,
    LabelTable,
    LocalFeatureSet,
    save_descriptors,
    save_ground_truth,
    save_labels,
    save_local_features,
)
from .utils import to_path

LOGGER = logging.getLogger(__name__)

IMAGE_SIZE = (640.0, 480.0)
KEYPOINT_JITTER = 0.5
LOCAL_NOISE = 0.1


@dataclass(frozen=True)
class SynthParams:
    clusters: int = 20
    queries: int = 5
    index: int = 40
    train: int = 10
    dim: int = 64
    sigma: float = 0.45
    query_sigma: float = 1.0
    bridge_fraction: float = 0.3
    bridge_angle: float = 150.0
    keypoints: int = 40
    outlier_fraction: float = 0.3
    local_dim: int = 32
    orthogonal_centers: bool = False
    seed: int = 42

    def __post_init__(self) -> None:
        counts = (self.clusters, self.queries, self.index, self.train, self.keypoints)
        if min(counts) < 0:
            raise ValidationError(f"Synthetic counts must be non-negative, got {counts}")
        if self.sigma < 0 or self.query_sigma < 0:
            raise ValidationError(f"Invalid {self.sigma=} / {self.query_sigma=}")
        if not 0 <= self.bridge_fraction <= 1 or not 0 <= self.outlier_fraction <= 1:
            raise ValidationError("bridge_fraction and outlier_fraction must be in [0, 1]")
        if self.dim < 2 or self.local_dim < 1:
            raise ValidationError(f"Invalid {self.dim=} / {self.local_dim=}, dim must be at least 2")
        if self.orthogonal_centers and 2 * self.clusters > self.dim:
            raise ValidationError(
                f"orthogonal_centers needs dim >= 2 * clusters, got {self.dim=}, {self.clusters=}"
            )


@dataclass
class SyntheticDataset:
    """Descriptors (full and split into two model views), local features,
    train labels and ground truth. Unpacks as
    (descriptors, features, labels, truth)."""

    descriptors: DescriptorSets
    views: dict[str, tuple[DescriptorSet, DescriptorSet]]
    features: LocalFeatureSet
    labels: LabelTable
    truth: GroundTruth
    cluster_of: dict[str, int] = field(default_factory=dict)

    def __iter__(self) -> Iterator:
        return iter((self.descriptors, self.features, self.labels, self.truth))

    def save(self, out_dir: Union[str, Path]) -> dict[str, Path]:
        """Write the dataset files into out_dir.
        Returns:
            paths (dict): File paths by name, e.g. paths["query.a"].
        """
        out_dir = to_path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for role in ("query", "index"):
            for tag, view in zip("ab", self.views[role]):
                paths[f"{role}.{tag}"] = out_dir / f"{role}.{tag}.gds"
                save_descriptors(view, paths[f"{role}.{tag}"])
        # train images are stored already blended
        paths["train"] = out_dir / "train.gds"
        save_descriptors(blend(*self.views["train"]), paths["train"])
        paths["local"] = out_dir / "local.glf"
        save_local_features(self.features, paths["local"])
        paths["labels"] = out_dir / "labels.csv"
        save_labels(self.labels, paths["labels"])
        paths["truth"] = out_dir / "truth.csv"
        save_ground_truth(self.truth, paths["truth"])
        return paths


def _unit(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


def _centers(params: SynthParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Cluster centers and, per cluster, a unit direction orthogonal to its
    center that the bridge arc turns towards."""
    if params.orthogonal_centers:
        basis, _ = np.linalg.qr(rng.standard_normal((params.dim, 2 * params.clusters)))
        return basis[:, 0::2].T, basis[:, 1::2].T
    centers = np.empty((params.clusters, params.dim))
    turns = np.empty((params.clusters, params.dim))
    for cluster in range(params.clusters):
        centers[cluster] = _unit(rng.standard_normal(params.dim))
        turn = rng.standard_normal(params.dim)
        turns[cluster] = _unit(turn - (turn @ centers[cluster]) * centers[cluster])
    return centers, turns


def _members(directions: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """normalize(direction + sigma * noise), noise of expected unit length."""
    noise = rng.standard_normal(directions.shape) / np.sqrt(directions.shape[1])
    members = directions + sigma * noise
    return members / np.linalg.norm(members, axis=1, keepdims=True)


def _arc(center: np.ndarray, turn: np.ndarray, angles: np.ndarray) -> np.ndarray:
    radians = np.deg2rad(angles)[:, None]
    return np.cos(radians) * center[None, :] + np.sin(radians) * turn[None, :]


def _split(count: int, fraction: float) -> tuple[int, int]:
    bridges = int(round(count * fraction))
    return count - bridges, bridges


def _random_affine(rng: np.random.Generator) -> np.ndarray:
    """ Random similarity-plus-shear map about the image center, as 2x3. """
    scale = rng.uniform(0.8, 1.25)
    angle = np.deg2rad(rng.uniform(-20.0, 20.0))
    shear = rng.uniform(-0.1, 0.1)
    linear = scale * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    linear = linear @ np.array([[1.0, shear], [0.0, 1.0]])
    middle = np.array(IMAGE_SIZE) / 2
    shift = middle - linear @ middle + rng.uniform(-30.0, 30.0, size=2)
    return np.hstack([linear, shift[:, None]])


def _image_keypoints(
    template_xy: np.ndarray,
    template_desc: np.ndarray,
    outliers: int,
    rng: np.random.Generator,
) -> Keypoints:
    transform = _random_affine(rng)
    xy = template_xy @ transform[:, :2].T + transform[:, 2]
    xy = xy + rng.normal(0.0, KEYPOINT_JITTER, size=xy.shape)
    local_dim = template_desc.shape[1]
    desc = template_desc + LOCAL_NOISE * rng.standard_normal(template_desc.shape) / np.sqrt(local_dim)
    out_xy = rng.uniform((0.0, 0.0), IMAGE_SIZE, size=(outliers, 2))
    out_desc = rng.standard_normal((outliers, local_dim))
    xy = np.vstack([xy, out_xy])
    desc = np.vstack([desc, out_desc])
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    order = rng.permutation(xy.shape[0])
    return Keypoints(xy[order], desc[order])


def _views(descriptors: DescriptorSet) -> tuple[DescriptorSet, DescriptorSet]:
    """ Split full descriptors into two halves, each renormalized, as two model outputs. """
    half = descriptors.dim // 2
    views = []
    for part in (descriptors.vectors[:, :half], descriptors.vectors[:, half:]):
        part = part.astype(np.float64)
        norms = np.linalg.norm(part, axis=1, keepdims=True)
        part = np.divide(part, norms, out=np.full_like(part, 1.0 / np.sqrt(part.shape[1])), where=norms > 0)
        views.append(descriptors.with_vectors(part.astype(np.float32)))
    return views[0], views[1]


def gen_synthetic(params: SynthParams = SynthParams()) -> SyntheticDataset:
    """Generate a seeded synthetic dataset.
    Args:
        params (SynthParams): Sizes, noise and seed.
    Returns:
        dataset (SyntheticDataset): Unpacks to (descriptors, features, labels, truth).
    """
    LOGGER.info(f"Generating synthetic dataset with {params=}")
    rng = np.random.default_rng(params.seed)
    centers, turns = _centers(params, rng)
    core_index, bridge_index = _split(params.index, params.bridge_fraction)
    core_train, bridge_train = _split(params.train, params.bridge_fraction)
    template_count = params.keypoints - int(round(params.keypoints * params.outlier_fraction))
    outlier_count = params.keypoints - template_count

    rows: dict[str, list] = {"query": [], "index": [], "train": []}
    ids: dict[str, list[str]] = {"query": [], "index": [], "train": []}
    features: dict[str, Keypoints] = {}
    labels: dict[str, int] = {}
    truth: dict[str, set[str]] = {}
    cluster_of: dict[str, int] = {}

    for cluster in range(params.clusters):
        center, turn = centers[cluster], turns[cluster]
        index_angles = np.concatenate(
            [np.zeros(core_index), params.bridge_angle * np.arange(1, bridge_index + 1) / max(bridge_index, 1)]
        )
        if bridge_train > 1:
            far = params.bridge_angle * (2.0 / 3.0 + np.arange(bridge_train) / (3.0 * (bridge_train - 1)))
        else:
            far = np.full(bridge_train, params.bridge_angle)
        train_angles = np.concatenate([np.zeros(core_train), far])
        directions = {
            "query": _arc(center, turn, np.zeros(params.queries)),
            "index": _arc(center, turn, index_angles),
            "train": _arc(center, turn, train_angles),
        }
        template_xy = rng.uniform((40.0, 40.0), (IMAGE_SIZE[0] - 40.0, IMAGE_SIZE[1] - 40.0), size=(template_count, 2))
        template_desc = rng.standard_normal((template_count, params.local_dim))
        template_desc /= np.linalg.norm(template_desc, axis=1, keepdims=True)

        for role in ("query", "index", "train"):
            sigma = params.query_sigma if role == "query" else params.sigma
            members = _members(directions[role], sigma, rng)
            for number, vector in enumerate(members):
                image_id = f"{role[0]}{cluster:04x}{number:04x}"
                ids[role].append(image_id)
                rows[role].append(vector)
                cluster_of[image_id] = cluster
                if role == "train":
                    labels[image_id] = cluster + 1
                else:
                    features[image_id] = _image_keypoints(template_xy, template_desc, outlier_count, rng)
        relevant = {image_id for image_id in ids["index"] if cluster_of[image_id] == cluster}
        for image_id in ids["query"][-params.queries :] if params.queries else []:
            truth[image_id] = set(relevant)

    def to_set(role: str) -> DescriptorSet:
        vectors = np.array(rows[role], dtype=np.float32).reshape(-1, params.dim)
        return DescriptorSet(ids[role], vectors, role)

    descriptors = DescriptorSets(to_set("query"), to_set("index"), to_set("train"))
    views = {role: _views(getattr(descriptors, role)) for role in ("query", "index", "train")}
    dataset = SyntheticDataset(
        descriptors,
        views,
        LocalFeatureSet(params.local_dim, features),
        LabelTable(labels),
        GroundTruth(truth),
        cluster_of,
    )
    LOGGER.info(
        f"Generated {len(descriptors.query)} queries, {len(descriptors.index)} index and "
        f"{len(descriptors.train)} train images in {params.clusters} clusters"
    )
    return dataset
