# pylint: disable=logging-fstring-interpolation
"""Spatial verification: ratio-test matching of local features and RANSAC
fitting of a 6-dof affine map between two images."""
import hashlib
import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .store import Keypoints, LocalFeatureSet

LOGGER = logging.getLogger(__name__)

# |det| of the 3x3 sample system below which three points count as collinear.
DEGENERATE_DET = 1e-6


@dataclass(frozen=True)
class Correspondence:
    """ A putative match from a keypoint in one image to one in the other. """

    src: tuple[float, float]
    dst: tuple[float, float]
    score: float
    src_index: int = -1
    dst_index: int = -1


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 1000
    inlier_threshold: float = 3.0
    ratio: float = 0.8
    min_inliers: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValidationError(f"Invalid RANSAC {self.iterations=}")
        if self.inlier_threshold <= 0:
            raise ValidationError(f"Invalid RANSAC {self.inlier_threshold=}")
        if not 0 < self.ratio <= 1:
            raise ValidationError(f"Ratio test bound must be in (0, 1], got {self.ratio}")
        if self.min_inliers < 0:
            raise ValidationError(f"Invalid {self.min_inliers=}")


@dataclass
class VerificationResult:
    inlier_count: int = 0
    verified: bool = False
    transform: Optional[np.ndarray] = None
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def match_features(a: Keypoints, b: Keypoints, ratio: float = 0.8) -> list[Correspondence]:
    """Nearest neighbor in b for every keypoint of a, kept if it passes the
    distance-ratio test (1 - s1) / (1 - s2) <= ratio on the best and second
    best inner products. A single candidate in b always passes.
    Args:
        a (Keypoints): Keypoints of the first image.
        b (Keypoints): Keypoints of the second image.
        ratio (float): Ratio test bound in (0, 1].
    Returns:
        matches (list): Correspondences by score descending, then (a, b) index.
    """
    if len(a) == 0 or len(b) == 0:
        return []
    if a.desc.shape[1] != b.desc.shape[1]:
        raise ValidationError(
            f"Local descriptor dims differ: {a.desc.shape[1]} vs {b.desc.shape[1]}"
        )
    sims = a.desc.astype(np.float64) @ b.desc.astype(np.float64).T
    # stable sort on -sim: equal similarities resolve to the smaller b index
    order = np.argsort(-sims, axis=1, kind="stable")
    rows = np.arange(len(a))
    best = order[:, 0]
    s1 = sims[rows, best]
    if len(b) > 1:
        s2 = sims[rows, order[:, 1]]
        near = 1.0 - s1
        far = 1.0 - s2
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(far > 0, near / np.where(far > 0, far, 1.0), 1.0)
        keep = ratios <= ratio
    else:
        keep = np.ones(len(a), dtype=bool)
    matches = [
        Correspondence(
            src=(float(a.xy[i, 0]), float(a.xy[i, 1])),
            dst=(float(b.xy[best[i], 0]), float(b.xy[best[i], 1])),
            score=float(s1[i]),
            src_index=int(i),
            dst_index=int(best[i]),
        )
        for i in np.flatnonzero(keep)
    ]
    matches.sort(key=lambda c: (-c.score, c.src_index, c.dst_index))
    return matches


def _homogeneous(points: np.ndarray) -> np.ndarray:
    return np.hstack([points, np.ones((points.shape[0], 1))])


def _sample_triples(n: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    """Index triples to try: every 3-subset if there are no more than
    iterations of them, otherwise iterations random triples of distinct indices."""
    if comb(n, 3) <= iterations:
        return np.array(list(combinations(range(n), 3)), dtype=np.int64).reshape(-1, 3)
    first = rng.integers(0, n, iterations)
    second = rng.integers(0, n - 1, iterations)
    second += second >= first
    low, high = np.minimum(first, second), np.maximum(first, second)
    third = rng.integers(0, n - 2, iterations)
    third += third >= low
    third += third >= high
    return np.stack([first, second, third], axis=1)


def _unverified(n: int, params: RansacParams) -> VerificationResult:
    return VerificationResult(verified=params.min_inliers == 0, inliers=np.zeros(n, dtype=bool))


def reprojection_errors(transform: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """ Pixel distance between transform(src) and dst, transform is 2x3. """
    return np.linalg.norm(_homogeneous(src) @ transform.T - dst, axis=1)


def ransac_affine(
    correspondences: Sequence[Correspondence],
    params: RansacParams = RansacParams(),
    seed: Optional[np.random.SeedSequence] = None,
) -> VerificationResult:
    """Fit an affine map to correspondences with RANSAC and count inliers.
    Every round solves the exact affine map through 3 correspondences;
    collinear samples are skipped. The model with most inliers wins (ties:
    first found) and is refit by least squares on its consensus set; the
    reported inliers are those of the refit.
    Args:
        correspondences (sequence): Putative matches.
        params (RansacParams): Iterations, threshold and acceptance bound.
        seed (SeedSequence): Overrides params.seed, e.g. a per-pair seed.
    Returns:
        result (VerificationResult): Inlier count, verdict and 2x3 transform.
    """
    n = len(correspondences)
    if n < 3:
        return _unverified(n, params)
    src = np.array([c.src for c in correspondences], dtype=np.float64)
    dst = np.array([c.dst for c in correspondences], dtype=np.float64)
    rng = np.random.default_rng(seed if seed is not None else params.seed)
    triples = _sample_triples(n, params.iterations, rng)

    systems = _homogeneous(src)[triples]
    dets = np.linalg.det(systems)
    valid = np.abs(dets) > DEGENERATE_DET
    if not np.any(valid):
        return _unverified(n, params)
    systems, targets = systems[valid], dst[triples[valid]]
    # rows of each solution are the affine coefficients for x and y: dst = [x y 1] @ solution
    solutions = np.linalg.solve(systems, targets)
    projected = np.einsum("nk,mkj->mnj", _homogeneous(src), solutions)
    errors = np.linalg.norm(projected - dst[None, :, :], axis=2)
    counts = (errors <= params.inlier_threshold).sum(axis=1)
    best = int(np.argmax(counts))
    consensus = errors[best] <= params.inlier_threshold

    solution, *_ = np.linalg.lstsq(_homogeneous(src[consensus]), dst[consensus], rcond=None)
    transform = solution.T
    inliers = reprojection_errors(transform, src, dst) <= params.inlier_threshold
    inlier_count = int(inliers.sum())
    return VerificationResult(
        inlier_count=inlier_count,
        verified=inlier_count >= params.min_inliers,
        transform=transform if inlier_count >= 3 else None,
        inliers=inliers,
    )


def pair_seed(seed: int, query: str, candidate: str) -> np.random.SeedSequence:
    """ Seed for verifying one (query, candidate) pair, independent of evaluation order. """
    digest = hashlib.blake2b(f"{query}\x00{candidate}".encode("utf-8"), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])


def verify_pair(
    query: str, candidate: str, features: LocalFeatureSet, params: RansacParams
) -> VerificationResult:
    """ Match and verify two images; missing features give an empty result. """
    a, b = features.get(query), features.get(candidate)
    if a is None or b is None:
        return _unverified(0, params)
    correspondences = match_features(a, b, params.ratio)
    return ransac_affine(correspondences, params, pair_seed(params.seed, query, candidate))


def sv_rerank(
    query: str,
    candidates: Sequence[str],
    features: LocalFeatureSet,
    params: RansacParams = RansacParams(),
) -> list[tuple[str, int]]:
    """Verify each candidate against the query and re-rank by inlier count.
    Args:
        query (str): Query image id.
        candidates (sequence): Top candidates in their current rank order.
        features (LocalFeatureSet): Local features of query and candidates.
        params (RansacParams): Matching and RANSAC parameters.
    Returns:
        reranked (list): (id, inlier_count), by count descending then original rank.
    """
    if query not in features:
        LOGGER.debug(f"No local features for query {query!r}, keeping candidate order")
        return [(candidate, 0) for candidate in candidates]
    counts = [
        (candidate, verify_pair(query, candidate, features, params).inlier_count)
        for candidate in candidates
    ]
    ranked = sorted(enumerate(counts), key=lambda item: (-item[1][1], item[0]))
    return [pair for _, pair in ranked]
