# pylint: disable=logging-fstring-interpolation
"""Retrieval metrics: average precision at a cutoff and its mean over queries."""
import logging
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import pandas as pd

from .egt import RankedList
from .exceptions import ValidationError
from .store import GroundTruth
from .utils import to_path

LOGGER = logging.getLogger(__name__)

CUTOFF = 100


def average_precision_at(
    ranked: Sequence[str], relevant: set[str], cutoff: int = CUTOFF, plain: bool = False
) -> float:
    """AP@K = 1 / min(m, K) * sum_{i <= min(n, K)} P(i) rel(i), m = |relevant|.
    Args:
        ranked (sequence): Retrieved ids, best first, no duplicates.
        relevant (set): Relevant ids.
        cutoff (int): K. Default: 100.
        plain (bool): Use the full list and denominator m instead. Default: False.
    """
    if len(set(ranked)) != len(ranked):
        raise ValidationError("Ranked list contains duplicates")
    if not relevant:
        return 0.0
    considered = ranked if plain else ranked[:cutoff]
    hits = 0
    total = 0.0
    for position, image_id in enumerate(considered, start=1):
        if image_id in relevant:
            hits += 1
            total += hits / position
    denominator = len(relevant) if plain else min(len(relevant), cutoff)
    return total / denominator


def _ids(ranking: Union[RankedList, Sequence[str]]) -> Sequence[str]:
    if isinstance(ranking, RankedList):
        return ranking.ids
    return ranking


def mean_ap(
    rankings: Mapping[str, Union[RankedList, Sequence[str]]],
    truth: GroundTruth,
    cutoff: int = CUTOFF,
    plain: bool = False,
) -> float:
    """Unweighted mean of per-query AP over all ground-truth queries.
    Queries missing from rankings score 0."""
    if len(truth) == 0:
        raise ValidationError("Ground truth is empty, mAP is undefined")
    missing = [query for query in truth.entries if query not in rankings]
    if missing:
        LOGGER.warning(f"{len(missing)} of {len(truth)} queries have no ranking, scored 0")
    scores = [
        average_precision_at(_ids(rankings[query]), relevant, cutoff, plain)
        if query in rankings
        else 0.0
        for query, relevant in truth.entries.items()
    ]
    return float(np.mean(scores))


def write_metric_report(
    rows: Sequence[tuple[str, float]],
    text_path: Union[str, Path],
    csv_path: Union[str, Path],
    cutoff: int = CUTOFF,
) -> None:
    """ Write (stage, mAP) rows as an aligned text table and as a `stage,map` CSV. """
    frame = pd.DataFrame(list(rows), columns=["stage", "map"])
    frame.to_csv(to_path(csv_path), index=False, float_format="%.6f", lineterminator="\n")
    width = max([len("stage")] + [len(stage) for stage, _ in rows])
    lines = [f"{'stage':<{width}}  mAP@{cutoff}"]
    lines += [f"{stage:<{width}}  {value:.4f}" for stage, value in rows]
    to_path(text_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
