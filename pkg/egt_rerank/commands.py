# pylint: disable=logging-fstring-interpolation
"""One function per pipeline stage. Stages read their inputs from files and
write their outputs to files, so any stage can be rerun on its own."""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

from .config import PipelineConfig
from .egt import EgtParams, augment, build_label_graph, rerank_all
from .evaluation import CUTOFF, mean_ap, write_metric_report
from .exceptions import RerankError, StageError
from .knn import blend, build_pipeline_graph, knn_rankings, load_graph, save_graph, symmetrize
from .qe import QeParams, qe_sv_pass
from .store import (
    DescriptorSets,
    load_descriptors,
    load_ground_truth,
    load_labels,
    load_local_features,
    load_submission,
    save_descriptors,
    save_submission,
)
from .sv import RansacParams
from .synthetic import SynthParams, gen_synthetic
from .utils import OutputFileLogger, to_path

LOGGER = logging.getLogger(__name__)


@contextmanager
def running_stage(stage: str) -> Iterator[None]:
    """ Re-raise failures inside the block as StageError tagged with stage. """
    try:
        yield
    except StageError:
        raise
    except (RerankError, OSError) as err:
        LOGGER.error(f"Stage {stage} failed: {err}")
        raise StageError(stage, err) from err


def _parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


def _load_pair(query_desc: Union[str, Path], index_desc: Union[str, Path]) -> DescriptorSets:
    return DescriptorSets(load_descriptors(query_desc, "query"), load_descriptors(index_desc, "index"))


def cmd_blend(
    a_path: Union[str, Path], b_path: Union[str, Path], out: Union[str, Path], role: str = "index"
) -> Path:
    """Blend two descriptor files of the same images into one.
    Returns:
        out (Path): The blended descriptor file.
    """
    LOGGER.info(f"Running cmd_blend with {a_path=}, {b_path=}, {role=}")
    out = to_path(out)
    with OutputFileLogger(_parent(out)):
        blended = blend(load_descriptors(a_path, role), load_descriptors(b_path, role))
        save_descriptors(blended, out)
    return out


def cmd_knn(
    query_desc: Union[str, Path],
    index_desc: Union[str, Path],
    out: Union[str, Path],
    k: int = 100,
    threads: Optional[int] = None,
) -> Path:
    """ Symmetrized KNN graph over query and index descriptors, as graph CSV. """
    LOGGER.info(f"Running cmd_knn with {query_desc=}, {index_desc=}, {k=}")
    out = to_path(out)
    with OutputFileLogger(_parent(out)):
        graph = build_pipeline_graph(_load_pair(query_desc, index_desc), k, threads)
        save_graph(symmetrize(graph), out)
    return out


def cmd_qesv(
    graph_path: Union[str, Path],
    query_desc: Union[str, Path],
    index_desc: Union[str, Path],
    features_path: Union[str, Path],
    out_dir: Union[str, Path],
    qe: QeParams = QeParams(),
    ransac: RansacParams = RansacParams(),
    k: int = 100,
    threads: Optional[int] = None,
) -> dict[str, Path]:
    """Spatially verified query expansion followed by a new KNN graph.
    Returns:
        paths (dict): "query", "index" expanded descriptors and "graph".
    """
    LOGGER.info(f"Running cmd_qesv with {graph_path=}, {features_path=}, {qe=}, {k=}")
    out_dir = to_path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "query": out_dir / "query.gds",
        "index": out_dir / "index.gds",
        "graph": out_dir / "graph.csv",
    }
    with OutputFileLogger(out_dir):
        descriptors = _load_pair(query_desc, index_desc)
        graph = load_graph(graph_path, descriptors.roles())
        features = load_local_features(features_path)
        expanded, new_graph = qe_sv_pass(graph, descriptors, features, qe, ransac, k, threads)
        save_descriptors(expanded.query, paths["query"])
        save_descriptors(expanded.index, paths["index"])
        save_graph(symmetrize(new_graph), paths["graph"])
    return paths


def cmd_knn_rank(
    graph_path: Union[str, Path],
    query_desc: Union[str, Path],
    index_desc: Union[str, Path],
    out: Union[str, Path],
    p: int = 100,
) -> Path:
    """ Submission of the plain similarity order of every query's neighbors. """
    out = to_path(out)
    with OutputFileLogger(_parent(out)):
        descriptors = _load_pair(query_desc, index_desc)
        graph = load_graph(graph_path, descriptors.roles())
        save_submission(knn_rankings(graph, sorted(descriptors.query.ids), p), out, limit=p)
    return out


def cmd_rerank(
    graph_path: Union[str, Path],
    query_desc: Union[str, Path],
    index_desc: Union[str, Path],
    out: Union[str, Path],
    params: EgtParams,
    labels_path: Optional[Union[str, Path]] = None,
    train_desc: Optional[Union[str, Path]] = None,
    threads: Optional[int] = None,
) -> Path:
    """EGT re-ranking of every query, semi-supervised when labels and train
    descriptors are given, written as a submission CSV."""
    semisup = labels_path is not None and train_desc is not None
    LOGGER.info(f"Running cmd_rerank with {graph_path=}, {params=}, {semisup=}")
    out = to_path(out)
    with OutputFileLogger(_parent(out)):
        descriptors = _load_pair(query_desc, index_desc)
        graph = load_graph(graph_path, descriptors.roles())
        queries = sorted(descriptors.query.ids)
        if semisup:
            labels = load_labels(labels_path)
            train = load_descriptors(train_desc, "train")
            augmented = augment(graph, build_label_graph(labels), train, labels, descriptors, threads)
            rankings = rerank_all(augmented, queries, params, threads=threads)
        else:

            def retrievable(vertex: str) -> bool:
                return graph.role(vertex) == "index"

            rankings = rerank_all(graph, queries, params, retrievable, threads)
        save_submission({query: ranked.ids for query, ranked in rankings.items()}, out, limit=params.p)
    return out


def cmd_eval(
    submission: Union[str, Path],
    truth: Union[str, Path],
    cutoff: int = CUTOFF,
    plain: bool = False,
) -> float:
    """ mAP of a submission CSV against a ground truth CSV. """
    LOGGER.info(f"Running cmd_eval with {submission=}, {truth=}, {cutoff=}")
    value = mean_ap(load_submission(submission), load_ground_truth(truth), cutoff, plain)
    LOGGER.info(f"mAP@{cutoff} = {value:.6f}")
    return value


def cmd_synth(params: SynthParams, out_dir: Union[str, Path]) -> dict[str, Path]:
    """ Generate a synthetic dataset and write it into out_dir. """
    LOGGER.info(f"Running cmd_synth with {out_dir=}")
    out_dir = to_path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with OutputFileLogger(out_dir):
        return gen_synthetic(params).save(out_dir)


def cmd_ablate(config: PipelineConfig) -> list[tuple[str, float]]:
    """Run the stages cumulatively and report mAP after each one.
    Stages switched off in config are left out of the report.
    Args:
        config (PipelineConfig): Validated configuration.
    Returns:
        rows (list): (stage, mAP) in stage order, also written to
            metrics.csv and metrics.txt in config.output.
    """
    config.validate("ablate")
    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    threads = config.threads
    inputs = {
        "query_a": config.query_a,
        "query_b": config.query_b,
        "index_a": config.index_a,
        "index_b": config.index_b,
        "train": config.train_desc,
        "local": config.local_features,
        "labels": config.labels,
        "truth": config.truth,
    }
    if config.synthetic:
        with running_stage("synth"):
            paths = cmd_synth(config.synth_params(), out / "synth")
        inputs.update({key.replace(".", "_"): path for key, path in paths.items()})

    rows: list[tuple[str, float]] = []

    def report(stage: str, submission: Path) -> None:
        with running_stage(stage):
            rows.append((stage, cmd_eval(submission, inputs["truth"], CUTOFF)))

    with running_stage("Blend"):
        query = cmd_blend(inputs["query_a"], inputs["query_b"], out / "blend" / "query.gds", "query")
        index = cmd_blend(inputs["index_a"], inputs["index_b"], out / "blend" / "index.gds", "index")
        graph = cmd_knn(query, index, out / "blend" / "graph.csv", config.k, threads)
        submission = cmd_knn_rank(graph, query, index, out / "blend.csv", config.p)
    report("Blend", submission)

    if config.qesv:
        with running_stage("+QE-SV"):
            paths = cmd_qesv(
                graph,
                query,
                index,
                inputs["local"],
                out / "qesv",
                config.qe_params(),
                config.ransac_params(),
                config.k,
                threads,
            )
            query, index, graph = paths["query"], paths["index"], paths["graph"]
            submission = cmd_knn_rank(graph, query, index, out / "qesv.csv", config.p)
        report("+QE-SV", submission)

    if config.egt:
        params = config.egt_params()
        with running_stage("+EGT"):
            submission = cmd_rerank(graph, query, index, out / "egt.csv", params, threads=threads)
        report("+EGT", submission)

    if config.semisup:
        with running_stage("+SemiSup-EGT"):
            submission = cmd_rerank(
                graph,
                query,
                index,
                out / "semisup.csv",
                params,
                inputs["labels"],
                inputs["train"],
                threads,
            )
        report("+SemiSup-EGT", submission)

    write_metric_report(rows, out / "metrics.txt", out / "metrics.csv", CUTOFF)
    for stage, value in rows:
        LOGGER.info(f"{stage:<14} mAP@{CUTOFF} = {value:.4f}")
    return rows
