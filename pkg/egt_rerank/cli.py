# pylint: disable=logging-fstring-interpolation
"""Command line entry point: `egt-rerank <subcommand> [flags]`."""
import argparse
import logging
import sys
from typing import Optional, Sequence

from .commands import (
    cmd_ablate,
    cmd_blend,
    cmd_eval,
    cmd_knn,
    cmd_qesv,
    cmd_rerank,
    cmd_synth,
    running_stage,
)
from .config import Config, PipelineConfig
from .evaluation import CUTOFF
from .exceptions import ConfigError, RerankError
from .parallel import set_threads
from .utils import get_logger
from .version import __version__

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_knn_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=int, help="Neighbors per image in the KNN graph.")


def _add_egt_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--t", type=float, help="EGT trust threshold.")
    parser.add_argument("--p", type=int, help="Results per query.")
    parser.add_argument("--max-steps", type=int, help="Cap on heap pops per query.")
    parser.add_argument("--labels", help="Train labels CSV (id,landmark_id).")
    parser.add_argument("--train-desc", help="Train descriptors, in the blended space.")


def _add_qe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sv-depth", type=int, help="Neighbors checked by spatial verification.")
    parser.add_argument("--expand-count", type=int, help="Verified neighbors used for expansion.")
    parser.add_argument("--alpha", type=float, help="Expansion weight exponent.")
    parser.add_argument(
        "--no-database-side",
        dest="database_side",
        action="store_const",
        const=False,
        help="Expand query descriptors only.",
    )
    parser.add_argument("--ransac-iters", dest="iterations", type=int, help="RANSAC rounds.")
    parser.add_argument(
        "--inlier-thresh", dest="inlier_threshold", type=float, help="Inlier distance in pixels."
    )
    parser.add_argument("--ratio", type=float, help="Ratio test bound.")
    parser.add_argument("--min-inliers", type=int, help="Inliers needed to count as verified.")
    parser.add_argument("--local-features", help="Local features file (GLF1).")


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    for name, kind in (
        ("clusters", int),
        ("dim", int),
        ("queries", int),
        ("index", int),
        ("train", int),
        ("sigma", float),
        ("query-sigma", float),
        ("bridge-fraction", float),
        ("keypoints", int),
        ("outlier-fraction", float),
    ):
        parser.add_argument(f"--{name}", dest=f"synth_{name.replace('-', '_')}", type=kind)


def _add_pair_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--query-desc", help="Query descriptors (GDS1).")
    parser.add_argument("--index-desc", help="Index descriptors (GDS1).")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egt-rerank", description="Image retrieval re-ranking with query expansion and EGT."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="toml file with settings, see config_template.toml.")
    parser.add_argument("--log-file", help="Also write the log to this file.")
    parser.add_argument("--verbose", action="store_true", help="Debug output.")
    parser.add_argument("--seed", type=int, help="Run seed. Default: 42.")
    parser.add_argument("--threads", type=int, help="Workers. Default: machine parallelism.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    blend = subparsers.add_parser("blend", help="Blend two descriptor files.")
    blend.add_argument("a", help="First model's descriptors.")
    blend.add_argument("b", help="Second model's descriptors.")
    blend.add_argument("--role", choices=("query", "index", "train"), default="index")
    blend.add_argument("--out", dest="output", required=True)

    knn = subparsers.add_parser("knn", help="Build the symmetrized KNN graph.")
    _add_pair_flags(knn)
    _add_knn_flags(knn)
    knn.add_argument("--out", dest="output", required=True, help="Graph CSV to write.")

    qesv = subparsers.add_parser("qesv", help="Spatially verified query expansion.")
    qesv.add_argument("--graph", help="Graph CSV of the input descriptors.")
    _add_pair_flags(qesv)
    _add_knn_flags(qesv)
    _add_qe_flags(qesv)
    qesv.add_argument("--out", dest="output", required=True, help="Output directory.")

    rerank = subparsers.add_parser("rerank", help="EGT re-ranking to a submission CSV.")
    rerank.add_argument("--graph", help="Symmetrized graph CSV.")
    _add_pair_flags(rerank)
    _add_egt_flags(rerank)
    rerank.add_argument(
        "--semisup", dest="rerank_semisup", action="store_const", const=True, help="Semi-supervised EGT."
    )
    rerank.add_argument("--out", dest="output", required=True, help="Submission CSV to write.")

    evaluate = subparsers.add_parser("eval", help="mAP of a submission.")
    evaluate.add_argument("--submission")
    evaluate.add_argument("--truth")
    evaluate.add_argument("--cutoff", type=int, default=CUTOFF)
    evaluate.add_argument("--plain", action="store_true", help="No cutoff, denominator |relevant|.")

    synth = subparsers.add_parser("synth", help="Generate a synthetic dataset.")
    _add_synth_flags(synth)
    synth.add_argument("--out", dest="output", required=True, help="Output directory.")

    ablate = subparsers.add_parser("ablate", help="mAP after each pipeline stage.")
    ablate.add_argument("--synthetic", action="store_const", const=True)
    for name in ("query-a", "query-b", "index-a", "index-b", "truth"):
        ablate.add_argument(f"--{name}")
    ablate.add_argument("--no-qesv", dest="qesv", action="store_const", const=False)
    ablate.add_argument("--no-egt", dest="egt", action="store_const", const=False)
    ablate.add_argument("--semisup", action="store_const", const=True, help="Run the SemiSup-EGT stage (default).")
    ablate.add_argument("--no-semisup", dest="semisup", action="store_const", const=False)
    _add_knn_flags(ablate)
    _add_qe_flags(ablate)
    _add_egt_flags(ablate)
    _add_synth_flags(ablate)
    ablate.add_argument("--out", dest="output", required=True, help="Output directory.")
    return parser


def run(args: argparse.Namespace, config: PipelineConfig) -> None:
    command = args.command
    if command == "ablate":
        cmd_ablate(config)
        return
    with running_stage(command):
        if command == "blend":
            cmd_blend(args.a, args.b, config.output, args.role)
        elif command == "knn":
            cmd_knn(config.query_desc, config.index_desc, config.output, config.k, config.threads)
        elif command == "qesv":
            cmd_qesv(
                config.graph,
                config.query_desc,
                config.index_desc,
                config.local_features,
                config.output,
                config.qe_params(),
                config.ransac_params(),
                config.k,
                config.threads,
            )
        elif command == "rerank":
            cmd_rerank(
                config.graph,
                config.query_desc,
                config.index_desc,
                config.output,
                config.egt_params(),
                config.labels if config.rerank_semisup else None,
                config.train_desc if config.rerank_semisup else None,
                config.threads,
            )
        elif command == "eval":
            value = cmd_eval(config.submission, config.truth, args.cutoff, args.plain)
            print(f"{value:.6f}")
        elif command == "synth":
            cmd_synth(config.synth_params(), config.output)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse flags, validate the configuration, run one subcommand.
    Returns:
        status (int): 0 on success, 1 if a stage failed, 2 for usage errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    get_logger(args.log_file, verbose=args.verbose)
    try:
        config = PipelineConfig.from_config(Config(args.config), vars(args))
        config.validate(args.command)
        set_threads(config.threads)
    except (ConfigError, FileNotFoundError) as err:
        LOGGER.error(f"Usage error: {err}")
        return EXIT_USAGE
    try:
        run(args, config)
    except RerankError as err:
        LOGGER.error(str(err))
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
