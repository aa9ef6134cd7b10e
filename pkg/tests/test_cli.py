import pandas as pd
import pytest

from egt_rerank.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from egt_rerank.commands import cmd_blend, running_stage
from egt_rerank.exceptions import FormatError, StageError
from egt_rerank.store import GroundTruth, load_descriptors, save_ground_truth, save_submission
from egt_rerank.synthetic import SynthParams, gen_synthetic

SMALL_SYNTH = [
    "--clusters", "4", "--queries", "2", "--index", "8", "--train", "4",
    "--dim", "16", "--keypoints", "20",
]


def test_version_and_unknown_command(capsys):
    assert main(["--version"]) == EXIT_OK
    assert main(["frobnicate"]) == EXIT_USAGE
    capsys.readouterr()


def test_semisup_rerank_without_labels_is_a_usage_error(tmp_path):
    argv = [
        "rerank", "--graph", "g.csv", "--query-desc", "q.gds", "--index-desc", "i.gds",
        "--t", "0.5", "--semisup", "--out", str(tmp_path / "sub.csv"),
    ]
    assert main(argv) == EXIT_USAGE


def test_missing_config_file_is_a_usage_error(tmp_path):
    assert main(["--config", str(tmp_path / "none.toml"), "eval", "--submission", "s", "--truth", "t"]) == EXIT_USAGE


def test_eval_prints_map(tmp_path, capsys):
    save_ground_truth(GroundTruth({"q1": {"a", "b"}, "q2": {"c"}}), tmp_path / "truth.csv")
    save_submission({"q1": ["b", "a"], "q2": ["c", "x"]}, tmp_path / "sub.csv")
    capsys.readouterr()
    argv = ["eval", "--submission", str(tmp_path / "sub.csv"), "--truth", str(tmp_path / "truth.csv")]
    assert main(argv) == EXIT_OK
    assert capsys.readouterr().out.strip().splitlines()[-1] == "1.000000"


def test_broken_input_fails_the_stage(tmp_path):
    bad = tmp_path / "bad.gds"
    bad.write_bytes(b"nope" + bytes(12))
    argv = ["knn", "--query-desc", str(bad), "--index-desc", str(bad), "--out", str(tmp_path / "g.csv")]
    assert main(argv) == EXIT_FAILURE


def test_running_stage_tags_errors():
    with pytest.raises(StageError) as err:
        with running_stage("knn"):
            raise FormatError("bad magic")
    assert err.value.stage == "knn"
    assert isinstance(err.value.cause, FormatError)


def test_blend_command(tmp_path):
    paths = gen_synthetic(SynthParams(clusters=2, queries=1, index=3, train=2, dim=8)).save(tmp_path / "data")
    out = tmp_path / "blended.gds"
    assert main(["blend", str(paths["query.a"]), str(paths["query.b"]), "--role", "query", "--out", str(out)]) == 0
    assert load_descriptors(out, "query") == load_descriptors(
        cmd_blend(paths["query.a"], paths["query.b"], tmp_path / "again.gds", "query"), "query"
    )
    assert load_descriptors(out).dim == 8


def test_stage_commands_chain_through_files(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", *SMALL_SYNTH, "--out", str(data)]) == EXIT_OK
    for role in ("query", "index"):
        argv = ["blend", str(data / f"{role}.a.gds"), str(data / f"{role}.b.gds"), "--role", role]
        assert main([*argv, "--out", str(tmp_path / f"{role}.gds")]) == EXIT_OK
    pair = ["--query-desc", str(tmp_path / "query.gds"), "--index-desc", str(tmp_path / "index.gds")]
    assert main(["knn", *pair, "--k", "10", "--out", str(tmp_path / "graph.csv")]) == EXIT_OK
    qesv = ["qesv", "--graph", str(tmp_path / "graph.csv"), *pair, "--k", "10"]
    assert main([*qesv, "--local-features", str(data / "local.glf"), "--out", str(tmp_path / "qesv")]) == EXIT_OK
    expanded = ["--query-desc", str(tmp_path / "qesv" / "query.gds"), "--index-desc", str(tmp_path / "qesv" / "index.gds")]
    rerank = ["rerank", "--graph", str(tmp_path / "qesv" / "graph.csv"), *expanded, "--t", "0.65", "--p", "20"]
    semisup = ["--semisup", "--labels", str(data / "labels.csv"), "--train-desc", str(data / "train.gds")]
    assert main([*rerank, *semisup, "--out", str(tmp_path / "sub.csv")]) == EXIT_OK
    submission = pd.read_csv(tmp_path / "sub.csv", keep_default_na=False)
    assert list(submission.columns) == ["id", "images"]
    assert len(submission) == 8
    assert main(["eval", "--submission", str(tmp_path / "sub.csv"), "--truth", str(data / "truth.csv")]) == EXIT_OK


def run_ablate(out, threads):
    argv = ["--threads", str(threads), "ablate", "--synthetic", "--t", "0.65"]
    argv += [*SMALL_SYNTH, "--k", "10", "--p", "20", "--out", str(out)]
    assert main(argv) == EXIT_OK


def test_ablate_is_thread_independent(tmp_path):
    run_ablate(tmp_path / "one", 1)
    run_ablate(tmp_path / "two", 2)
    for name in ("metrics.csv", "blend.csv", "qesv.csv", "egt.csv", "semisup.csv"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    stages = pd.read_csv(tmp_path / "one" / "metrics.csv")["stage"].tolist()
    assert stages == ["Blend", "+QE-SV", "+EGT", "+SemiSup-EGT"]


def test_ablate_stage_switches(tmp_path):
    argv = ["ablate", "--synthetic", "--no-qesv", "--no-egt", *SMALL_SYNTH, "--k", "10", "--out", str(tmp_path)]
    assert main(argv) == EXIT_USAGE
    assert main([*argv, "--no-semisup"]) == EXIT_OK
    assert pd.read_csv(tmp_path / "metrics.csv")["stage"].tolist() == ["Blend"]
    assert not (tmp_path / "qesv").exists()


def test_ablate_can_skip_only_the_semisup_stage(tmp_path):
    argv = ["ablate", "--synthetic", "--no-semisup", "--t", "0.65", *SMALL_SYNTH, "--k", "10", "--p", "20"]
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_OK
    assert pd.read_csv(tmp_path / "metrics.csv")["stage"].tolist() == ["Blend", "+QE-SV", "+EGT"]
    assert not (tmp_path / "semisup.csv").exists()


@pytest.mark.slow
def test_default_synthetic_ablation_ordering(tmp_path):
    assert main(["--seed", "42", "ablate", "--synthetic", "--t", "0.65", "--out", str(tmp_path)]) == 0
    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert metrics["stage"].tolist() == ["Blend", "+QE-SV", "+EGT", "+SemiSup-EGT"]
    blend_map, qesv_map, egt_map, semisup_map = metrics["map"].tolist()
    assert blend_map < qesv_map <= egt_map <= semisup_map
    assert semisup_map - blend_map >= 0.05
