import filecmp

import pytest

from sysmoe import cli, evaluation
from sysmoe.bundled import build_tiny_checkpoint, tiny_checkpoint_path
from sysmoe.runconfig import RunConfigError, read_file

TINY = ["--preset", "tiny", "--steps", "4", "--warmup", "1", "--eval-interval", "2", "--stride", "4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["gen-data", "--out", str(out), "--episodes", "8", "--length", "24", "--hold", "2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--dataset", str(dataset), "--out", str(out)] + TINY) == 0
    return out


def test_gen_data_files_and_determinism(dataset, tmp_path):
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "stats.tsv", "config.ini"):
        assert (dataset / name).exists()
    cli.main(["gen-data", "--out", str(tmp_path), "--episodes", "8", "--length", "24", "--hold", "2"])
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "stats.tsv"):
        assert filecmp.cmp(dataset / name, tmp_path / name, shallow=False)


def test_gen_multi_has_all_systems(tmp_path):
    assert cli.main(["gen-data", "--kind", "multi", "--systems", "5", "--episodes", "4",
                     "--length", "12", "--out", str(tmp_path)]) == 0
    from sysmoe import data
    eps = [e for s in ("train", "val", "test") for e in data.read_episodes(tmp_path / f"{s}.jsonl")]
    assert len({e.system_id for e in eps}) == 5


def test_train_eval_route_dump(trained, dataset, tmp_path, capsys):
    assert (trained / "best.ckpt").exists() and (trained / "metrics.jsonl").exists()
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--dataset", str(dataset), "--ckpt", str(trained / "best.ckpt"),
                     "--both", "--out", str(ev)]) == 0
    rows = evaluation.read_tsv(ev / "report.tsv")
    assert list(rows[0]) == ["mae", "mse", "n_elements", "n_skipped", "n_clamped", "argmax_mae", "argmax_mse"]
    assert float(rows[0]["mae"]) >= 0
    rd = tmp_path / "rd"
    assert cli.main(["route-dump", "--dataset", str(dataset), "--ckpt", str(trained / "best.ckpt"),
                     "--out", str(rd)]) == 0
    assert (rd / "routing.tsv").exists()


def test_rerun_from_echo_is_identical(dataset, trained, tmp_path):
    echo = trained / "config.ini"
    assert cli.main(["train", "--config", str(echo), "--out", str(tmp_path)]) == 0
    assert filecmp.cmp(trained / "best.ckpt", tmp_path / "best.ckpt", shallow=False)
    assert filecmp.cmp(trained / "metrics.jsonl", tmp_path / "metrics.jsonl", shallow=False)


def test_distill(dataset, trained, tmp_path):
    assert cli.main(["distill", "--dataset", str(dataset), "--teacher", str(trained / "best.ckpt"),
                     "--out", str(tmp_path), "--d", "8", "--heads", "1"] + TINY) == 0
    assert (tmp_path / "best.ckpt").exists()


def test_struct_check_prints_walker_table(tmp_path, capsys):
    assert cli.main(["struct-check", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "torso" in out
    assert len(evaluation.read_tsv(tmp_path / "struct.tsv")) == 7


def test_plan_truth(tmp_path):
    assert cli.main(["plan", "--env", "double-integrator", "--plan-episodes", "1", "--plan-steps", "10",
                     "--horizon", "5", "--samples", "8", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "plan.tsv").exists() and (tmp_path / "trace_0.jsonl").exists()


def test_plan_with_bundled_model(tmp_path):
    assert cli.main(["plan", "--env", "linear", "--oracle", f"model:{tiny_checkpoint_path()}",
                     "--goal", "0.5,-0.5", "--plan-episodes", "1", "--plan-steps", "5",
                     "--horizon", "4", "--samples", "8", "--out", str(tmp_path)]) == 0


def test_missing_dataset_exits_1(tmp_path, capsys):
    code = cli.main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    assert "nope" in capsys.readouterr().err


def test_bad_flag_and_config_exit_1(tmp_path, capsys):
    assert cli.main(["train", "--no-such-flag"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlr = 1e-3\nbogus = 2\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert f"{bad}:3: [train] bogus" in capsys.readouterr().err
    bad.write_text("[train]\nlr = fast\n")
    with pytest.raises(RunConfigError, match=":2: .train. lr: invalid value"):
        read_file(bad, "train")


def test_invalid_values_exit_1(tmp_path, dataset):
    assert cli.main(["train", "--dataset", str(dataset), "--out", str(tmp_path),
                     "--preset", "tiny", "--steps", "2", "--warmup", "5"]) == cli.EXIT_CONFIG
    assert cli.main(["plan", "--env", "linear", "--oracle", f"model:{tiny_checkpoint_path()}",
                     "--horizon", "999", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_corrupt_checkpoint_exits_2(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(tiny_checkpoint_path().read_bytes()[:-8])
    code = cli.main(["eval", "--dataset", str(dataset), "--ckpt", str(bad), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_RUNTIME
    assert "truncated" in capsys.readouterr().err


def test_config_keys_are_case_sensitive(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nK = 32\nk = 8\n")
    vals = read_file(ini, "train")
    assert vals[("model", "K")] == 32 and vals[("model", "k")] == 8


def test_bundled_checkpoint_rebuild_matches(tmp_path):
    build_tiny_checkpoint(tmp_path / "tiny.ckpt")
    assert filecmp.cmp(tmp_path / "tiny.ckpt", tiny_checkpoint_path(), shallow=False)
