import json

import pytest

from afnas import cli
from afnas.data import make_split, synthesize_dataset
from afnas.metrics import parse_report

SMALL = ["--sample-rate-hz", "4", "--probands", "6", "--windows-per-proband", "4", "--epochs", "1",
         "--batch-size", "4", "--genome", "k4c8s2-k2c8s2@q16.8"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def metrics(text):
    return parse_report(text)


class TestExitCodes:
    def test_usage(self, capsys):
        code, _, err = run(capsys, "train", "--no-such-flag")
        assert code == 1 and err.startswith("afnas-error[usage]: ")

    def test_missing_subcommand(self, capsys):
        assert run(capsys)[0] == 1

    def test_data_error(self, capsys, tmp_path):
        bad = tmp_path / "d"
        bad.mkdir()
        (bad / "x.csv").write_text("1,2\n3\n")
        code, _, err = run(capsys, "eval", "--dataset", str(bad), "--checkpoint", "none", "--sample-rate-hz", "4")
        assert code == 2 and err.startswith("afnas-error[data]: ")

    def test_infeasible_genome(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", *SMALL, "--genome", "k32c8s32-k32c8s32@q16.8", "--out", str(tmp_path))
        assert code == 3 and err.startswith("afnas-error[infeasible]: ")

    def test_missing_blob(self, capsys, tmp_path):
        code, _, err = run(capsys, "infer", *SMALL, "--out", str(tmp_path))
        assert code == 1 and "--blob" in err


class TestConfig:
    def args(self, *argv):
        return cli.resolve(cli.build_parser().parse_args(list(argv)))

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("profile = desk\nepochs = 4\nseed = 9\n")
        cfg = self.args("train", "--config", str(cfg_file), "--seed", "2")
        assert (cfg["profile"], cfg["epochs"], cfg["seed"], cfg["generations"]) == ("desk", 4, 2, 10)

    def test_profiles(self):
        full = self.args("search")
        assert (full["generations"], full["offspring"], full["epochs"], full["sample_rate_hz"]) == (190, 8, 30, 128.0)
        desk = self.args("search", "--profile", "desk")
        assert (desk["generations"], desk["offspring"], desk["epochs"], desk["sample_rate_hz"]) == (10, 8, 10, 32.0)

    def test_unknown_key(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("epochs = 3\ncolour = blue\n")
        code, _, err = run(capsys, "train", "--config", str(cfg_file))
        assert code == 1 and "colour" in err

    def test_bad_value(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("epochs = many\n")
        assert run(capsys, "train", "--config", str(cfg_file))[0] == 1

    def test_every_key_has_flag(self):
        flags = {a for act in cli.build_parser()._subparsers._group_actions[0].choices["train"]._actions
                 for a in act.option_strings}
        assert all(cli._flag(k) in flags for k in cli.SETTINGS)


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("chain")
    assert cli.main(["train", *SMALL, "--out", str(root / "train")]) == 0
    ck = str(root / "train" / "checkpoint.afck")
    assert cli.main(["export", *SMALL, "--checkpoint", ck, "--out", str(root / "export")]) == 0
    blob = str(root / "export" / "model.afnn")
    assert cli.main(["infer", *SMALL, "--blob", blob, "--out", str(root / "infer")]) == 0
    return root


class TestChain:
    def test_outputs_and_manifests(self, chain):
        for sub in ("train", "export", "infer"):
            man = json.loads((chain / sub / "manifest.json").read_text())
            assert man["command"] == sub and man["config"]["seed"] == 0 and man["version"]
        assert (chain / "infer" / "predictions.csv").read_text().startswith("window_id,logit_code,label\n")

    def test_export_infer_eval_matches_checkpoint(self, chain, capsys):
        ck = str(chain / "train" / "checkpoint.afck")
        code, direct, _ = run(capsys, "eval", *SMALL, "--checkpoint", ck)
        assert code == 0
        code, via_preds, _ = run(capsys, "eval", *SMALL, "--predictions", str(chain / "infer" / "predictions.csv"))
        assert code == 0
        code, via_blob, _ = run(capsys, "eval", *SMALL, "--blob", str(chain / "export" / "model.afnn"))
        assert code == 0
        assert metrics(direct) == metrics(via_preds) == metrics(via_blob)

    def test_repeat_is_byte_identical(self, chain, tmp_path):
        assert cli.main(["train", *SMALL, "--out", str(tmp_path / "t")]) == 0
        assert (tmp_path / "t" / "checkpoint.afck").read_bytes() == (chain / "train" / "checkpoint.afck").read_bytes()
        assert cli.main(["export", *SMALL, "--checkpoint", str(tmp_path / "t" / "checkpoint.afck"),
                         "--out", str(tmp_path / "e")]) == 0
        assert (tmp_path / "e" / "model.afnn").read_bytes() == (chain / "export" / "model.afnn").read_bytes()


def test_perfect_predictions_score_one(tmp_path, capsys):
    split = make_split(synthesize_dataset(6, 4, 4.0, 0), 0)
    everything = cli._pick(split, "all")
    all_ids = cli._window_ids(everything)
    lines = ["window_id,logit_code,label"]
    for w, wid in zip(everything, all_ids):
        lines.append(f"{wid},{1 if w.is_af else -1},{'AF' if w.is_af else 'not-AF'}")
    p = tmp_path / "oracle.csv"
    p.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "eval", *SMALL, "--predictions", str(p))
    assert code == 0
    m = metrics(out)
    assert (m["sensitivity"], m["specificity"], m["noise_specificity"]) == (1.0, 1.0, 1.0)


def test_synth_data_round_trip(tmp_path, capsys):
    for fmt in ("csv", "raw"):
        out = tmp_path / fmt
        assert run(capsys, "synth-data", *SMALL, "--format", fmt, "--out", str(out))[0] == 0
        assert len(list(out.glob(f"*.{fmt}"))) == 6
    code, text, _ = run(capsys, "train", *SMALL, "--dataset", str(tmp_path / "csv"), "--out", str(tmp_path / "t"))
    assert code == 0 and "sensitivity=" in text


def test_search_and_report(tmp_path, capsys):
    argv = ["search", *SMALL, "--generations", "1", "--offspring", "2", "--max-kernel", "4", "--max-macs", "20000"]
    code, _, _ = run(capsys, *argv, "--out", str(tmp_path / "a"))
    assert code in (0, 3)
    run(capsys, *argv, "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "run_log.jsonl").read_bytes() == (tmp_path / "b" / "run_log.jsonl").read_bytes()
    code, _, _ = run(capsys, "report", "--log", str(tmp_path / "a" / "run_log.jsonl"), "--out", str(tmp_path / "r"))
    assert code == 0
    assert (tmp_path / "r" / "pareto_scatter.csv").read_text().startswith("id,fnr,fpr,noise_fpr")
    assert (tmp_path / "r" / "cost_table.csv").exists()
