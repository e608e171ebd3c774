import subprocess
import sys

import pytest

from atpn.cli import main
from atpn.config import ATPN_TINY, dump_config


@pytest.fixture(scope="module")
def sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--count", "6", "--seed", "1", "--out", str(root / "pos")]) == 0
    assert main(["synth", "--kind", "negatives", "--count", "4", "--out", str(root / "neg")]) == 0
    assert main(["synth", "--kind", "video", "--count", "8", "--out", str(root / "vid")]) == 0
    cfg = root / "tiny12.cfg"
    cfg.write_text(dump_config(ATPN_TINY.with_landmarks(12)))
    return root


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "4", "--data", "x", "--out", "y"])
    assert exc.value.code == 1
    assert main(["synth", "--count", "0", "--out", "unused"]) == 1


def test_stage_without_checkpoint_exits_two(sets, capsys):
    code = main(["train", "--stage", "2", "--data", str(sets / "pos" / "manifest.csv"), "--out", str(sets / "x")])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_missing_manifest_exits_two(tmp_path):
    assert main(["eval", "--task", "align", "--data", str(tmp_path / "nope.csv"),
                 "--predictions", str(tmp_path / "nope.csv")]) == 2


def test_synth_is_reproducible(sets, tmp_path):
    main(["synth", "--count", "6", "--seed", "1", "--out", str(tmp_path)])
    assert (tmp_path / "manifest.csv").read_bytes() == (sets / "pos" / "manifest.csv").read_bytes()


def test_eval_against_labels_is_perfect(sets, capsys):
    m = str(sets / "pos" / "manifest.csv")
    assert main(["eval", "--task", "align", "--data", m, "--predictions", m, "--out", str(sets / "ev")]) == 0
    row = capsys.readouterr().out.splitlines()[1].split()
    assert row[:3] == ["0.000000", "0.000000", "1.000000"]
    assert (sets / "ev" / "ced.csv").exists()
    assert main(["eval", "--task", "pose", "--data", m, "--predictions", m]) == 0
    assert "0.000000 0.000000 0.000000" in capsys.readouterr().out


def test_eval_tracking_with_label_scores(sets, capsys):
    pos, neg = str(sets / "pos" / "manifest.csv"), str(sets / "neg" / "manifest.csv")
    both = sets / "both.csv"
    body = (sets / "neg" / "manifest.csv").read_text().splitlines()[1:]
    both.write_text((sets / "pos" / "manifest.csv").read_text()
                    + "".join(line.replace("images/", "neg/images/", 1) + "\n" for line in body))
    assert main(["eval", "--task", "track", "--data", pos, "--data", neg, "--predictions", str(both)]) == 0
    assert capsys.readouterr().out.splitlines()[1].split()[-1] == "1.000000"


def test_track_oracle_counts_the_dropout(sets, capsys):
    out = sets / "trk"
    assert main(["track", "--oracle", "--data", str(sets / "vid" / "manifest.csv"), "--out", str(out)]) == 0
    stats = dict(line.split() for line in (out / "stats.txt").read_text().splitlines())
    assert stats["failure_frames"] == "1" and stats["detection_frames"] == "2"
    first = (out / "frames.txt").read_bytes()
    main(["track", "--oracle", "--data", str(sets / "vid" / "manifest.csv"), "--out", str(out)])
    assert (out / "frames.txt").read_bytes() == first


def test_track_needs_an_input():
    assert main(["track", "--oracle"]) == 1


def test_train_chain_and_eval(sets, capsys):
    cfg, pos, neg = str(sets / "tiny12.cfg"), str(sets / "pos" / "manifest.csv"), str(sets / "neg" / "manifest.csv")
    out = sets / "run"
    base = ["--config", cfg, "--out", str(out), "--max-steps", "2", "--batch-size", "4", "--epochs", "1"]
    assert main(["train", "--stage", "1", "--data", pos] + base) == 0
    assert main(["train", "--stage", "2", "--data", pos, "--data", neg,
                 "--checkpoint", str(out / "stage1.ckpt")] + base) == 0
    assert main(["train", "--stage", "3", "--data", pos, "--checkpoint", str(out / "stage2.ckpt")] + base) == 0
    capsys.readouterr()
    assert main(["eval", "--task", "align", "--data", pos, "--checkpoint", str(out / "stage3.ckpt")]) == 0
    nme = float(capsys.readouterr().out.splitlines()[1].split()[0])
    assert nme > 0
    assert (out / "train.log").read_text().count("\n") >= 3


def test_checkpoint_from_other_config_exits_two(sets):
    out = sets / "run"
    if not (out / "stage1.ckpt").exists():
        pytest.skip("train chain did not run")
    code = main(["train", "--stage", "2", "--config", "atpn-desk", "--data", str(sets / "pos" / "manifest.csv"),
                 "--checkpoint", str(out / "stage1.ckpt"), "--out", str(sets / "y")])
    assert code == 2


def test_budget_and_module_entry():
    res = subprocess.run([sys.executable, "-m", "atpn", "budget", "--config", "atpn-small"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "1038284" in res.stdout.replace(",", "")


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--trials", "3"]) == 0
    done, total = capsys.readouterr().out.rstrip().splitlines()[-1].split()[0].split("/")
    assert done == total
