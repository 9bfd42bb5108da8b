import csv

import pytest

from uhkd.cli import main

SMALL = [
    "--set", "image_size=16", "--set", "num_classes=3", "--set", "n_per_class=6",
    "--set", "teacher=mlp_s", "--set", "student=cnn_xs", "--set", "teacher_epochs=1",
    "--set", "epochs=2", "--set", "batch_size=8",
]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("argv", [[], ["train"], ["eval", "--bogus"], ["eval", "--set", "nope=1"],
                                  ["eval", "--set", "lambda_kl=2"], ["eval", "--set", "teacher=resnet"]])
def test_usage_errors_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and "usage:" in err


def test_set_round_trips_into_echo(capsys):
    code, out, _ = run(capsys, "distill", "--echo-config", "--set", "lambda_kl=0.4", "--seed", "5")
    assert code == 0
    assert "lambda_kl = 0.4" in out.splitlines() and "seed = 5" in out.splitlines()


def test_config_file_is_read(capsys, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[recipe]\ntau = 2.5\n")
    code, out, _ = run(capsys, "eval", "--config", str(cfg), "--echo-config")
    assert code == 0 and "tau = 2.5" in out


def test_missing_checkpoint_is_a_runtime_abort(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "none.ckpt"),
                       *SMALL)
    assert code == 3 and "aborted" in err


def test_full_workflow(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "pretrain", "--out-dir", str(out_dir), *SMALL)
    assert code == 0 and (out_dir / "teacher.ckpt").exists() and "val_acc=" in out

    code, out, _ = run(capsys, "distill", "--out-dir", str(out_dir), *SMALL)
    assert code == 0 and (out_dir / "student.ckpt").exists()
    with open(out_dir / "metrics.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["split"] == "val" and r["stage"] == "0"]
    code, out, _ = run(capsys, "eval", "--out-dir", str(out_dir), *SMALL)
    assert code == 0
    assert float(out.strip().split("=")[1]) == pytest.approx(float(rows[-1]["acc"]), abs=5e-5)

    code, out, _ = run(capsys, "inspect", "--out-dir", str(out_dir), *SMALL)
    assert code == 0
    dumps = sorted((out_dir / "spectra").glob("*.uhkdspec"))
    assert len(dumps) == 20  # 5 dumps per stage
    first = {p.name: p.read_bytes() for p in dumps}
    assert run(capsys, "inspect", "--out-dir", str(out_dir), *SMALL)[0] == 0
    assert first == {p.name: p.read_bytes() for p in sorted((out_dir / "spectra").glob("*.uhkdspec"))}

    code, out, _ = run(capsys, "similarity", "--out-dir", str(out_dir), *SMALL)
    assert code == 0
    lines = (out_dir / "similarity.csv").read_text().splitlines()
    assert lines[0] == "stage,cos_raw,cos_uhkd,pearson_raw,pearson_uhkd" and len(lines) == 5

    code, out, _ = run(capsys, "ablate", "--out-dir", str(out_dir), "--arms", "full,ce_only", "--seeds", "0,1",
                       *SMALL, "--set", "epochs=1")
    assert code == 0
    assert len((out_dir / "ablation.csv").read_text().splitlines()) == 5

    code, _, err = run(capsys, "ablate", "--out-dir", str(out_dir), "--arms", "nonsense", *SMALL)
    assert code == 2

    # nothing escapes the output directory
    assert sorted(p.name for p in tmp_path.iterdir()) == ["out"]
