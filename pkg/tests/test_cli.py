import hashlib
import json
import subprocess
import sys

import pytest

from explainrec import formats
from explainrec.cli import main

SMALL = ["--epochs", "2", "--id-dim", "8", "--feature-dim", "8", "--hidden", "8,4", "--outer", "2", "--cf-steps", "10"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--users", "30", "--items", "60", "--features", "20", "--density", "0.25",
                 "--seed", "7", "--out", str(base / "data")]) == 0
    for kind in ("nar", "car", "cnr", "baseline"):
        assert main(["train", "--data", str(base / "data"), "--model", kind, "--seed", "7",
                     "--out", str(base / "run"), *SMALL]) == 0
    return base


def test_synth_writes_two_files_and_echoes_seed(tmp_path):
    assert main(["synth", "--users", "50", "--items", "100", "--features", "40", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["interactions.tsv", "manifest.json"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["seed"] == 7
    assert formats.read_header(tmp_path / "interactions.tsv")["config"]["seed"] == 7


def test_synth_rerun_identical(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--seed", "3", "--out", str(tmp_path / name)])
    for f in ("interactions.tsv", "manifest.json"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)


def test_bad_density_exit_code(tmp_path, capsys):
    assert main(["synth", "--density", "1.5", "--seed", "1", "--out", str(tmp_path)]) != 0
    assert "density" in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) != 0
    assert "seed" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "synth": {"users": 12, "items": 30, "features": 9, "density": 0.3}}))
    assert main(["synth", "--config", str(cfg), "--users", "15", "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["config"]["synth"]["users"] == 15 and manifest["config"]["synth"]["items"] == 30
    assert manifest["seed"] == 5


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "train": {"epochz": 3}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_prepare(tmp_path):
    src = tmp_path / "raw.tsv"
    lines = [f"u{u}\ti{(u + k) % 12}\t{5 if k % 4 else 2}\tw{k % 3}:1:0.5" for u in range(4) for k in range(9)]
    src.write_text("\n".join(lines) + "\n")
    assert main(["prepare", "--input", str(src), "--seed", "2", "--out", str(tmp_path / "d")]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["test_idx"] and manifest["P"] == 3


def test_train_outputs(run_dir):
    run = run_dir / "run"
    for kind in ("car", "cnr"):
        assert (run / f"{kind}_perturbations.tsv").exists()
    assert not (run / "baseline_perturbations.tsv").exists()
    rounds = [row for row in formats.read_run_log(run / "cnr_log.jsonl") if "round" in row]
    assert len(rounds) == 2
    car_log = formats.read_run_log(run / "car_log.jsonl")
    assert all("adv_loss" in row for row in car_log)


def test_train_default_outer_rounds(run_dir, tmp_path):
    args = ["train", "--data", str(run_dir / "data"), "--model", "cnr", "--seed", "7", "--out", str(tmp_path), *SMALL]
    args[args.index("--outer") + 1] = "20"
    args[args.index("--cf-steps") + 1] = "3"
    assert main([*args, "--xi", "0.001"]) == 0
    rounds = [row for row in formats.read_run_log(tmp_path / "cnr_log.jsonl") if "round" in row]
    assert len(rounds) == 20


def test_evaluate_deterministic(run_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["evaluate", "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "run" / "nar.ckpt"),
                     "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a" / "eval_nar.csv") == digest(tmp_path / "b" / "eval_nar.csv")
    doc = json.loads((tmp_path / "a" / "eval_nar.json").read_text())
    assert doc["k"] == 10 and doc["mrr_k"] == 1 and doc["config"]["pool_size"] == 100


def test_evaluate_kind_mismatch(run_dir, tmp_path):
    code = main(["evaluate", "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "run" / "nar.ckpt"),
                 "--model", "car", "--seed", "7", "--out", str(tmp_path)])
    assert code != 0


def test_explain_outputs(run_dir, tmp_path):
    run = run_dir / "run"
    code = main(["explain", "--data", str(run_dir / "data"), "--checkpoint", str(run / "nar.ckpt"),
                 "--checkpoint", str(run / "car.ckpt"), "--checkpoint", str(run / "cnr.ckpt"),
                 "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    corr = formats.read_csv(tmp_path / "correlation.csv")
    assert corr[0] == ["source", "GT", "NAR", "CAR", "CNR"] and len(corr) == 5
    assert corr[1][1] == "1.0000"
    report = formats.read_csv(tmp_path / "explain_report.csv")
    assert "F1@5" in report[0] and "NDCG@5" in report[0]
    assert any(row[0] == "NAR" for row in report[1:])
    words = (tmp_path / "top_words.tsv").read_text().splitlines()[1:]
    assert all(len(line.split("\t")[2].split(",")) <= 5 for line in words)
    for f in ("explanations.tsv", "top_words.tsv", "explain_report.csv", "correlation.csv"):
        assert formats.read_header(tmp_path / f)["format_version"] == formats.FORMAT_VERSION


def test_explain_missing_dump(run_dir, tmp_path, capsys):
    ckpt = tmp_path / "cnr.ckpt"
    ckpt.write_bytes((run_dir / "run" / "cnr.ckpt").read_bytes())
    code = main(["explain", "--data", str(run_dir / "data"), "--checkpoint", str(ckpt), "--seed", "7", "--out", str(tmp_path)])
    assert code != 0
    assert "perturbation dump" in capsys.readouterr().err


def test_report(run_dir, tmp_path):
    main(["evaluate", "--data", str(run_dir / "data"), "--checkpoint", str(run_dir / "run" / "car.ckpt"),
          "--seed", "7", "--out", str(tmp_path)])
    assert main(["report", str(tmp_path / "eval_car.json"), "--seed", "7", "--out", str(tmp_path)]) == 0
    rows = formats.read_csv(tmp_path / "report.csv")
    assert rows[1][0] == "car"


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "explainrec.cli", "synth", "--seed", "1", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "manifest.json" in out.stdout
