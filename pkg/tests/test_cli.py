import json
import subprocess
import sys

import pytest

from permfree.cli import LOCK_NAME, git_blob_hash, run_lock, run_subcommand

TINY = {
    "model": {"mix_channels": [2], "sd_channels": 2, "rec_layers": 1, "cells": 4, "proj": 4,
              "dec_cells": 4, "att_dim": 4, "loc_filters": 2, "loc_width": 3},
    "train": {"stages": [{"name": "pretrain_single", "epochs": 1}, {"name": "multi_speaker", "epochs": 1}],
              "init_range": 0.5, "dev_cer_every": 1, "dev_beam": 2},
    "decode": {"beam": 2, "max_len": 8},
    "data": {"chars": "ab", "feat_dim": 4, "n_speakers": 4, "n_train": 8, "n_dev": 4, "n_eval": 4},
}


def _write_config(path, data_dir, **sections):
    cfg = json.loads(json.dumps(TINY))
    cfg["data"]["dir"] = str(data_dir)
    for k, v in sections.items():
        cfg[k].update(v)
    path.write_text("// tiny desk config\n" + json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_config(root / "run.json", root / "data")
    assert run_subcommand(["gen-data", "--config", str(cfg)]) == 0
    assert run_subcommand(["train", "--config", str(cfg), "--run-dir", str(root / "run")]) == 0
    return root, cfg


def _err_line(capsys):
    return capsys.readouterr().err.strip().splitlines()[-1]


def test_gen_data_writes_manifests_and_run_manifest(trained):
    root, _ = trained
    for split in ("train", "dev", "eval"):
        assert (root / "data" / f"{split}_mixed.jsonl").is_file()
    m = json.loads((root / "data" / "run_manifest.json").read_text())
    assert m["subcommand"] == "gen-data" and m["inputs"]["combined"]


def test_train_writes_checkpoints_metrics_and_manifest(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "model.ckpt").is_file()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["stage"] for x in lines] == ["pretrain_single", "multi_speaker"]
    assert json.loads((run / "run_manifest.json").read_text())["seed"] == 0
    assert not (run / LOCK_NAME).exists()


def test_dry_run_touches_nothing(trained, tmp_path, capsys):
    _, cfg = trained
    assert run_subcommand(["train", "--config", str(cfg), "--dry-run", "--run-dir", str(tmp_path / "r")]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True
    assert not (tmp_path / "r").exists()


def test_decode_and_eval_outputs(trained, tmp_path, capsys):
    root, cfg = trained
    ckpt, man = str(root / "run" / "model.ckpt"), str(root / "data" / "eval_mixed.jsonl")
    out = tmp_path / "hyps.jsonl"
    assert run_subcommand(["decode", "--config", str(cfg), "--checkpoint", ckpt, "--manifest", man,
                           "--out", str(out)]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(recs) == 8
    assert set(recs[0]) == {"id", "output_index", "hypothesis", "att_score", "ctc_score", "combined"}
    assert run_subcommand(["eval", "--config", str(cfg), "--checkpoint", ckpt, "--manifest", man,
                           "--out-dir", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "score_report.json").read_text())
    assert len(report["utterances"]) == 4
    assert (tmp_path / "ev" / "score_table.txt").read_text() in capsys.readouterr().out


def test_dump_hidden(trained, tmp_path):
    root, _ = trained
    man = root / "data" / "dev_mixed.jsonl"
    first = json.loads(man.read_text().splitlines()[0])["id"]
    assert run_subcommand(["dump-hidden", "--checkpoint", str(root / "run" / "model.ckpt"), "--manifest",
                           str(man), "--id", first, "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / f"{first}_G1.csv").is_file() and (tmp_path / f"{first}_G2_pca.csv").is_file()


def test_exit_codes(trained, tmp_path, capsys):
    root, cfg = trained
    assert run_subcommand([]) == 1
    assert run_subcommand(["frobnicate"]) == 1
    assert _err_line(capsys).startswith("error category=usage")
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"lam": 2, "nope": 1}}')
    assert run_subcommand(["train", "--config", str(bad), "--dry-run"]) == 2
    line = _err_line(capsys)
    assert line.startswith("error category=config") and "train.lam" in line and "train.nope" in line
    missing = _write_config(tmp_path / "m.json", tmp_path)
    assert run_subcommand(["train", "--config", str(missing), "--dry-run"]) == 3
    assert run_subcommand(["decode", "--checkpoint", str(tmp_path / "x.ckpt"), "--manifest", "m"]) == 3
    assert run_subcommand(["dump-hidden", "--checkpoint", str(root / "run" / "model.ckpt"), "--manifest",
                           str(root / "data" / "dev_mixed.jsonl"), "--id", "nope", "--out-dir",
                           str(tmp_path)]) == 3
    assert run_subcommand(["gradcheck", "--only", "linear", "--threshold", "0"]) == 4
    assert _err_line(capsys).startswith("error category=numeric")


def test_gradcheck_passes_selected_checks(capsys):
    assert run_subcommand(["gradcheck", "--only", "linear", "ctc_loss", "kl_contrast_loss"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(line.startswith("PASS") for line in out)
    assert run_subcommand(["gradcheck", "--only", "bogus"]) == 1


def test_lockfile_blocks_concurrent_runs(trained, tmp_path):
    _, cfg = trained
    with run_lock(tmp_path):
        assert run_subcommand(["train", "--config", str(cfg), "--run-dir", str(tmp_path)]) == 3
    assert not (tmp_path / LOCK_NAME).exists()


def test_blob_hash_matches_git_convention():
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "permfree", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "permfree" in r.stdout
