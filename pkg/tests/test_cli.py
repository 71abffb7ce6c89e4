import json
import time

import pytest

from bridgerec.cli import main

SMOKE_TASK = {"kind": "synthetic", "n_users_src": 200, "n_users_tgt": 200,
              "n_overlap": 140, "n_items_src": 80, "n_items_tgt": 80,
              "k_true": 4, "ratings_per_user": 12}


def _run_config(tmp_path, **overrides):
    cfg = {"task": SMOKE_TASK, "method": "ptupcdr", "k": 4, "beta": 0.2, "seed": 3,
           "pretrain": {"lr": 0.01, "epochs": 30},
           "bridge": {"lr": 0.01, "epochs": 20},
           "finetune": {"lr": 0.01, "epochs": 30}}
    cfg.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# prepare

def test_prepare_writes_deterministic_split(tmp_path, pair_csvs, capsys):
    src, tgt = pair_csvs
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    for out in (out1, out2):
        rc = main(["prepare", str(src), str(tgt), "--beta", "0.4", "--seed", "5",
                   "--out-dir", str(out)])
        assert rc == 0
    assert (out1 / "split.json").read_bytes() == (out2 / "split.json").read_bytes()
    for name in ("src_users", "src_items", "tgt_users", "tgt_items"):
        assert (out1 / f"{name}.json").exists()


def test_prepare_rejects_bad_beta(tmp_path, pair_csvs, capsys):
    src, tgt = pair_csvs
    rc = main(["prepare", str(src), str(tgt), "--beta", "1.5",
               "--out-dir", str(tmp_path / "o")])
    assert rc == 1
    assert "--beta" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# run

def test_run_synthetic_smoke_completes_quickly(tmp_path, capsys):
    cfg = _run_config(tmp_path, out_dir=str(tmp_path / "out"))
    start = time.monotonic()
    rc = main(["run", str(cfg)])
    elapsed = time.monotonic() - start
    assert rc == 0
    assert elapsed < 60.0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert {r["stage"] for r in report} == {"cold", "warm"}
    assert (tmp_path / "out" / "report.csv").exists()


def test_run_is_idempotent(tmp_path):
    cfg = _run_config(tmp_path, method="tgt",
                      pretrain={"lr": 0.01, "epochs": 10},
                      finetune={"lr": 0.01, "epochs": 10})
    blobs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["run", str(cfg), "--out-dir", str(out)]) == 0
        blobs.append(((out / "report.csv").read_bytes(),
                      (out / "report.json").read_bytes()))
    assert blobs[0] == blobs[1]


def test_run_target_only_method_on_files(tmp_path, pair_csvs):
    src, tgt = pair_csvs
    cfg = {"task": {"kind": "amazon", "src_path": str(src), "tgt_path": str(tgt)},
           "method": "tgt", "k": 3, "beta": 0.4, "seed": 1,
           "pretrain": {"lr": 0.02, "epochs": 20},
           "finetune": {"lr": 0.02, "epochs": 10}}
    path = tmp_path / "tgt.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path), "--out-dir", str(tmp_path / "out")]) == 0


def test_run_seed_override_changes_results(tmp_path):
    cfg = _run_config(tmp_path, method="tgt", out_dir=str(tmp_path / "a"))
    assert main(["run", str(cfg)]) == 0
    assert main(["run", str(cfg), "--seed", "99", "--out-dir", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a[0]["seed"] == 3 and b[0]["seed"] == 99


def test_run_rejects_unknown_config_keys(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"task": SMOKE_TASK, "method": "tgt", "typo_key": 1}))
    assert main(["run", str(path)]) == 1
    assert "typo_key" in capsys.readouterr().err


def test_run_meta_only_requires_checkpoints(tmp_path, capsys):
    cfg = _run_config(tmp_path, stage="meta_only",
                      checkpoint_dir=str(tmp_path / "nowhere"))
    assert main(["run", str(cfg), "--out-dir", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "src_model" in err and "nowhere" in err


def test_run_meta_only_from_saved_checkpoints(tmp_path):
    full_out = tmp_path / "full"
    cfg = _run_config(tmp_path, out_dir=str(full_out), save_checkpoints=True)
    assert main(["run", str(cfg)]) == 0
    ckpt = full_out / "checkpoints"
    assert (ckpt / "src_model.bin").exists() and (ckpt / "tgt_model.bin").exists()

    cfg2 = _run_config(tmp_path, stage="meta_only", checkpoint_dir=str(ckpt))
    assert main(["run", str(cfg2), "--out-dir", str(tmp_path / "meta_out")]) == 0
    full = json.loads((full_out / "report.json").read_text())
    again = json.loads((tmp_path / "meta_out" / "report.json").read_text())
    assert full[0]["mae"] == pytest.approx(again[0]["mae"], rel=1e-12)


# ---------------------------------------------------------------------------
# suite

def test_suite_three_methods_with_means_and_attention(tmp_path):
    suite = {"base": {"task": SMOKE_TASK, "method": "tgt", "k": 4, "beta": 0.2,
                      "pretrain": {"lr": 0.01, "epochs": 15},
                      "bridge": {"lr": 0.01, "epochs": 10},
                      "finetune": {"lr": 0.01, "epochs": 10}},
             "methods": ["tgt", "emcdr", "ptupcdr"],
             "seeds": [0, 1],
             "out_dir": str(tmp_path / "suite_out")}
    path = tmp_path / "suite.json"
    path.write_text(json.dumps(suite))
    assert main(["suite", str(path), "--export-attention"]) == 0
    table = (tmp_path / "suite_out" / "suite.csv").read_text().strip().splitlines()
    assert table[0] == "task,beta,method,stage,seed,mae,rmse,n_eval,runtime_s"
    assert len(table) == 1 + 12 + 6  # header + per-seed rows + mean rows
    assert sum(1 for line in table if ",mean," in line) == 6
    attention = (tmp_path / "suite_out" / "attention_ptupcdr_beta0.2.csv")
    assert attention.exists()
    assert attention.read_text().splitlines()[0] == "user,item,weight"


def test_suite_rejects_unknown_keys(tmp_path, capsys):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"base": {"task": SMOKE_TASK, "method": "tgt"},
                                "parallellism": 2}))
    assert main(["suite", str(path)]) == 1
    assert "parallellism" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# export

def test_export_attention_and_embeddings(tmp_path):
    cfg = _run_config(tmp_path)
    out = tmp_path / "export"
    assert main(["export", str(cfg), "--what", "both", "--out-dir", str(out)]) == 0
    att = (out / "attention.csv").read_text().splitlines()
    assert att[0] == "user,item,weight"
    assert len(att) > 1
    emb = (out / "embeddings.csv").read_text().splitlines()
    assert emb[0].startswith("user,kind,d0")
    kinds = {line.split(",")[1] for line in emb[1:]}
    assert kinds == {"transformed", "target"}


def test_export_attention_needs_bridge_method(tmp_path, capsys):
    cfg = _run_config(tmp_path, method="tgt")
    rc = main(["export", str(cfg), "--what", "attention",
               "--out-dir", str(tmp_path / "e")])
    assert rc == 1
    assert "ptupcdr" in capsys.readouterr().err


def test_run_emits_training_trace_csvs(tmp_path):
    cfg = _run_config(tmp_path, out_dir=str(tmp_path / "out"))
    assert main(["run", str(cfg)]) == 0
    for name in ("src_trace", "tgt_trace", "bridge_trace"):
        lines = (tmp_path / "out" / f"{name}.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) > 1
