import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from pseudopoincare import cli
from pseudopoincare import tensor as T
from pseudopoincare import train as TR
from pseudopoincare.hypnorm import NormConfig


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_ngcn_karate_records_and_determinism(tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        code, out, _ = run_cli(capsys, "train", "--task", "node_class", "--model", "ngcn", "--epochs", "200",
                               "--seed", "3", "--output", str(d))
        assert code == 0
        summary = json.loads(out)
        assert summary["epochs"] == 200 and 0 <= summary["test_accuracy"] <= 1
    lines = (dirs[0] / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 200
    assert set(json.loads(lines[0])) == {"epoch", "loss", "val_metric"}
    assert len((dirs[0] / "timing.jsonl").read_text().splitlines()) == 200
    for name in ("metrics.jsonl", "checkpoint.npz", "result.json"):
        assert digest(dirs[0] / name) == digest(dirs[1] / name), name
    # checkpoint metadata differs only in the recorded output directory
    metas = [json.loads((d / "checkpoint.json").read_text()) for d in dirs]
    for m in metas:
        m["config"].pop("output")
    assert metas[0] == metas[1]


def test_train_streams_to_stdout_without_output(capsys):
    code, out, err = run_cli(capsys, "train", "--task", "link_pred", "--model", "gcn", "--epochs", "5")
    assert code == 0
    lines = [json.loads(l) for l in out.splitlines()]
    assert [r["epoch"] for r in lines[:5]] == [1, 2, 3, 4, 5]
    assert "test_roc_auc" in lines[-1]
    assert "training" in err


def test_usage_errors_exit_one(capsys, tmp_path):
    assert run_cli(capsys, "train", "--bogus")[0] == 1
    assert run_cli(capsys, "train", "--task", "kg", "--model", "gcn")[0] == 1
    assert run_cli(capsys, "train", "--epochs", "ten")[0] == 1
    assert run_cli(capsys, "export-embeddings", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "x"))[0] == 1
    assert run_cli(capsys, "bench", "--repeats", "2")[0] == 1
    assert run_cli(capsys)[0] == 1


def test_config_precedence(tmp_path, capsys, monkeypatch):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nmodel = ngcn\nepochs=7\nseed = 1\ncurvature=0.5\n")
    monkeypatch.setenv(cli.SEED_ENV, "9")
    args = cli.build_parser().parse_args(["train", "--config", str(conf), "--epochs", "3"])
    cfg = cli.resolve_config(args)
    assert (cfg.model, cfg.epochs, cfg.seed, cfg.curvature) == ("ngcn", 3, 9, 0.5)
    args = cli.build_parser().parse_args(["train", "--config", str(conf), "--seed", "4"])
    assert cli.resolve_config(args).seed == 4
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.resolve_config(cli.build_parser().parse_args(["train", "--config", str(conf)])).seed == 1
    conf.write_text("flavour = mint\n")
    assert run_cli(capsys, "train", "--config", str(conf))[0] == 1


def test_export_embeddings_round_trip(tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, _, _ = run_cli(capsys, "train", "--model", "ngcn", "--epochs", "20", "--curvature", "0.5",
                         "--output", str(run_dir))
    assert code == 0
    out = tmp_path / "emb.tsv"
    code, stdout, _ = run_cli(capsys, "export-embeddings", "--checkpoint", str(run_dir), "--out", str(out))
    assert code == 0
    info = json.loads(stdout)
    z = cli.read_embeddings(out)
    assert z.shape == (34, 64) and info["rows"] == 34
    cfg, state, _ = cli.load_checkpoint(run_dir)
    again, labels = cli.compute_embeddings(cfg, state)
    assert np.array_equal(z, again)
    assert len((tmp_path / "emb.labels.tsv").read_text().splitlines()) == 34
    bound = NormConfig(c=0.5).bound
    assert np.all(np.linalg.norm(z, axis=1) < bound)


def test_export_kg_embeddings(tmp_path, capsys):
    run_dir = tmp_path / "kg"
    code, out, _ = run_cli(capsys, "train", "--task", "kg", "--model", "murp", "--dataset", "tree-kg:2:3",
                           "--epochs", "2", "--dim", "8", "--output", str(run_dir))
    assert code == 0 and "test_mrr" in json.loads(out)
    code, _, _ = run_cli(capsys, "export-embeddings", "--checkpoint", str(run_dir), "--out", str(tmp_path / "e.tsv"))
    assert code == 0
    assert cli.read_embeddings(tmp_path / "e.tsv").shape == (15, 8)


def test_training_abort_keeps_last_checkpoint(tmp_path, capsys, monkeypatch):
    real = TR.cross_entropy
    calls = []

    def poisoned(logits, labels, idx):
        calls.append(1)
        loss = real(logits, labels, idx)
        return T.scale(loss, float("nan")) if len(calls) > 4 else loss

    monkeypatch.setattr(TR, "cross_entropy", poisoned)
    run_dir = tmp_path / "run"
    code, _, err = run_cli(capsys, "train", "--model", "gcn", "--epochs", "50", "--output", str(run_dir))
    assert code == 2 and "epoch 5" in err
    meta = json.loads((run_dir / "checkpoint.json").read_text())
    assert 1 <= meta["epoch"] <= 4
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 4


def test_verify_command(capsys):
    code, out, _ = run_cli(capsys, "verify")
    assert code == 0
    report = json.loads(out)
    checks = {c["name"]: c for c in report["checks"]}
    assert all(c["value"] <= 1e-9 for n, c in checks.items() if "log0_exp0" in n or "exp_at" in n)
    assert all(c["value"] == 0 for n, c in checks.items() if "violations" in n)
    assert all(c["value"] == 0 for n, c in checks.items() if n.startswith("midpoint"))


def test_verify_failure_exit_code(capsys, monkeypatch):
    from pseudopoincare import verify as V
    monkeypatch.setattr(V, "run_suite", lambda profile, seed: [V.Check("broken", 1.0, 0.0, False)])
    code, _, err = run_cli(capsys, "verify")
    assert code == 3 and "broken" in err


def test_bench_reports_json(capsys):
    code, out, _ = run_cli(capsys, "bench", "--models", "gcn,ngcn", "--repeats", "5", "--warmup", "1")
    assert code == 0
    report = json.loads(out)
    assert [e["model"] for e in report["entries"]] == ["gcn", "ngcn"]
    assert set(report["entries"][0]) >= {"model", "dataset", "mean", "stddev"}
    assert "ngcn/gcn" in report["ratios"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pseudopoincare", "verify", "--profile", "quick"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["passed"] is True
