import json

import pytest

from lorafa.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_writes_report(tmp_path, capsys):
    report = tmp_path / "run.json"
    code, out, _ = run_cli(
        capsys, "train", "--task", "copy", "--mode", "lora-fa", "--rank", "2",
        "--lr", "1e-2", "--steps", "3", "--seed", "1",
        "--d", "16", "--layers", "1", "--heads", "2", "--vocab", "12",
        "--seq-len", "8", "--batch-size", "4", "--n-examples", "16",
        "--report", str(report),
    )
    assert code == EXIT_OK
    on_disk = report.read_text()
    assert on_disk == out.strip()
    parsed = json.loads(on_disk)
    assert parsed["status"] == "ok"
    assert len(parsed["loss_curve"]) == 3


def test_train_config_file_with_flag_override(tmp_path, capsys):
    cfg = {
        "model": {"d": 16, "n_layers": 1, "n_heads": 2, "vocab": 12,
                  "seq_len": 8, "batch_size": 4},
        "mode": "lora", "rank": 2, "lr": 1e-2, "steps": 2,
        "task": "copy", "n_examples": 16, "seed": 0,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = run_cli(capsys, "train", "--config", str(path), "--steps", "4")
    assert code == EXIT_OK
    parsed = json.loads(out)
    assert parsed["config"]["steps"] == 4          # flag wins
    assert parsed["config"]["mode"] == "lora"      # file survives


def test_train_divergence_exit_code(capsys):
    import numpy as np

    with np.errstate(over="ignore", invalid="ignore"):
        code, out, _ = run_cli(
            capsys, "train", "--mode", "ft", "--optimizer", "sgd", "--lr", "1e150",
            "--steps", "20", "--d", "16", "--layers", "1", "--heads", "2",
            "--vocab", "12", "--seq-len", "8", "--batch-size", "4", "--n-examples", "16",
        )
    assert code == EXIT_DIVERGED
    assert json.loads(out)["status"] == "diverged"


def test_config_error_exit_code(capsys):
    code, _, err = run_cli(capsys, "train", "--d", "15", "--heads", "2")
    assert code == EXIT_CONFIG
    assert "config error" in err


def test_sweep_outputs(tmp_path, capsys):
    prefix = tmp_path / "grid"
    code, out, _ = run_cli(
        capsys, "sweep", "--task", "copy", "--mode", "lora-fa",
        "--steps", "2", "--d", "16", "--layers", "1", "--heads", "2",
        "--vocab", "12", "--seq-len", "8", "--batch-size", "4",
        "--n-examples", "16", "--ranks", "1,2", "--lrs", "1e-2,1e-3",
        "--out", str(prefix),
    )
    assert code == EXIT_OK
    grid = json.loads(out)
    assert len(grid["cells"]) == 4
    csv = (tmp_path / "grid.csv").read_text().splitlines()
    assert csv[0] == "rank,lr,final_loss,status"
    assert len(csv) == 5
    assert json.loads((tmp_path / "grid.json").read_text()) == grid


def test_memreport_prints_both_models(capsys):
    code, out, _ = run_cli(
        capsys, "memreport", "--mode", "lora-fa", "--rank", "4",
        "--d", "32", "--layers", "2", "--heads", "4",
        "--batch-size", "2", "--seq-len", "8",
    )
    assert code == EXIT_OK
    rep = json.loads(out)
    assert "analytic_paper_constant" in rep and "analytic_per_layer_count" in rep
    pc = rep["analytic_paper_constant"]["activation_bytes_linear"]
    plc = rep["analytic_per_layer_count"]["activation_bytes_linear"]
    assert plc == 1.5 * pc


def test_memreport_quantization_quarters_weight_bytes(capsys):
    args = ["memreport", "--mode", "ft", "--d", "32", "--layers", "2",
            "--heads", "4", "--batch-size", "2", "--seq-len", "8"]
    _, out16, _ = run_cli(capsys, *args)
    _, out4, _ = run_cli(capsys, *args, "--weight-bits", "4")
    r16 = json.loads(out16)["analytic_paper_constant"]
    r4 = json.loads(out4)["analytic_paper_constant"]
    assert r4["weight_bytes"] == r16["weight_bytes"] / 4
    assert r4["trainable_state_bytes"] == r16["trainable_state_bytes"]
    assert r4["activation_bytes_linear"] == r16["activation_bytes_linear"]


def test_memreport_probe_reconciles(capsys):
    code, out, _ = run_cli(
        capsys, "memreport", "--mode", "lora", "--rank", "2", "--d", "16",
        "--layers", "1", "--heads", "2", "--vocab", "12",
        "--batch-size", "2", "--seq-len", "8", "--probe",
    )
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["reconciliation"]["match"] is True
    assert rep["measured"]["linear_low_elements"] == 6 * 1 * 2 * 8 * 2


def test_equiv_command_passes(capsys):
    code, out, _ = run_cli(capsys, "equiv", "--seed", "0", "--layers", "10",
                           "--samples", "100000")
    assert code == EXIT_OK
    verdicts = [json.loads(line) for line in out.strip().splitlines()]
    assert [v["check"] for v in verdicts] == [
        "sgd_compression_equivalence", "unbiasedness", "subspace"
    ]
    assert all(v["pass"] for v in verdicts)


def test_gradcheck_command_passes(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--seed", "3", "--trials", "3")
    assert code == EXIT_OK
    verdicts = [json.loads(line) for line in out.strip().splitlines()]
    assert all(v["pass"] for v in verdicts)
    names = {v["check"] for v in verdicts}
    assert "primitive:matmul" in names and "model:lora-fa" in names


def test_unknown_subcommand_is_argparse_error():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
